//! Frozen per-frame image encoder and the video containers around it.

use std::path::Path;

use crate::error::{Result, VillmError};
use crate::rng;
use crate::tensor::ops::layer_norm;
use crate::tensor::{hash_tensors, vtns, Tensor};
use crate::transformer::{AttentionKind, Block, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VillmError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_patches() < 4 {
            return bad(format!("encoder needs at least 4 patches, has {}", self.num_patches()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }
}

/// Sampled frames, `T×H×W×3` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: Tensor,
    pub source_id: String,
}

impl VideoTensor {
    pub fn new(frames: Tensor, source_id: impl Into<String>) -> Result<Self> {
        let d = frames.dims();
        if d.len() != 4 || d[3] != 3 {
            return Err(VillmError::Config(format!(
                "video must be T×H×W×3, got {d:?}"
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VillmError::Config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[2]
    }

    fn frame_len(&self) -> usize {
        self.height() * self.width() * 3
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    /// Builds a video from the given frame indices of `self`.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        let mut dims = self.frames.dims().to_vec();
        dims[0] = indices.len();
        Self::new(Tensor::new(dims, data)?, self.source_id.clone())
    }

    pub fn reversed(&self) -> Result<Self> {
        let idx: Vec<usize> = (0..self.num_frames()).rev().collect();
        self.select(&idx)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = vtns::load_rank(path, 4)?;
        Self::new(t, path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        vtns::save(path, &self.frames)
    }
}

/// Frame indices for uniform sampling of `count` frames out of `available`:
/// `round(i·(F−1)/(T−1))`, repeating indices when `count > available`.
pub fn sample_indices(available: usize, count: usize) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(VillmError::Config("cannot sample from an empty video".into()));
    }
    if count == 0 {
        return Err(VillmError::Config("frame count must be at least 1".into()));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    Ok((0..count)
        .map(|i| ((i * (available - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect())
}

pub fn sample_frames(raw: &VideoTensor, count: usize) -> Result<VideoTensor> {
    raw.select(&sample_indices(raw.num_frames(), count)?)
}

/// Per-frame encoder output `X ∈ T×N×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings {
    pub x: Tensor,
}

impl FrameEmbeddings {
    pub fn new(x: Tensor) -> Result<Self> {
        if x.rank() != 3 {
            return Err(VillmError::Config(format!(
                "frame embeddings must be T×N×D, got {:?}",
                x.dims()
            )));
        }
        Ok(Self { x })
    }

    pub fn frames(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn patches(&self) -> usize {
        self.x.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.x.dims()[2]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        vtns::save(path, &self.x)
    }
}

/// Loads a `T×N×D` VTNS feature file.
pub fn load_features(path: impl AsRef<Path>) -> Result<FrameEmbeddings> {
    FrameEmbeddings::new(vtns::load_rank(path, 3)?)
}

const ENCODER_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    cfg: EncoderConfig,
    patch_weight: Tensor,
    patch_bias: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_gain: Tensor,
    ln_bias: Tensor,
}

impl VisualEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "visual-encoder");
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let patch_weight = rng::normal(&mut r, &[p * p * 3, d], ENCODER_STD);
        let pos = rng::normal(&mut r, &[cfg.num_patches(), d], ENCODER_STD);
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::init(d, &mut r, |_| ENCODER_STD))
            .collect();
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            pos,
            blocks,
            ln_gain: Tensor::ones(&[d]),
            ln_bias: Tensor::zeros(&[d]),
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Every weight tensor with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_weight".to_string(), &self.patch_weight),
            ("patch_bias".to_string(), &self.patch_bias),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in Block::PARAM_NAMES.iter().zip(b.params()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("ln_gain".into(), &self.ln_gain));
        out.push(("ln_bias".into(), &self.ln_bias));
        out
    }

    pub fn weights_hash(&self) -> String {
        hash_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    /// Flattens one frame into `N` patch vectors laid out `(dy, dx, channel)`,
    /// patches in row-major grid order.
    fn patchify(&self, frame: &[f64]) -> Tensor {
        let (s, p, g) = (self.cfg.image_size, self.cfg.patch_size, self.cfg.grid_side());
        let mut out = Vec::with_capacity(s * s * 3);
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    let row = (gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&frame[row * 3..(row + p) * 3]);
                }
            }
        }
        Tensor::from_parts(vec![g * g, p * p * 3], out)
    }

    /// Encodes one `H×W×3` frame to `N×D`.
    pub fn encode_frame(&self, frame: &[f64]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if frame.len() != s * s * 3 {
            return Err(VillmError::Config(format!(
                "frame has {} values, encoder expects {s}×{s}×3",
                frame.len()
            )));
        }
        let (n, d) = (self.cfg.num_patches(), self.cfg.embed_dim);
        let patches = self.patchify(frame);
        let emb = crate::transformer::mm(patches.data(), n, patches.dims()[1], self.patch_weight.data(), d);
        let data = emb
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.patch_bias.data()[i % d] + self.pos.data()[i])
            .collect();
        let mut x = Tensor::new(vec![n, d], data)?;
        let kind = AttentionKind { causal: false, rope_base: None };
        for b in &self.blocks {
            x = b.forward(&x, self.cfg.num_heads, kind)?.0;
        }
        Ok(layer_norm(&x, &self.ln_gain, &self.ln_bias, LN_EPS)?.0)
    }

    /// Encodes every frame independently into `T×N×D`.
    pub fn encode(&self, video: &VideoTensor) -> Result<FrameEmbeddings> {
        let s = self.cfg.image_size;
        if video.height() != s || video.width() != s {
            return Err(VillmError::Config(format!(
                "video frames are {}×{}, encoder expects {s}×{s}",
                video.height(),
                video.width()
            )));
        }
        let (n, d) = (self.cfg.num_patches(), self.cfg.embed_dim);
        let mut data = Vec::with_capacity(video.num_frames() * n * d);
        for i in 0..video.num_frames() {
            data.extend(self.encode_frame(video.frame(i))?.into_data());
        }
        FrameEmbeddings::new(Tensor::new(vec![video.num_frames(), n, d], data)?)
    }
}

pub fn encode_frames(video: &VideoTensor, cfg: &EncoderConfig) -> Result<FrameEmbeddings> {
    VisualEncoder::new(cfg.clone())?.encode(video)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(t: usize, seed: u64) -> VideoTensor {
        let mut r = rng::stream(seed, "video");
        let n = rng::normal(&mut r, &[t, 32, 32, 3], 1.0);
        let data = n.data().iter().map(|v| 0.5 + 0.5 * v.tanh()).collect();
        VideoTensor::new(Tensor::new(vec![t, 32, 32, 3], data).unwrap(), "v").unwrap()
    }

    #[test]
    fn sample_indices_examples() {
        assert_eq!(sample_indices(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_indices(9, 3).unwrap(), vec![0, 4, 8]);
        assert_eq!(sample_indices(1, 4).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(sample_indices(5, 1).unwrap(), vec![0]);
        assert!(sample_indices(0, 3).is_err());
    }

    #[test]
    fn frames_are_encoded_independently() {
        let enc = VisualEncoder::new(EncoderConfig::default()).unwrap();
        let v = video(3, 1);
        let x = enc.encode(&v).unwrap();
        assert_eq!(x.x.dims(), &[3, 16, 32]);
        let swapped = enc.encode(&v.select(&[2, 0, 1]).unwrap()).unwrap();
        let block = 16 * 32;
        assert_eq!(&swapped.x.data()[..block], &x.x.data()[2 * block..]);
        assert_eq!(&swapped.x.data()[block..2 * block], &x.x.data()[..block]);
    }

    #[test]
    fn patch_layout_is_row_major() {
        let cfg = EncoderConfig::default();
        let enc = VisualEncoder::new(cfg).unwrap();
        let mut frame = vec![0.0; 32 * 32 * 3];
        // pixel (y=9, x=17, c=1) sits in grid cell (1, 2), offset dy=1, dx=1
        frame[(9 * 32 + 17) * 3 + 1] = 1.0;
        let p = enc.patchify(&frame);
        let cell = 4 + 2;
        let offset = (8 + 1) * 3 + 1;
        assert_eq!(p.row(cell)[offset], 1.0);
        assert_eq!(p.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = VisualEncoder::new(EncoderConfig::default()).unwrap();
        let b = VisualEncoder::new(EncoderConfig::default()).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        let c = VisualEncoder::new(EncoderConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.weights_hash(), c.weights_hash());
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(VisualEncoder::new(EncoderConfig { image_size: 30, ..Default::default() }).is_err());
        assert!(VisualEncoder::new(EncoderConfig { image_size: 8, ..Default::default() }).is_err());
        assert!(VisualEncoder::new(EncoderConfig { num_heads: 3, ..Default::default() }).is_err());
        let enc = VisualEncoder::new(EncoderConfig { image_size: 64, ..Default::default() }).unwrap();
        assert!(enc.encode(&video(1, 0)).is_err());
        assert!(VideoTensor::new(Tensor::full(&[1, 4, 4, 3], 1.5), "x").is_err());
        assert!(VideoTensor::new(Tensor::zeros(&[1, 4, 4]), "x").is_err());
    }
}
