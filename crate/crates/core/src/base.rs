//! The frozen image-language model the video adapters are built on:
//! image encoder, alignment module and decoder.
//!
//! The decoder and alignment module can be pretrained here on single-image
//! questions so that the decoder already reads aligned visual tokens. The
//! encoder stays at its seeded initialization throughout.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::adapters::{AlignmentModule, Label};
use crate::encoder::{EncoderConfig, VisualEncoder};
use crate::error::{IoContext, Result, VillmError};
use crate::harness::synthetic::pretraining_images;
use crate::lm::{build_prompt, Decoder, DecoderConfig};
use crate::manifest::Manifest;
use crate::pooling::temporal_pool;
use crate::tensor::Tensor;
use crate::transformer::add_into;
use crate::tuning::optim::Adam;
use crate::tuning::trainer::{epoch_order, steps_per_epoch};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub images: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            images: 4000,
            epochs: 3,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BaseConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// `None` leaves decoder and alignment module at their seeded init.
    pub pretrain: Option<PretrainConfig>,
}

impl BaseConfig {
    fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        let e = &self.encoder;
        m.set("encoder.image_size", e.image_size)
            .set("encoder.patch_size", e.patch_size)
            .set("encoder.embed_dim", e.embed_dim)
            .set("encoder.num_layers", e.num_layers)
            .set("encoder.num_heads", e.num_heads)
            .set("encoder.seed", e.seed);
        let d = &self.decoder;
        m.set("decoder.embed_dim", d.embed_dim)
            .set("decoder.num_layers", d.num_layers)
            .set("decoder.num_heads", d.num_heads)
            .set("decoder.seed", d.seed)
            .set("decoder.rope_base", d.rope_base);
        match &self.pretrain {
            None => {
                m.set("pretrain", "none");
            }
            Some(p) => {
                m.set("pretrain.images", p.images)
                    .set("pretrain.epochs", p.epochs)
                    .set("pretrain.learning_rate", p.learning_rate)
                    .set("pretrain.batch_size", p.batch_size)
                    .set("pretrain.seed", p.seed);
            }
        }
        m
    }

    /// Content key of the configuration; `max_seq_len` is excluded since it
    /// does not affect weights.
    pub fn key(&self) -> String {
        hex::encode(Sha256::digest(self.to_manifest().render().as_bytes()))
    }
}

#[derive(Clone, Debug)]
pub struct ImageLlm {
    pub config: BaseConfig,
    pub encoder: VisualEncoder,
    pub decoder: Decoder,
    pub g_z: AlignmentModule,
    /// Mean loss of each pretraining epoch.
    pub pretrain_losses: Vec<f64>,
}

impl ImageLlm {
    /// Seeded weights, no pretraining.
    pub fn untrained(config: &BaseConfig) -> Result<Self> {
        let encoder = VisualEncoder::new(config.encoder.clone())?;
        let decoder = Decoder::new(config.decoder.clone())?;
        let g_z = AlignmentModule::seeded(
            config.encoder.embed_dim,
            config.decoder.embed_dim,
            Label::Spatial,
            config.decoder.seed,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            g_z,
            pretrain_losses: Vec::new(),
        })
    }

    /// Seeded weights, pretrained when the config asks for it, rounded to
    /// f32 so the model survives a save/load unchanged.
    pub fn build(config: &BaseConfig) -> Result<Self> {
        let mut m = Self::untrained(config)?;
        if let Some(p) = &config.pretrain {
            m.pretrain(p)?;
        }
        for t in m.decoder.params_mut() {
            t.round_to_f32();
        }
        m.g_z.weight.round_to_f32();
        m.g_z.bias.round_to_f32();
        m.g_z.init_source_hash = m.g_z.params_hash();
        Ok(m)
    }

    fn pretrain(&mut self, p: &PretrainConfig) -> Result<()> {
        let images = pretraining_images(p.images, self.config.encoder.image_size, p.seed)?;
        let data: Vec<(Tensor, &str, &str)> = images
            .iter()
            .map(|e| Ok((temporal_pool(&self.encoder.encode(&e.video)?)?, e.instruction.as_str(), e.answer.as_str())))
            .collect::<Result<_>>()?;
        let mut shapes: Vec<Vec<usize>> = self.decoder.named_tensors().iter().map(|(_, t)| t.dims().to_vec()).collect();
        shapes.push(self.g_z.weight.dims().to_vec());
        shapes.push(self.g_z.bias.dims().to_vec());
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let mut opt = Adam::new(p.learning_rate, &refs);
        let spe = steps_per_epoch(data.len(), p.batch_size) as usize;
        for epoch in 0..p.epochs {
            let order = epoch_order(p.seed, epoch as u64, data.len());
            let mut epoch_loss = 0.0;
            for b in 0..spe {
                let idx = &order[b * p.batch_size..((b + 1) * p.batch_size).min(data.len())];
                let mut d_grads = self.decoder.zeros_like();
                let mut gw = Tensor::zeros(self.g_z.weight.dims());
                let mut gb = Tensor::zeros(self.g_z.bias.dims());
                let (mut nll, mut count) = (0.0, 0usize);
                for &i in idx {
                    let (z, q, a) = &data[i];
                    let q_v = self.g_z.forward(z)?;
                    let prompt = build_prompt(&self.decoder, &q_v, q, Some(a))?;
                    let loss = self.decoder.sequence_loss(
                        &prompt.embeddings,
                        &prompt.target_ids,
                        &prompt.loss_mask,
                        Some(&mut d_grads),
                    )?;
                    nll += loss.nll_sum;
                    count += loss.count;
                    let k = self.decoder.embed_dim();
                    for pos in 0..prompt.len() {
                        if let Some(id) = prompt.input_id(pos) {
                            let src = loss.d_embeddings.row(pos);
                            let dst = &mut d_grads.wte.data_mut()[id * k..(id + 1) * k];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    let rows = prompt.video_rows();
                    let dq = crate::tensor::ops::slice_rows(&loss.d_embeddings, rows.start, rows.end)?;
                    let (dw, db) = self.g_z.param_grads(z, &dq)?;
                    add_into(&mut gw, &dw);
                    add_into(&mut gb, &db);
                }
                let inv = 1.0 / count as f64;
                let mut grads: Vec<Tensor> = d_grads.params_mut().into_iter().map(|t| t.clone()).collect();
                grads.push(gw);
                grads.push(gb);
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= inv);
                    g.check_finite("pretraining gradient")?;
                }
                let mut params = self.decoder.params_mut();
                params.push(&mut self.g_z.weight);
                params.push(&mut self.g_z.bias);
                opt.step(&mut params, &grads)?;
                epoch_loss += nll * inv;
            }
            let mean = epoch_loss / spe as f64;
            log::info!("base pretraining epoch {} loss {mean:.5}", epoch + 1);
            self.pretrain_losses.push(mean);
        }
        Ok(())
    }

    /// Hash over every frozen encoder and decoder tensor.
    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder.weights_hash());
        h.update(self.decoder.weights_hash());
        hex::encode(h.finalize())
    }

    /// SHA-256 of every frozen tensor, by name.
    pub fn tensor_hashes(&self) -> Vec<(String, String)> {
        let enc = self.encoder.named_tensors().into_iter().map(|(n, t)| (format!("encoder.{n}"), t.content_hash()));
        let dec = self.decoder.named_tensors().into_iter().map(|(n, t)| (format!("decoder.{n}"), t.content_hash()));
        enc.chain(dec).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let dec_dir = dir.join("decoder");
        std::fs::create_dir_all(&dec_dir).io_context(|| format!("creating {}", dec_dir.display()))?;
        self.decoder.save(&dec_dir)?;
        self.g_z.save(dir, "g_z")?;
        let mut m = self.config.to_manifest();
        m.set("format", "villm-base")
            .set("version", 1)
            .set("config_key", self.config.key())
            .set("backbone_hash", self.backbone_hash())
            .set(
                "pretrain_losses",
                self.pretrain_losses.iter().map(|l| format!("{l:.6}")).collect::<Vec<_>>().join(","),
            );
        m.save(dir.join("base.manifest"))
    }

    /// Loads a saved base built from `config`.
    pub fn load(dir: impl AsRef<Path>, config: &BaseConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Manifest::load(dir.join("base.manifest"))?;
        m.expect("format", "villm-base")?;
        m.expect("version", "1")?;
        m.expect("config_key", &config.key())?;
        let decoder = Decoder::load(dir.join("decoder"))?.with_max_seq_len(config.decoder.max_seq_len);
        let g_z = AlignmentModule::load(dir, "g_z", Label::Spatial)?;
        let losses = m.get("pretrain_losses")?;
        let pretrain_losses = if losses.is_empty() {
            Vec::new()
        } else {
            losses
                .split(',')
                .map(|s| s.parse().map_err(|_| VillmError::Manifest(format!("bad loss {s:?}"))))
                .collect::<Result<_>>()?
        };
        let base = Self {
            config: config.clone(),
            encoder: VisualEncoder::new(config.encoder.clone())?,
            decoder,
            g_z,
            pretrain_losses,
        };
        m.expect("backbone_hash", &base.backbone_hash())?;
        Ok(base)
    }

    pub fn cache_dir(cache_root: &Path, config: &BaseConfig) -> PathBuf {
        cache_root.join(format!("base-{}", &config.key()[..16]))
    }

    /// Loads the base for `config` from `cache_root`, building and storing it
    /// first if absent.
    pub fn load_or_build(config: &BaseConfig, cache_root: impl AsRef<Path>) -> Result<Self> {
        let root = cache_root.as_ref();
        let dir = Self::cache_dir(root, config);
        if dir.join("base.manifest").exists() {
            return Self::load(&dir, config);
        }
        let base = Self::build(config)?;
        std::fs::create_dir_all(root).io_context(|| format!("creating {}", root.display()))?;
        let tmp = root.join(format!(".tmp-{}-{}", &config.key()[..16], std::process::id()));
        let _ = std::fs::remove_dir_all(&tmp);
        base.save(&tmp)?;
        if std::fs::rename(&tmp, &dir).is_err() {
            // Another process finished first; use its copy.
            let _ = std::fs::remove_dir_all(&tmp);
            return Self::load(&dir, config);
        }
        Ok(base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BaseConfig {
        BaseConfig {
            decoder: DecoderConfig {
                embed_dim: 16,
                ..Default::default()
            },
            pretrain: Some(PretrainConfig {
                images: 8,
                epochs: 2,
                batch_size: 4,
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    #[test]
    fn pretraining_moves_decoder_but_not_encoder() {
        let cfg = tiny();
        let raw = ImageLlm::untrained(&cfg).unwrap();
        let built = ImageLlm::build(&cfg).unwrap();
        assert_eq!(raw.encoder.weights_hash(), built.encoder.weights_hash());
        assert_ne!(raw.decoder.weights_hash(), built.decoder.weights_hash());
        assert_eq!(built.pretrain_losses.len(), 2);
        assert_eq!(ImageLlm::build(&cfg).unwrap().backbone_hash(), built.backbone_hash());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let a = ImageLlm::load_or_build(&cfg, dir.path()).unwrap();
        assert!(ImageLlm::cache_dir(dir.path(), &cfg).join("base.manifest").exists());
        let b = ImageLlm::load_or_build(&cfg, dir.path()).unwrap();
        assert_eq!(a.backbone_hash(), b.backbone_hash());
        assert_eq!(a.g_z, b.g_z);
        let other = BaseConfig { pretrain: None, ..cfg };
        assert!(ImageLlm::load(ImageLlm::cache_dir(dir.path(), &tiny()), &other).is_err());
    }
}
