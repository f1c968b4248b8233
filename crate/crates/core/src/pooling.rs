//! Average pooling of frame embeddings over time and over space.

use crate::encoder::FrameEmbeddings;
use crate::error::{Result, VillmError};
use crate::tensor::ops::mean_axis;
use crate::tensor::Tensor;

/// The two pooled views of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatures {
    /// `N×D`, mean over frames; one token per patch position.
    pub spatial_z: Tensor,
    /// `T×D`, mean over patches; one token per frame.
    pub temporal_t: Tensor,
}

impl PooledFeatures {
    pub fn from_embeddings(x: &FrameEmbeddings) -> Result<Self> {
        Ok(Self {
            spatial_z: temporal_pool(x)?,
            temporal_t: spatial_pool(x)?,
        })
    }
}

/// Mean along the time axis: `z[n, d] = 1/T Σ_t x[t, n, d]`.
pub fn temporal_pool(x: &FrameEmbeddings) -> Result<Tensor> {
    mean_axis(&x.x, 0)
}

/// Mean along the patch axis: `t[t, d] = 1/N Σ_n x[t, n, d]`.
pub fn spatial_pool(x: &FrameEmbeddings) -> Result<Tensor> {
    mean_axis(&x.x, 1)
}

/// Non-overlapping `window×window` mean over a row-major `grid_side²` patch
/// grid.
pub fn window_pool(z: &Tensor, grid_side: usize, window: usize) -> Result<Tensor> {
    let (n, d) = z.shape2()?;
    if grid_side == 0 || n != grid_side * grid_side {
        return Err(VillmError::Config(format!(
            "{n} tokens do not form a {grid_side}×{grid_side} grid"
        )));
    }
    if window == 0 || grid_side % window != 0 {
        return Err(VillmError::Config(format!(
            "grid side {grid_side} is not divisible by window {window}"
        )));
    }
    let out_side = grid_side / window;
    let inv = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; out_side * out_side * d];
    for oy in 0..out_side {
        for ox in 0..out_side {
            let dst = &mut out[(oy * out_side + ox) * d..(oy * out_side + ox + 1) * d];
            for wy in 0..window {
                for wx in 0..window {
                    let src = z.row((oy * window + wy) * grid_side + ox * window + wx);
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Tensor::new(vec![out_side * out_side, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn emb(t: usize, n: usize, d: usize, seed: u64) -> FrameEmbeddings {
        let mut r = rng::stream(seed, "pool");
        FrameEmbeddings::new(rng::normal(&mut r, &[t, n, d], 1.0)).unwrap()
    }

    #[test]
    fn single_frame_pools_to_itself() {
        let x = emb(1, 4, 3, 0);
        let z = temporal_pool(&x).unwrap();
        assert_eq!(z.data(), x.x.data());
    }

    #[test]
    fn two_frames_average() {
        let a = [1.0, -2.0, 0.5, 4.0];
        let data: Vec<f64> = a.iter().chain(a.iter().map(|v| v * 3.0).collect::<Vec<_>>().iter()).copied().collect();
        let x = FrameEmbeddings::new(Tensor::new(vec![2, 2, 2], data).unwrap()).unwrap();
        let z = temporal_pool(&x).unwrap();
        assert_eq!(z.data(), &a.map(|v| 2.0 * v));
    }

    #[test]
    fn constant_over_time_gives_identical_frame_tokens() {
        let one = emb(1, 4, 5, 3);
        let data = one.x.data().repeat(6);
        let x = FrameEmbeddings::new(Tensor::new(vec![6, 4, 5], data).unwrap()).unwrap();
        let t = spatial_pool(&x).unwrap();
        for i in 1..6 {
            assert_eq!(t.row(i), t.row(0));
        }
    }

    #[test]
    fn window_pool_cases() {
        let z = Tensor::new(vec![16, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = window_pool(&z, 4, 2).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(window_pool(&z, 4, 1).unwrap(), z);
        assert!(window_pool(&z, 4, 3).is_err());
        assert!(window_pool(&z, 5, 1).is_err());
        let big = Tensor::full(&[1024, 2], 0.75);
        let pooled = window_pool(&big, 32, 2).unwrap();
        assert_eq!(pooled.dims(), &[256, 2]);
        assert!(pooled.data().iter().all(|&v| v == 0.75));
    }
}
