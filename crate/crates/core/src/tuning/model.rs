//! The trainable part of the pipeline: alignment module, temporal module
//! and the optional extra MLP, wired according to a [`Variant`].

use std::path::Path;

use crate::adapters::{init_temporal_from_alignment, AlignmentModule, ExtraMlp, ExtraMlpCache, Label};
use crate::error::{Result, VillmError};
use crate::pooling::{window_pool, PooledFeatures};
use crate::tensor::ops::{concat_rows, slice_rows};
use crate::tensor::{hash_tensors, vtns, Tensor};

use super::config::{TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub variant: Variant,
    pub temporal_first: bool,
    pub spatial_window: usize,
    pub g_z: AlignmentModule,
    pub g_t: Option<AlignmentModule>,
    pub mlp: Option<ExtraMlp>,
}

pub struct StackCache {
    temporal_input: Option<Tensor>,
    spatial_input: Option<Tensor>,
    mlp: Option<ExtraMlpCache>,
    temporal_rows: usize,
    spatial_rows: usize,
}

impl AdapterStack {
    /// Builds the stack from the base alignment module. The temporal module,
    /// where the variant has one, starts as an exact copy of it.
    pub fn new(base_g_z: &AlignmentModule, cfg: &TrainConfig) -> Self {
        let variant = cfg.variant;
        let g_t = variant.has_temporal_module().then(|| init_temporal_from_alignment(base_g_z));
        let mlp = (variant == Variant::WithExtraMlp).then(|| ExtraMlp::seeded(base_g_z.out_dim(), cfg.seed));
        Self {
            variant,
            temporal_first: cfg.temporal_first,
            spatial_window: cfg.spatial_window,
            g_z: base_g_z.clone(),
            g_t,
            mlp,
        }
    }

    /// Names and tensors of the parameters this variant trains, in the
    /// order used for gradients and optimizer state.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if self.variant.trains_g_z() {
            out.push(("g_z.weight", &self.g_z.weight));
            out.push(("g_z.bias", &self.g_z.bias));
        }
        if let Some(g) = &self.g_t {
            out.push(("g_t.weight", &g.weight));
            out.push(("g_t.bias", &g.bias));
        }
        if let Some(m) = &self.mlp {
            out.push(("mlp.weight", &m.weight));
            out.push(("mlp.bias", &m.bias));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if self.variant.trains_g_z() {
            out.push(&mut self.g_z.weight);
            out.push(&mut self.g_z.bias);
        }
        if let Some(g) = &mut self.g_t {
            out.push(&mut g.weight);
            out.push(&mut g.bias);
        }
        if let Some(m) = &mut self.mlp {
            out.push(&mut m.weight);
            out.push(&mut m.bias);
        }
        out
    }

    /// Copy with the trainable tensors replaced, in [`Self::trainable`] order.
    pub fn with_trainable(&self, values: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.trainable_mut();
        if slots.len() != values.len() {
            return Err(VillmError::Config(format!(
                "expected {} trainable tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.dims() != v.dims() {
                return Err(VillmError::Shape {
                    op: "with_trainable",
                    lhs: slot.dims().to_vec(),
                    rhs: v.dims().to_vec(),
                });
            }
            *slot = v.clone();
        }
        Ok(out)
    }

    /// Every adapter tensor, trainable or not, with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("g_z.weight".to_string(), &self.g_z.weight),
            ("g_z.bias".to_string(), &self.g_z.bias),
        ];
        if let Some(g) = &self.g_t {
            out.push(("g_t.weight".into(), &g.weight));
            out.push(("g_t.bias".into(), &g.bias));
        }
        if let Some(m) = &self.mlp {
            out.push(("mlp.weight".into(), &m.weight));
            out.push(("mlp.bias".into(), &m.bias));
        }
        out
    }

    pub fn params_hash(&self) -> String {
        hash_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    fn spatial_features(&self, z: &Tensor) -> Result<Tensor> {
        if self.variant != Variant::WindowPooled {
            return Ok(z.clone());
        }
        let n = z.dims()[0];
        let side = (n as f64).sqrt().round() as usize;
        window_pool(z, side, self.spatial_window)
    }

    /// `Q_v` for one clip.
    pub fn forward(&self, f: &PooledFeatures) -> Result<(Tensor, StackCache)> {
        let v = self.variant;
        let mut cache = StackCache {
            temporal_input: None,
            spatial_input: None,
            mlp: None,
            temporal_rows: 0,
            spatial_rows: 0,
        };
        let q_t = if v.uses_temporal_tokens() {
            let g = self.g_t.as_ref().unwrap_or(&self.g_z);
            let q = g.forward(&f.temporal_t)?;
            cache.temporal_rows = q.dims()[0];
            cache.temporal_input = Some(f.temporal_t.clone());
            Some(q)
        } else {
            None
        };
        let q_z = if v.uses_spatial_tokens() {
            let z = self.spatial_features(&f.spatial_z)?;
            let mut q = self.g_z.forward(&z)?;
            if let Some(m) = &self.mlp {
                let (y, c) = m.forward(&q)?;
                cache.mlp = Some(c);
                q = y;
            }
            cache.spatial_rows = q.dims()[0];
            cache.spatial_input = Some(z);
            Some(q)
        } else {
            None
        };
        let q_v = match (q_t, q_z) {
            (Some(t), Some(z)) if self.temporal_first => concat_rows(&[&t, &z])?,
            (Some(t), Some(z)) => concat_rows(&[&z, &t])?,
            (Some(t), None) => t,
            (None, Some(z)) => z,
            (None, None) => unreachable!("every variant emits tokens"),
        };
        Ok((q_v, cache))
    }

    /// Gradients of the trainable tensors given `dL/dQ_v`.
    pub fn backward(&self, cache: &StackCache, dq_v: &Tensor) -> Result<Vec<Tensor>> {
        let (tr, sr) = (cache.temporal_rows, cache.spatial_rows);
        let (t_start, s_start) = if self.temporal_first { (0, tr) } else { (sr, 0) };
        let mut g_z_grad = (
            Tensor::zeros(self.g_z.weight.dims()),
            Tensor::zeros(self.g_z.bias.dims()),
        );
        let mut g_t_grad = None;
        let mut mlp_grad = None;

        if let Some(x) = &cache.temporal_input {
            let dq = slice_rows(dq_v, t_start, t_start + tr)?;
            match &self.g_t {
                Some(g) => g_t_grad = Some(g.param_grads(x, &dq)?),
                None => {
                    let (dw, db) = self.g_z.param_grads(x, &dq)?;
                    accumulate(&mut g_z_grad, dw, db);
                }
            }
        }
        if let Some(z) = &cache.spatial_input {
            let mut dq = slice_rows(dq_v, s_start, s_start + sr)?;
            if let (Some(m), Some(c)) = (&self.mlp, &cache.mlp) {
                let (dx, dw, db) = m.backward(c, &dq)?;
                mlp_grad = Some((dw, db));
                dq = dx;
            }
            let (dw, db) = self.g_z.param_grads(z, &dq)?;
            accumulate(&mut g_z_grad, dw, db);
        }

        let mut out = Vec::new();
        if self.variant.trains_g_z() {
            out.push(g_z_grad.0);
            out.push(g_z_grad.1);
        }
        if let Some(g) = &self.g_t {
            let (dw, db) = g_t_grad.unwrap_or_else(|| (Tensor::zeros(g.weight.dims()), Tensor::zeros(g.bias.dims())));
            out.push(dw);
            out.push(db);
        }
        if let Some(m) = &self.mlp {
            let (dw, db) = mlp_grad.unwrap_or_else(|| (Tensor::zeros(m.weight.dims()), Tensor::zeros(m.bias.dims())));
            out.push(dw);
            out.push(db);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.g_z.save(dir, "g_z")?;
        if let Some(g) = &self.g_t {
            g.save(dir, "g_t")?;
        }
        if let Some(m) = &self.mlp {
            vtns::save(dir.join("mlp.weight.vtns"), &m.weight)?;
            vtns::save(dir.join("mlp.bias.vtns"), &m.bias)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let variant = cfg.variant;
        let g_z = AlignmentModule::load(dir, "g_z", Label::Spatial)?;
        let g_t = if variant.has_temporal_module() {
            Some(AlignmentModule::load(dir, "g_t", Label::Temporal)?)
        } else {
            None
        };
        let mlp = if variant == Variant::WithExtraMlp {
            let k = g_z.out_dim();
            let weight = vtns::load_rank(dir.join("mlp.weight.vtns"), 2)?;
            let bias = vtns::load_rank(dir.join("mlp.bias.vtns"), 1)?;
            if weight.dims() != [k, k] || bias.dims() != [k] {
                return Err(VillmError::Manifest("extra MLP tensors have the wrong shape".into()));
            }
            Some(ExtraMlp {
                weight,
                bias,
                activation: crate::adapters::Activation::Gelu,
            })
        } else {
            None
        };
        Ok(Self {
            variant,
            temporal_first: cfg.temporal_first,
            spatial_window: cfg.spatial_window,
            g_z,
            g_t,
            mlp,
        })
    }
}

fn accumulate(acc: &mut (Tensor, Tensor), dw: Tensor, db: Tensor) {
    crate::transformer::add_into(&mut acc.0, &dw);
    crate::transformer::add_into(&mut acc.1, &db);
}
