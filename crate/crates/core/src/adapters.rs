//! Alignment adapters mapping encoder features (width D) into the decoder's
//! embedding space (width K), and fusion of the two token groups.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, VillmError};
use crate::manifest::Manifest;
use crate::rng;
use crate::tensor::ops::{add_row_bias, concat_rows, matmul, matmul_nt, matmul_tn, sum_rows};
use crate::tensor::{hash_tensors, vtns, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Spatial,
    Temporal,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Spatial => "spatial",
            Label::Temporal => "temporal",
        })
    }
}

impl FromStr for Label {
    type Err = VillmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Label::Spatial),
            "temporal" => Ok(Label::Temporal),
            _ => Err(VillmError::Config(format!("unknown adapter label `{s}`"))),
        }
    }
}

/// Rowwise affine map `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModule {
    pub weight: Tensor,
    pub bias: Tensor,
    pub label: Label,
    /// Hash of the parameters this module was initialized from.
    pub init_source_hash: String,
}

impl AlignmentModule {
    pub fn new(weight: Tensor, bias: Tensor, label: Label) -> Result<Self> {
        let (d, k) = weight.shape2()?;
        if bias.dims() != [k] {
            return Err(VillmError::Shape {
                op: "alignment module",
                lhs: vec![d, k],
                rhs: bias.dims().to_vec(),
            });
        }
        let init_source_hash = hash_tensors([&weight, &bias]);
        Ok(Self {
            weight,
            bias,
            label,
            init_source_hash,
        })
    }

    /// Weight `N(0, 1/D)`, bias zero.
    pub fn seeded(d: usize, k: usize, label: Label, seed: u64) -> Self {
        let mut r = rng::stream(seed, "alignment-module");
        let w = rng::normal(&mut r, &[d, k], 1.0 / (d as f64).sqrt());
        Self::new(w, Tensor::zeros(&[k]), label).expect("consistent shapes")
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_row_bias(&matmul(x, &self.weight)?, &self.bias)
    }

    /// `(dW, db)` for upstream gradient `dy` at input `x`.
    pub fn param_grads(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((matmul_tn(x, dy)?, sum_rows(dy)?))
    }

    pub fn input_grad(&self, dy: &Tensor) -> Result<Tensor> {
        matmul_nt(dy, &self.weight)
    }

    pub fn params_hash(&self) -> String {
        hash_tensors([&self.weight, &self.bias])
    }

    pub fn save(&self, dir: impl AsRef<Path>, name: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mut m = Manifest::new();
        m.set("label", self.label)
            .set("D", self.in_dim())
            .set("K", self.out_dim())
            .set("init_source_hash", &self.init_source_hash);
        m.save(dir.join(format!("{name}.manifest")))?;
        vtns::save(dir.join(format!("{name}.weight.vtns")), &self.weight)?;
        vtns::save(dir.join(format!("{name}.bias.vtns")), &self.bias)
    }

    /// Loads a module saved under `name` and checks its label.
    pub fn load(dir: impl AsRef<Path>, name: &str, expected: Label) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Manifest::load(dir.join(format!("{name}.manifest")))?;
        let label: Label = m.get("label")?.parse()?;
        if label != expected {
            return Err(VillmError::LabelMismatch {
                expected: expected.to_string(),
                found: label.to_string(),
            });
        }
        let d: usize = m.parse_value("D")?;
        let k: usize = m.parse_value("K")?;
        let weight = vtns::load_rank(dir.join(format!("{name}.weight.vtns")), 2)?;
        let bias = vtns::load_rank(dir.join(format!("{name}.bias.vtns")), 1)?;
        if weight.dims() != [d, k] || bias.dims() != [k] {
            return Err(VillmError::Manifest(format!(
                "{name}: manifest says {d}×{k}, files hold {:?} and {:?}",
                weight.dims(),
                bias.dims()
            )));
        }
        let mut module = Self::new(weight, bias, label)?;
        module.init_source_hash = m.get("init_source_hash")?.to_string();
        Ok(module)
    }
}

fn expect_label(g: &AlignmentModule, label: Label) -> Result<()> {
    if g.label != label {
        return Err(VillmError::LabelMismatch {
            expected: label.to_string(),
            found: g.label.to_string(),
        });
    }
    Ok(())
}

/// `Q_z = g_z(z)`, one row per input token.
pub fn align_spatial(z: &Tensor, g_z: &AlignmentModule) -> Result<Tensor> {
    expect_label(g_z, Label::Spatial)?;
    g_z.forward(z)
}

/// `Q_t = g_t(t)`, one row per frame.
pub fn align_temporal(t: &Tensor, g_t: &AlignmentModule) -> Result<Tensor> {
    expect_label(g_t, Label::Temporal)?;
    g_t.forward(t)
}

/// Independent deep copy of `g_z` labelled temporal.
pub fn init_temporal_from_alignment(g_z: &AlignmentModule) -> AlignmentModule {
    AlignmentModule {
        weight: g_z.weight.clone(),
        bias: g_z.bias.clone(),
        label: Label::Temporal,
        init_source_hash: g_z.params_hash(),
    }
}

/// Row concatenation `[q_t; q_z]`.
pub fn fuse(q_t: &Tensor, q_z: &Tensor) -> Result<Tensor> {
    let (_, kt) = q_t.shape2()?;
    let (_, kz) = q_z.shape2()?;
    if kt != kz {
        return Err(VillmError::Shape {
            op: "fuse",
            lhs: q_t.dims().to_vec(),
            rhs: q_z.dims().to_vec(),
        });
    }
    concat_rows(&[q_t, q_z])
}

/// Aligned video tokens. Either group may be absent in ablation variants.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTokens {
    pub q_t: Option<Tensor>,
    pub q_z: Option<Tensor>,
    pub q_v: Tensor,
}

impl VideoTokens {
    pub fn fused(q_t: Tensor, q_z: Tensor) -> Result<Self> {
        let q_v = fuse(&q_t, &q_z)?;
        Ok(Self {
            q_t: Some(q_t),
            q_z: Some(q_z),
            q_v,
        })
    }

    pub fn temporal_only(q_t: Tensor) -> Self {
        Self {
            q_v: q_t.clone(),
            q_t: Some(q_t),
            q_z: None,
        }
    }

    pub fn spatial_only(q_z: Tensor) -> Self {
        Self {
            q_v: q_z.clone(),
            q_t: None,
            q_z: Some(q_z),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.q_v.dims()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

/// Randomly initialized `K×K` layer `act(x·W + b)` placed behind an
/// alignment module in the extra-MLP ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtraMlp {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

pub struct ExtraMlpCache {
    input: Tensor,
    pre: Tensor,
}

impl ExtraMlp {
    /// Weight `N(0, 1/K)`, bias zero, GELU.
    pub fn seeded(k: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "extra-mlp");
        Self {
            weight: rng::normal(&mut r, &[k, k], 1.0 / (k as f64).sqrt()),
            bias: Tensor::zeros(&[k]),
            activation: Activation::Gelu,
        }
    }

    /// The identity map, for checking composition.
    pub fn identity(k: usize) -> Self {
        Self {
            weight: Tensor::eye(k),
            bias: Tensor::zeros(&[k]),
            activation: Activation::Identity,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ExtraMlpCache)> {
        let pre = add_row_bias(&matmul(x, &self.weight)?, &self.bias)?;
        let y = match self.activation {
            Activation::Gelu => crate::tensor::ops::gelu(&pre)?,
            Activation::Identity => pre.clone(),
        };
        Ok((
            y,
            ExtraMlpCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    /// Returns `(dx, dW, db)`.
    pub fn backward(&self, cache: &ExtraMlpCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let dpre = match self.activation {
            Activation::Gelu => crate::tensor::ops::gelu_backward(&cache.pre, dy)?,
            Activation::Identity => dy.clone(),
        };
        Ok((
            matmul_nt(&dpre, &self.weight)?,
            matmul_tn(&cache.input, &dpre)?,
            sum_rows(&dpre)?,
        ))
    }

    pub fn params_hash(&self) -> String {
        hash_tensors([&self.weight, &self.bias])
    }
}

/// An alignment module followed by an [`ExtraMlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedAdapter {
    pub inner: AlignmentModule,
    pub mlp: ExtraMlp,
}

impl ComposedAdapter {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(&self.inner.forward(x)?)?.0)
    }
}

pub fn attach_extra_mlp(g: AlignmentModule, seed: u64) -> ComposedAdapter {
    let mlp = ExtraMlp::seeded(g.out_dim(), seed);
    ComposedAdapter { inner: g, mlp }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input_through() {
        let g = AlignmentModule::new(Tensor::eye(3), Tensor::zeros(&[3]), Label::Spatial).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(align_spatial(&z, &g).unwrap(), z);
    }

    #[test]
    fn zero_input_gives_bias_rows() {
        let mut g = AlignmentModule::seeded(4, 5, Label::Spatial, 1);
        g.bias = Tensor::new(vec![5], vec![1.0, -1.0, 2.0, 0.0, 3.0]).unwrap();
        let q = align_spatial(&Tensor::zeros(&[3, 4]), &g).unwrap();
        for r in 0..3 {
            assert_eq!(q.row(r), g.bias.data());
        }
    }

    #[test]
    fn labels_are_enforced() {
        let g = AlignmentModule::seeded(4, 5, Label::Spatial, 1);
        assert!(matches!(
            align_temporal(&Tensor::zeros(&[2, 4]), &g),
            Err(VillmError::LabelMismatch { .. })
        ));
        let t = init_temporal_from_alignment(&g);
        assert!(align_spatial(&Tensor::zeros(&[2, 4]), &t).is_err());
        assert_eq!(t.params_hash(), g.params_hash());
        assert_eq!(t.init_source_hash, g.params_hash());
        let tt = init_temporal_from_alignment(&t);
        assert_eq!((&tt.weight, &tt.bias), (&g.weight, &g.bias));
    }

    #[test]
    fn fuse_puts_temporal_rows_first() {
        let q_t = Tensor::full(&[1, 4], 1.0);
        let q_z = Tensor::full(&[1, 4], 2.0);
        let q_v = fuse(&q_t, &q_z).unwrap();
        assert_eq!(q_v.dims(), &[2, 4]);
        assert_eq!(q_v.row(0), q_t.row(0));
        assert!(fuse(&q_t, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn identity_mlp_composes_to_inner() {
        let g = AlignmentModule::seeded(4, 6, Label::Spatial, 2);
        let x = rng::normal(&mut rng::stream(0, "x"), &[3, 4], 1.0);
        let composed = ComposedAdapter {
            inner: g.clone(),
            mlp: ExtraMlp::identity(6),
        };
        assert_eq!(composed.forward(&x).unwrap(), g.forward(&x).unwrap());
        let seeded = attach_extra_mlp(g.clone(), 5);
        assert_ne!(seeded.forward(&x).unwrap(), g.forward(&x).unwrap());
    }

    #[test]
    fn save_load_round_trip_and_label_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = AlignmentModule::seeded(4, 6, Label::Spatial, 2);
        g.weight.round_to_f32();
        g.save(dir.path(), "g_z").unwrap();
        let back = AlignmentModule::load(dir.path(), "g_z", Label::Spatial).unwrap();
        assert_eq!(back, g);
        assert!(matches!(
            AlignmentModule::load(dir.path(), "g_z", Label::Temporal),
            Err(VillmError::LabelMismatch { .. })
        ));
    }
}
