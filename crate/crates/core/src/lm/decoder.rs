//! Causal decoder with rotary positions and a tied unembedding.

use std::path::Path;

use crate::error::{Result, VillmError};
use crate::manifest::Manifest;
use crate::rng;
use crate::tensor::ops::{layer_norm, layer_norm_backward, layer_norm_param_grads, masked_nll, LayerNormCache};
use crate::tensor::{hash_tensors, vtns, Tensor};
use crate::transformer::{add_into, mm, mm_nt, mm_tn_acc, AttentionKind, Block, BlockCache, LN_EPS};

use super::tokenizer::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 256,
            seed: 0,
            rope_base: 100.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(VillmError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if (self.embed_dim / self.num_heads) % 2 != 0 {
            return Err(VillmError::Config("rotary positions need an even head width".into()));
        }
        if self.max_seq_len == 0 || !(self.rope_base > 1.0) {
            return Err(VillmError::Config("max_seq_len must be ≥ 1 and rope_base > 1".into()));
        }
        Ok(())
    }

    fn to_manifest(&self, m: &mut Manifest) {
        m.set("embed_dim", self.embed_dim)
            .set("num_layers", self.num_layers)
            .set("num_heads", self.num_heads)
            .set("max_seq_len", self.max_seq_len)
            .set("seed", self.seed)
            .set("rope_base", self.rope_base)
            .set("vocab_size", VOCAB_SIZE);
    }

    fn from_manifest(m: &Manifest) -> Result<Self> {
        m.expect("vocab_size", &VOCAB_SIZE.to_string())?;
        Ok(Self {
            embed_dim: m.parse_value("embed_dim")?,
            num_layers: m.parse_value("num_layers")?,
            num_heads: m.parse_value("num_heads")?,
            max_seq_len: m.parse_value("max_seq_len")?,
            seed: m.parse_value("seed")?,
            rope_base: m.parse_value("rope_base")?,
        })
    }
}

const TOKEN_EMBED_STD: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    /// `V×K` token embeddings, also the output projection.
    pub(crate) wte: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_gain: Tensor,
    pub(crate) ln_bias: Tensor,
}

pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
}

/// Summed masked NLL of one sequence and its gradient with respect to the
/// input embeddings.
pub struct SequenceLoss {
    pub nll_sum: f64,
    pub count: usize,
    pub d_embeddings: Tensor,
    pub max_abs_logit: f64,
}

/// Rows whose logits are scored: `i − 1` for every masked position `i`.
fn loss_rows(len: usize, k: usize, targets: &[usize], mask: &[bool]) -> Result<Vec<usize>> {
    if targets.len() != len || mask.len() != len {
        return Err(VillmError::Shape {
            op: "sequence_loss",
            lhs: vec![len, k],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    if mask.first() == Some(&true) {
        return Err(VillmError::Config("the first position has no predecessor to predict it".into()));
    }
    let rows: Vec<usize> = (1..len).filter(|&i| mask[i]).map(|i| i - 1).collect();
    if rows.is_empty() {
        return Err(VillmError::EmptyMask);
    }
    Ok(rows)
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "decoder");
        let k = cfg.embed_dim;
        let wte = rng::normal(&mut r, &[VOCAB_SIZE, k], TOKEN_EMBED_STD);
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::init(k, &mut r, |fan_in| 2.0 / (fan_in as f64).sqrt()))
            .collect();
        Ok(Self {
            wte,
            blocks,
            ln_gain: Tensor::ones(&[k]),
            ln_bias: Tensor::zeros(&[k]),
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn max_seq_len(&self) -> usize {
        self.cfg.max_seq_len
    }

    /// Copy with a different length budget; weights are shared by value.
    pub fn with_max_seq_len(&self, max_seq_len: usize) -> Self {
        let mut d = self.clone();
        d.cfg.max_seq_len = max_seq_len;
        d
    }

    pub fn token_embedding(&self, id: usize) -> &[f64] {
        self.wte.row(id)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in Block::PARAM_NAMES.iter().zip(b.params()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("ln_gain".into(), &self.ln_gain));
        out.push(("ln_bias".into(), &self.ln_bias));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.ln_gain);
        out.push(&mut self.ln_bias);
        out
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data_mut().fill(0.0);
        }
        z
    }

    pub fn weights_hash(&self) -> String {
        hash_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_seq_len {
            return Err(VillmError::Length {
                total: len,
                budget: self.cfg.max_seq_len,
                breakdown: format!("{len} embedding rows"),
            });
        }
        Ok(())
    }

    /// Final-norm hidden states for an `L×K` embedding sequence.
    pub fn forward_hidden(&self, embeddings: &Tensor) -> Result<(Tensor, DecoderCache)> {
        let (len, k) = embeddings.shape2()?;
        if k != self.cfg.embed_dim {
            return Err(VillmError::Shape {
                op: "decoder forward",
                lhs: embeddings.dims().to_vec(),
                rhs: vec![len, self.cfg.embed_dim],
            });
        }
        self.check_len(len)?;
        let kind = AttentionKind {
            causal: true,
            rope_base: Some(self.cfg.rope_base),
        };
        let mut x = embeddings.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, self.cfg.num_heads, kind)?;
            caches.push(c);
            x = y;
        }
        let (hidden, ln) = layer_norm(&x, &self.ln_gain, &self.ln_bias, LN_EPS)?;
        Ok((hidden, DecoderCache { blocks: caches, ln }))
    }

    /// Logits for every position, `L×V`.
    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (h, _) = self.forward_hidden(embeddings)?;
        let (len, k) = h.shape2()?;
        Tensor::new(vec![len, VOCAB_SIZE], mm_nt(h.data(), len, k, self.wte.data(), VOCAB_SIZE))
    }

    /// Logits of the final position only.
    pub fn last_logits(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        let (h, _) = self.forward_hidden(embeddings)?;
        let (len, k) = h.shape2()?;
        Ok(mm_nt(&h.data()[(len - 1) * k..], 1, k, self.wte.data(), VOCAB_SIZE))
    }

    /// Next-token loss: the logits at row `i − 1` are scored against
    /// `targets[i]` wherever `mask[i]` holds. Parameter gradients are
    /// accumulated into `grads` only when given.
    pub fn sequence_loss(
        &self,
        embeddings: &Tensor,
        targets: &[usize],
        mask: &[bool],
        mut grads: Option<&mut Decoder>,
    ) -> Result<SequenceLoss> {
        let (len, k) = embeddings.shape2()?;
        let rows = loss_rows(len, k, targets, mask)?;
        let (hidden, cache) = self.forward_hidden(embeddings)?;
        let (h_sel, logits) = self.selected_logits(&hidden, &rows)?;
        let m = rows.len();
        let sel_targets: Vec<usize> = rows.iter().map(|&r| targets[r + 1]).collect();
        let nll = masked_nll(&logits, &sel_targets, &vec![true; m])?;
        let dh_sel = mm(nll.dlogits.data(), m, VOCAB_SIZE, self.wte.data(), k);
        if let Some(g) = grads.as_deref_mut() {
            mm_tn_acc(nll.dlogits.data(), m, VOCAB_SIZE, &h_sel, k, g.wte.data_mut());
        }
        let mut dh = vec![0.0; len * k];
        for (j, &r) in rows.iter().enumerate() {
            dh[r * k..(r + 1) * k].copy_from_slice(&dh_sel[j * k..(j + 1) * k]);
        }
        let d_embeddings = self.backward(&cache, Tensor::from_parts(vec![len, k], dh), grads)?;
        Ok(SequenceLoss {
            nll_sum: nll.sum,
            count: nll.count,
            d_embeddings,
            max_abs_logit: logits.max_abs(),
        })
    }

    /// Forward-only [`Decoder::sequence_loss`]: summed NLL and the number of
    /// scored positions.
    pub fn sequence_nll(&self, embeddings: &Tensor, targets: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
        let (len, k) = embeddings.shape2()?;
        let rows = loss_rows(len, k, targets, mask)?;
        let (hidden, _) = self.forward_hidden(embeddings)?;
        let (_, logits) = self.selected_logits(&hidden, &rows)?;
        let sel_targets: Vec<usize> = rows.iter().map(|&r| targets[r + 1]).collect();
        let nll = masked_nll(&logits, &sel_targets, &vec![true; rows.len()])?;
        Ok((nll.sum, nll.count))
    }

    fn selected_logits(&self, hidden: &Tensor, rows: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let k = self.cfg.embed_dim;
        let mut h_sel = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            h_sel.extend_from_slice(hidden.row(r));
        }
        let m = rows.len();
        let logits = Tensor::new(vec![m, VOCAB_SIZE], mm_nt(&h_sel, m, k, self.wte.data(), VOCAB_SIZE))?;
        Ok((h_sel, logits))
    }

    /// Gradient with respect to the input embeddings given the gradient at
    /// the final-norm hidden states.
    pub fn backward(&self, cache: &DecoderCache, d_hidden: Tensor, mut grads: Option<&mut Decoder>) -> Result<Tensor> {
        if let Some(g) = grads.as_deref_mut() {
            let (dg, db) = layer_norm_param_grads(&cache.ln, &d_hidden)?;
            add_into(&mut g.ln_gain, &dg);
            add_into(&mut g.ln_bias, &db);
        }
        let mut dx = layer_norm_backward(&cache.ln, &self.ln_gain, &d_hidden)?;
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = grads.as_deref_mut().map(|g| &mut g.blocks[i]);
            dx = b.backward(c, &dx, self.cfg.num_heads, gb)?;
        }
        Ok(dx)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut m = Manifest::new();
        m.set("format", "villm-decoder").set("version", 1);
        self.cfg.to_manifest(&mut m);
        m.set("weights_hash", self.weights_hash());
        for (name, t) in self.named_tensors() {
            vtns::save(dir.join(format!("{name}.vtns")), t)?;
        }
        m.save(dir.join("decoder.manifest"))
    }

    /// Loads a decoder and verifies its weights against the recorded hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Manifest::load(dir.join("decoder.manifest"))?;
        m.expect("format", "villm-decoder")?;
        m.expect("version", "1")?;
        let mut d = Self::new(DecoderConfig::from_manifest(&m)?)?;
        let names: Vec<String> = d.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(d.params_mut()) {
            let t = vtns::load(dir.join(format!("{name}.vtns")))?;
            if t.dims() != slot.dims() {
                return Err(VillmError::Manifest(format!(
                    "{name}: expected {:?}, file holds {:?}",
                    slot.dims(),
                    t.dims()
                )));
            }
            *slot = t;
        }
        m.expect("weights_hash", &d.weights_hash())?;
        Ok(d)
    }
}
