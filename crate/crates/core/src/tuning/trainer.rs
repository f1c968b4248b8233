use rand::seq::SliceRandom;

use crate::base::ImageLlm;
use crate::error::{Result, VillmError};
use crate::lm::{build_prompt, Decoder, PromptBatch};
use crate::rng;
use crate::tensor::ops::slice_rows;
use crate::tensor::{grad_check, FnObjective, GradCheckReport, Tensor};
use crate::transformer::add_into;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::Sample;
use super::model::{AdapterStack, StackCache};
use super::optim::Adam;

/// Summed loss and adapter gradients over one or more prompts.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub nll_sum: f64,
    pub count: usize,
    /// Trainable-tensor gradients of `nll_sum`, in [`AdapterStack::trainable`] order.
    pub grads: Vec<Tensor>,
    pub max_abs_logit: f64,
}

impl Gradients {
    pub fn mean_loss(&self) -> f64 {
        self.nll_sum / self.count as f64
    }
}

/// Embeds one sample's supervised prompt.
pub fn sample_prompt(decoder: &Decoder, adapters: &AdapterStack, sample: &Sample) -> Result<(PromptBatch, StackCache)> {
    let (q_v, cache) = adapters.forward(&sample.features)?;
    let prompt = build_prompt(decoder, &q_v, &sample.instruction, Some(&sample.answer))?;
    Ok((prompt, cache))
}

/// Masked loss of one prompt and its gradient with respect to the adapters.
/// Decoder weights are read only; no gradient buffers exist for them.
pub fn prompt_gradients(
    decoder: &Decoder,
    adapters: &AdapterStack,
    prompt: &PromptBatch,
    cache: &StackCache,
) -> Result<Gradients> {
    let loss = decoder.sequence_loss(&prompt.embeddings, &prompt.target_ids, &prompt.loss_mask, None)?;
    let rows = prompt.video_rows();
    let dq_v = slice_rows(&loss.d_embeddings, rows.start, rows.end)?;
    Ok(Gradients {
        nll_sum: loss.nll_sum,
        count: loss.count,
        grads: adapters.backward(cache, &dq_v)?,
        max_abs_logit: loss.max_abs_logit,
    })
}

/// Mean masked loss over a batch and its gradient. Each sample runs as its
/// own sequence, which under causal attention is the same as padding the
/// batch at the tail and excluding the padding.
pub fn batch_gradients(decoder: &Decoder, adapters: &AdapterStack, batch: &[&Sample]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(VillmError::Dataset("empty batch".into()));
    }
    let mut total: Option<Gradients> = None;
    for s in batch {
        let (prompt, cache) = sample_prompt(decoder, adapters, s)?;
        let g = prompt_gradients(decoder, adapters, &prompt, &cache)?;
        match &mut total {
            None => total = Some(g),
            Some(t) => {
                t.nll_sum += g.nll_sum;
                t.count += g.count;
                t.max_abs_logit = t.max_abs_logit.max(g.max_abs_logit);
                for (a, b) in t.grads.iter_mut().zip(&g.grads) {
                    add_into(a, b);
                }
            }
        }
    }
    let mut t = total.expect("non-empty batch");
    let inv = 1.0 / t.count as f64;
    t.nll_sum *= inv;
    t.count = 1;
    for g in &mut t.grads {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(t)
}

/// Mean masked loss over a batch, forward only.
pub fn batch_loss(decoder: &Decoder, adapters: &AdapterStack, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(VillmError::Dataset("empty batch".into()));
    }
    let (mut nll, mut count) = (0.0, 0);
    for s in batch {
        let (prompt, _) = sample_prompt(decoder, adapters, s)?;
        let (n, c) = decoder.sequence_nll(&prompt.embeddings, &prompt.target_ids, &prompt.loss_mask)?;
        nll += n;
        count += c;
    }
    Ok(nll / count as f64)
}

/// Central-difference check of [`batch_gradients`] over every trainable
/// adapter coordinate.
pub fn check_batch_gradients(
    decoder: &Decoder,
    adapters: &AdapterStack,
    batch: &[&Sample],
    h: f64,
) -> Result<GradCheckReport> {
    let params: Vec<Tensor> = adapters.trainable().into_iter().map(|(_, t)| t.clone()).collect();
    let mut obj = FnObjective {
        value: |p: &[Tensor]| batch_loss(decoder, &adapters.with_trainable(p)?, batch),
        gradient: |p: &[Tensor]| Ok(batch_gradients(decoder, &adapters.with_trainable(p)?, batch)?.grads),
    };
    grad_check(&mut obj, &params, h)
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Seeded sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &format!("shuffle/{epoch}")));
    idx
}

pub struct Trainer<'a> {
    decoder: &'a Decoder,
    pub state: Checkpoint,
    /// Pre-update loss of every step run by this trainer.
    pub step_losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(base: &'a ImageLlm, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adapters = AdapterStack::new(&base.g_z, &cfg);
        let shapes: Vec<Vec<usize>> = adapters.trainable().iter().map(|(_, t)| t.dims().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let optimizer = Adam::new(cfg.learning_rate, &shape_refs);
        Ok(Self {
            decoder: &base.decoder,
            state: Checkpoint {
                config: cfg,
                adapters,
                optimizer,
                step: 0,
                backbone_hash: base.backbone_hash(),
                epoch_losses: Vec::new(),
                epoch_loss_sum: 0.0,
            },
            step_losses: Vec::new(),
        })
    }

    /// Continues from a saved state; the backbone must be the one it was
    /// trained against.
    pub fn resume(base: &'a ImageLlm, state: Checkpoint) -> Result<Self> {
        let hash = base.backbone_hash();
        if state.backbone_hash != hash {
            return Err(VillmError::Manifest(format!(
                "checkpoint was trained on backbone {}, this backbone is {hash}",
                state.backbone_hash
            )));
        }
        Ok(Self {
            decoder: &base.decoder,
            state,
            step_losses: Vec::new(),
        })
    }

    pub fn adapters(&self) -> &AdapterStack {
        &self.state.adapters
    }

    /// One optimizer update on `batch`; returns the pre-update mean loss.
    pub fn training_step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let step = self.state.step;
        let g = match batch_gradients(self.decoder, &self.state.adapters, batch) {
            Ok(g) => g,
            Err(VillmError::NonFinite(what)) => return Err(self.diverged(step, &what, None)),
            Err(e) => return Err(e),
        };
        let loss = g.nll_sum;
        if !loss.is_finite() || g.grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(self.diverged(step, "loss or gradient", Some(&g)));
        }
        let mut params = self.state.adapters.trainable_mut();
        self.state.optimizer.step(&mut params, &g.grads)?;
        self.state.step += 1;
        self.step_losses.push(loss);
        Ok(loss)
    }

    fn diverged(&self, step: u64, what: &str, g: Option<&Gradients>) -> VillmError {
        let params: Vec<String> = self
            .state
            .adapters
            .trainable()
            .iter()
            .map(|(n, t)| format!("{n}={:.3e}", t.l2_norm()))
            .collect();
        let mut detail = format!("non-finite {what}; param norms [{}]", params.join(", "));
        if let Some(g) = g {
            let norms: Vec<String> = g.grads.iter().map(|t| format!("{:.3e}", t.l2_norm())).collect();
            detail.push_str(&format!(
                "; max |logit| {:.3e}; grad norms [{}]",
                g.max_abs_logit,
                norms.join(", ")
            ));
        }
        VillmError::Diverged { step, detail }
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        steps_per_epoch(n, self.state.config.batch_size) * self.state.config.epochs as u64
    }

    /// Runs up to `max_steps` further steps (all remaining when `None`).
    pub fn train_steps(&mut self, data: &[Sample], max_steps: Option<u64>) -> Result<()> {
        if data.is_empty() {
            return Err(VillmError::Dataset("training set is empty".into()));
        }
        let cfg = self.state.config.clone();
        let spe = steps_per_epoch(data.len(), cfg.batch_size);
        let total = self.total_steps(data.len());
        let stop = max_steps.map_or(total, |m| total.min(self.state.step + m));
        let mut order_epoch = None;
        let mut order = Vec::new();
        while self.state.step < stop {
            let epoch = self.state.step / spe;
            let b = (self.state.step % spe) as usize;
            if order_epoch != Some(epoch) {
                order = epoch_order(cfg.seed, epoch, data.len());
                order_epoch = Some(epoch);
            }
            let end = ((b + 1) * cfg.batch_size).min(data.len());
            let batch: Vec<&Sample> = order[b * cfg.batch_size..end].iter().map(|&i| &data[i]).collect();
            let loss = self.training_step(&batch)?;
            self.state.epoch_loss_sum += loss;
            if self.state.step % spe == 0 {
                let mean = self.state.epoch_loss_sum / spe as f64;
                log::info!("{} epoch {} loss {mean:.5}", cfg.variant, epoch + 1);
                self.state.epoch_losses.push(mean);
                self.state.epoch_loss_sum = 0.0;
            }
        }
        Ok(())
    }
}

/// Trains a fresh adapter stack on `data` for the configured epochs.
pub fn train(base: &ImageLlm, data: &[Sample], cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(base, cfg.clone())?;
    t.train_steps(data, None)?;
    Ok(t.state)
}
