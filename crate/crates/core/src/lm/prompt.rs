//! `User: <video tokens><instruction> Assistant:<answer><EOS>` assembly.

use crate::error::{Result, VillmError};
use crate::tensor::Tensor;

use super::decoder::Decoder;
use super::tokenizer::{tokenize, EOS, PAD};

pub const USER_PREFIX: &str = "User: ";
pub const ASSISTANT_SUFFIX: &str = " Assistant:";

/// One embedded prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    /// `L×K`; video rows spliced in after the user prefix.
    pub embeddings: Tensor,
    /// Token id at each position, `PAD` on video rows.
    pub target_ids: Vec<usize>,
    /// True exactly on answer bytes and the closing EOS.
    pub loss_mask: Vec<bool>,
    /// First video row and number of video rows.
    pub video_start: usize,
    pub video_len: usize,
    pub inference_only: bool,
}

impl PromptBatch {
    pub fn len(&self) -> usize {
        self.target_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_ids.is_empty()
    }

    pub fn video_rows(&self) -> std::ops::Range<usize> {
        self.video_start..self.video_start + self.video_len
    }

    /// Token id embedded at `pos`, or `None` for a video row.
    pub fn input_id(&self, pos: usize) -> Option<usize> {
        (!self.video_rows().contains(&pos)).then(|| self.target_ids[pos])
    }
}

pub fn build_prompt(
    decoder: &Decoder,
    q_v: &Tensor,
    instruction: &str,
    answer: Option<&str>,
) -> Result<PromptBatch> {
    let (video_len, k) = q_v.shape2()?;
    if k != decoder.embed_dim() {
        return Err(VillmError::Shape {
            op: "build_prompt",
            lhs: q_v.dims().to_vec(),
            rhs: vec![video_len, decoder.embed_dim()],
        });
    }
    if instruction.is_empty() {
        return Err(VillmError::Config("instruction must not be empty".into()));
    }
    let prefix = tokenize(USER_PREFIX);
    let instr = tokenize(instruction);
    let suffix = tokenize(ASSISTANT_SUFFIX);
    let ans = answer.map(tokenize);
    let ans_len = ans.as_ref().map_or(0, |a| a.len() + 1);
    let total = prefix.len() + video_len + instr.len() + suffix.len() + ans_len;
    if total > decoder.max_seq_len() {
        let mut breakdown = format!(
            "prefix {} + video {} + instruction {} + suffix {}",
            prefix.len(),
            video_len,
            instr.len(),
            suffix.len()
        );
        if let Some(a) = &ans {
            breakdown.push_str(&format!(" + answer {} + eos 1", a.len()));
        }
        return Err(VillmError::Length {
            total,
            budget: decoder.max_seq_len(),
            breakdown,
        });
    }

    let mut target_ids = Vec::with_capacity(total);
    let mut loss_mask = Vec::with_capacity(total);
    let mut data = Vec::with_capacity(total * k);
    let mut push = |id: usize, supervised: bool, row: &[f64]| {
        target_ids.push(id);
        loss_mask.push(supervised);
        data.extend_from_slice(row);
    };
    for &id in prefix.iter() {
        push(id, false, decoder.token_embedding(id));
    }
    let video_start = prefix.len();
    for r in 0..video_len {
        push(PAD, false, q_v.row(r));
    }
    for &id in instr.iter().chain(&suffix) {
        push(id, false, decoder.token_embedding(id));
    }
    if let Some(a) = &ans {
        for &id in a.iter().chain([&EOS]) {
            push(id, true, decoder.token_embedding(id));
        }
    }
    Ok(PromptBatch {
        embeddings: Tensor::new(vec![total, k], data)?,
        target_ids,
        loss_mask,
        video_start,
        video_len,
        inference_only: answer.is_none(),
    })
}
