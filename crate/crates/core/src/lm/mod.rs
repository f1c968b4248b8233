//! Byte tokenizer, frozen causal decoder, prompt template and greedy
//! decoding.

pub mod decoder;
pub mod prompt;
pub mod tokenizer;

pub use decoder::{Decoder, DecoderConfig};
pub use prompt::{build_prompt, PromptBatch, ASSISTANT_SUFFIX, USER_PREFIX};

use crate::error::{Result, VillmError};
use crate::tensor::Tensor;

/// Greedy decoding from the inference prompt until EOS, `max_new_tokens`,
/// or the length budget. Ties go to the lowest token id.
pub fn generate(decoder: &Decoder, q_v: &Tensor, instruction: &str, max_new_tokens: usize) -> Result<String> {
    Ok(tokenizer::detokenize(&generate_ids(decoder, q_v, instruction, max_new_tokens)?))
}

/// As [`generate`], returning the emitted ids without the closing EOS.
pub fn generate_ids(decoder: &Decoder, q_v: &Tensor, instruction: &str, max_new_tokens: usize) -> Result<Vec<usize>> {
    if max_new_tokens == 0 {
        return Err(VillmError::Config("max_new_tokens must be at least 1".into()));
    }
    let prompt = build_prompt(decoder, q_v, instruction, None)?;
    let k = decoder.embed_dim();
    let mut rows = prompt.embeddings.into_data();
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let len = rows.len() / k;
        if len > decoder.max_seq_len() {
            break;
        }
        let logits = decoder.last_logits(&Tensor::new(vec![len, k], rows.clone())?)?;
        let next = argmax(&logits);
        if next == tokenizer::EOS {
            break;
        }
        out.push(next);
        rows.extend_from_slice(decoder.token_embedding(next));
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
