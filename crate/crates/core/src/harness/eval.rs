use crate::error::{Result, VillmError};
use crate::lm::{generate, Decoder};
use crate::tuning::{AdapterStack, Sample};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub task: String,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
    pub config: String,
    pub predictions: Vec<String>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "variant,task,accuracy,correct,n";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.4},{},{}", self.variant, self.task, self.accuracy, self.correct, self.n)
    }

    pub fn to_csv(&self) -> String {
        format!("# config: {}\n{}\n{}\n", self.config, Self::CSV_HEADER, self.csv_row())
    }
}

/// Lowercased and trimmed.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Exact-match count of `predictions` against `answers` after normalization.
pub fn score(predictions: &[String], answers: &[&str]) -> usize {
    predictions
        .iter()
        .zip(answers)
        .filter(|(p, a)| normalize_answer(p) == normalize_answer(a))
        .count()
}

/// Greedy answers for every sample, scored by exact match.
pub fn evaluate(
    decoder: &Decoder,
    adapters: &AdapterStack,
    samples: &[Sample],
    task: &str,
    config: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(VillmError::Dataset("evaluation set is empty".into()));
    }
    let predictions = samples
        .iter()
        .map(|s| {
            let (q_v, _) = adapters.forward(&s.features)?;
            generate(decoder, &q_v, &s.instruction, DEFAULT_MAX_NEW_TOKENS)
        })
        .collect::<Result<Vec<_>>>()?;
    let answers: Vec<&str> = samples.iter().map(|s| s.answer.as_str()).collect();
    let correct = score(&predictions, &answers);
    Ok(EvalReport {
        variant: adapters.variant.to_string(),
        task: task.to_string(),
        correct,
        n: samples.len(),
        accuracy: correct as f64 / samples.len() as f64,
        config: config.to_string(),
        predictions,
    })
}
