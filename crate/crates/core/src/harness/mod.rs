//! Synthetic video QA, exact-match evaluation and ablation sweeps.

pub mod eval;
pub mod sweep;
pub mod synthetic;

pub use eval::{evaluate, normalize_answer, EvalReport};
pub use sweep::{ablation_sweep, SweepAxis, SweepConfig, SweepResult, SweepRow};
pub use synthetic::{gen_synthetic_dataset, generate_examples, SyntheticExample, SyntheticTask, TaskKind};
