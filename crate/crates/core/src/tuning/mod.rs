//! Instruction tuning of the adapters against a frozen backbone.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{TrainConfig, Variant};
pub use data::{load_samples, read_jsonl, write_jsonl, InstructionRecord, Sample};
pub use model::AdapterStack;
pub use optim::Adam;
pub use trainer::{batch_gradients, batch_loss, check_batch_gradients, train, Trainer};
