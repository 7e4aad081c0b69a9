//! Configuration, training, evaluation, experiments and inspection dumps.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod dump;
pub mod eval;
pub mod experiments;
pub mod train;

pub use checkpoint::{load_baseline, load_cft, save_checkpoint, ModelKind};
pub use config::RunConfig;
pub use detector::{BaselineDetector, CftDetector};
pub use eval::{evaluate_baseline, evaluate_cft, Evaluation};
pub use experiments::{exp_embedding, exp_noise, exp_windows, summarize, write_records, ResultRow, Summary};
pub use train::{train_baseline, train_cft, EpochLog, Trained};
