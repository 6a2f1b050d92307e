//! Configuration, training loops, evaluation and the command-line front end.

pub mod ar_train;
pub mod cli;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod step;
pub mod train;

pub use config::{ArTrainConfig, OptimConfig, RunConfig, TeacherSpec};
pub use eval::{evaluate, psnr, swap_report, EvalReport, SwapReport};
pub use metrics::{MetricsLog, MetricsRow};
pub use optim::{lr_at, Adam};
pub use step::{build_step, StepGraph, StepInput};
pub use train::{load_tokenizer, train_tokenizer, TokenizerTrainer, TrainOptions, TrainOutcome};
pub use ar_train::{load_ar, save_ar, train_ar, train_ar_on, ArTrainOptions, ArTrainOutcome};
