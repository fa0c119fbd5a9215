//! Data pipeline, two-stage training, evaluation protocols and the gradient
//! check suite.

pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod optim;
pub mod train;

pub use data::{make_blind_set, Augment, DatasetManifest, ManifestRecord, QfPolicy, TrainData};
pub use eval::{evaluate, CodecSettings, EvalMode, EvalReport, Restorer};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use train::{init_stage, train, RunConfig, Scale, TrainConfig, TrainReport, TrainState};
