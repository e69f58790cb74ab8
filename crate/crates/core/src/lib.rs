//! Multi-query, multi-mask referring image segmentation on a small
//! reverse-mode tensor engine.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod query;
pub mod synth;
pub mod train;
pub mod vocab;

pub use config::{IouAgg, ModelConfig, SynthConfig, TrainConfig, Upsample};
pub use error::{Error, Result};
pub use mask::MaskBundle;
pub use metrics::{EvalReport, Precision};
pub use model::{Forward, MmNet, Prediction};
pub use numerics::{DType, Gradients, Graph, Scalar, Tensor, Var};
pub use params::{ParamId, ParamStore};
pub use synth::{Sample, Split};
pub use train::{train, EpochLog, Event, StepLog, TrainOutcome};
pub use vocab::Vocab;
