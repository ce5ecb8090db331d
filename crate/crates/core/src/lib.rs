//! A Vision Transformer image classifier with interchangeable heads
//! (dense softmax or squared-hinge SVM), built on a small reverse-mode
//! autodiff engine and trained with Adam on the CPU.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, AnyCheckpoint, Checkpoint};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{cmd_eval, cmd_predict, PredictOutput};
pub use heads::{ClassifierHead, HeadRegistry, LossMode};
pub use metrics::{render_report, EvalReport};
pub use model::{Model, ModelSpec};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{cmd_train, EpochLog, TrainOutcome};
pub use vit::VitConfig;
