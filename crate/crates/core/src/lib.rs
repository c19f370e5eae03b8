//! Ternary-weight network training where both the weights and the per-layer
//! ternarization thresholds are learned by back-propagation.

pub mod autograd;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod inspect;
mod linalg;
pub mod model_io;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod ternarizer;
pub mod trainer;

pub use autograd::{register_custom_grad, CustomGradCtx, CustomOp, Tape, Var};
pub use data::Dataset;
pub use error::{Error, Result};
pub use model_io::{Checkpoint, PackedModel};
pub use network::{Architecture, ForwardMode, Model};
pub use optim::OptimizerConfig;
pub use tensor::Tensor;
pub use ternarizer::{QuantPhase, QuantizerState, TernaryCodes};
pub use trainer::{TrainConfig, TrainState};
