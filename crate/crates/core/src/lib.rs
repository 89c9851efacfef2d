//! Multi-exit transformer classifiers trained by self-distillation and served
//! with budgeted anytime inference.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exits;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ExitId, ModelConfig, MultiExitModel};
pub use tensor::{Scalar, Tensor};
