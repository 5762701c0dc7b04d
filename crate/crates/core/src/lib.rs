pub mod alloc;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, IndexMatrix, Tape, Var};
pub use error::{Error, Result};
pub use model::{Architecture, Mode, Model, ModelConfig, Readout};
pub use parallel::Execution;
pub use real::{DType, Real};
pub use rng::Rng;
pub use tensor::Tensor;
