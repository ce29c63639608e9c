pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod optim;
pub mod task_stream;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
