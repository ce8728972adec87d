pub mod audio;
pub mod autodiff;
pub(crate) mod binio;
pub mod codec;
pub mod config;
pub mod error;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod vred;

pub use error::{Result, VredError};
pub use model::{Checkpoint, Model};
pub use tensor::Tensor;
