pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
mod linalg;
pub mod optim;
pub mod params;
pub mod pca;
pub mod pnm;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
