pub mod activations;
pub mod attention;
pub mod certify;
pub mod config;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor};
