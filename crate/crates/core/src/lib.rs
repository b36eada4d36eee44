pub mod accountant;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod autodiff;
pub mod diffusion;
pub mod dp;
pub mod error;
pub mod fid;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
