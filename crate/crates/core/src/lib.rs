pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod layers;
pub mod metrics;
pub mod nsunet;
pub mod objective;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
