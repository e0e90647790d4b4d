//! Sketched equivariant imaging: measurement operators, sketches, a small
//! U-Net with hand-written backprop, and the training loops tying them together.

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod groupact;
pub mod image;
pub mod linops;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod scalar;
pub mod sketch;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use image::{Image, ImageShape};
pub use num_complex;
pub use scalar::Real;

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
