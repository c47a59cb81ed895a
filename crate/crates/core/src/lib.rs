//! Pixel- and frequency-domain l∞ adversarial attacks, adversarial training
//! and the numerical checks that tie the two domains together.
//!
//! The building blocks are a small reverse-mode autodiff engine
//! ([`autodiff`]), an orthonormal 2-D DCT ([`spectral`]), a sequential CNN
//! ([`model`]) and the attack family in [`attacks`].

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod model;
pub mod range;
pub mod report;
pub mod seed;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Architecture, Model};
pub use range::ValueRange;
pub use tensor::Tensor;
