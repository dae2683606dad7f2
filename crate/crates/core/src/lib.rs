//! Ample-focal two-branch networks for efficient video recognition.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod gradcheck;
pub mod layers;
pub mod navigation;
pub mod stage;
pub mod model;
pub mod training;
pub mod analysis;
pub mod config;
pub mod checkpoint;
pub mod runner;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{DType, Element, Tensor};
