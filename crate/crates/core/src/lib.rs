//! Latent image-to-video engine: hybrid linear/softmax attention denoiser,
//! rectified-flow sampling with first-frame conditioning, and timestep
//! distillation losses.

pub mod attention;
pub mod contract;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod flow;
pub mod io;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{random_normal, Rng};
pub use tensor::{Layout, Tensor};
