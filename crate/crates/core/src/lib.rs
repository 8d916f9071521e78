pub mod attention;
pub mod denoiser;
pub mod editing;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod scheduler;

pub use attention::AttentionMode;
pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
