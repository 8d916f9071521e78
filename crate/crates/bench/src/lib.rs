//! Fixed inputs shared by the benchmarks.

use unimap_core::denoiser::{DenoiserModel, ModelConfig, Prompt};
use unimap_core::scheduler::ScheduleParams;
use unimap_core::{Rng, Tensor};

pub const SEED: u64 = 7;

/// The reduced model used for desk-scale training.
pub fn small_model() -> DenoiserModel {
    let config = ModelConfig {
        widths: [16, 32, 64],
        ..ModelConfig::default()
    };
    DenoiserModel::new(config, ScheduleParams::default(), &mut Rng::new(SEED))
        .expect("valid config")
}

pub fn latents(batch: usize) -> Tensor {
    Rng::new(SEED + 1).randn(&[batch, 3, 32, 32])
}

pub fn prompts(batch: usize) -> Vec<Prompt> {
    vec![Prompt::null(); batch]
}
