//! Noise schedule, DDIM stepping and inversion, and guidance.

mod sampler;
mod schedule;

pub use sampler::{
    guided_prediction, invert, reconstruct, ConstantDenoiser, Direction, NoisePredictor,
    Prediction, SamplerConfig, StepRecord, Trajectory,
};
pub use schedule::{
    cfg_combine, clean_from_alpha, ddim_inversion_step, ddim_reverse_step, inversion_step_alpha,
    make_schedule, predict_clean, renoise, reverse_step_alpha, NoiseSchedule, ScheduleParams,
};

#[cfg(test)]
mod props {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inversion_and_reverse_steps_are_mutual_inverses(
            seed in any::<u64>(),
            ab_prev in 0.05f64..=1.0,
            ratio in 0.05f64..1.0,
        ) {
            let ab_t = ab_prev * ratio;
            let mut rng = Rng::new(seed);
            let z = rng.randn(&[3, 4, 4]);
            let eps = rng.randn(&[3, 4, 4]);

            let up = inversion_step_alpha(&z, &eps, ab_prev, ab_t).unwrap();
            let back = reverse_step_alpha(&up, &eps, ab_t, ab_prev).unwrap();
            prop_assert!(back.max_abs_diff(&z).unwrap() < 1e-5);

            let down = reverse_step_alpha(&z, &eps, ab_t, ab_prev).unwrap();
            let again = inversion_step_alpha(&down, &eps, ab_prev, ab_t).unwrap();
            prop_assert!(again.max_abs_diff(&z).unwrap() < 1e-5 * (ab_prev / ab_t).sqrt() as f32);
        }
    }
}
