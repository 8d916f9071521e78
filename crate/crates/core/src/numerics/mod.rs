//! Tensors, seeded randomness, UTNS files and the reverse-mode tape.

pub(crate) mod gemm;
pub mod io;
mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{ConvSpec, Gradients, Tape, Var};
pub use tensor::{quantile, Tensor};

#[cfg(test)]
mod props {
    use super::{quantile, Rng};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f32..20.0) {
            let x = Rng::new(seed).randn(&[rows, cols]).scale(spread).unwrap();
            let s = x.softmax_rows().unwrap();
            for row in s.data().chunks(cols) {
                let total: f32 = row.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6, "row sum {}", total);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(cols in 1usize..8, seed in any::<u64>(), shift in -50f32..50.0) {
            let x = Rng::new(seed).randn(&[1, cols]);
            let shifted = x.map(|v| v + shift).unwrap();
            let (a, b) = (x.softmax_rows().unwrap(), shifted.softmax_rows().unwrap());
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }

        #[test]
        fn quantile_median_of_odd_length_is_a_member(half in 0usize..20, seed in any::<u64>()) {
            let x = Rng::new(seed).randn(&[2 * half + 1]);
            let mut sorted = x.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            prop_assert_eq!(quantile(x.data(), 0.5).unwrap(), sorted[half]);
        }

        #[test]
        fn quantile_is_monotone_in_level(seed in any::<u64>(), q1 in 0f32..=1.0, q2 in 0f32..=1.0) {
            let x = Rng::new(seed).randn(&[17]);
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(quantile(x.data(), lo).unwrap() <= quantile(x.data(), hi).unwrap());
        }
    }
}
