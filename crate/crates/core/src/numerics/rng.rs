use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded counter-based generator (ChaCha8).
///
/// `split` derives an independent stream from a pair of labels, typically
/// `(image_index, timestep)`, without touching the parent's position.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far on this stream.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn split(&self, a: u64, b: u64) -> Rng {
        let s = splitmix64(self.stream ^ splitmix64(a.wrapping_add(splitmix64(b))));
        Self::with_stream(self.seed, s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.gen::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    /// I.i.d. standard normal samples.
    pub fn randn(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(7).randn(&[4, 5]);
        let b = Rng::new(7).randn(&[4, 5]);
        assert_eq!(a, b);
        assert_ne!(a, Rng::new(8).randn(&[4, 5]));
    }

    #[test]
    fn split_streams_are_independent_of_parent_position() {
        let mut parent = Rng::new(3);
        let before = parent.split(1, 2).randn(&[8]);
        parent.normal();
        let after = parent.split(1, 2).randn(&[8]);
        assert_eq!(before, after);
        assert_ne!(before, parent.split(2, 1).randn(&[8]));
    }

    #[test]
    fn million_samples_have_unit_moments() {
        let x = Rng::new(2024).randn(&[1_000_000]);
        let n = x.len() as f64;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
