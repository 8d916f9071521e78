//! Exact posterior-mean denoiser for an empirical distribution of images.

use super::prompt::Prompt;
use crate::attention::AttentionMode;
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::Tensor;
use crate::scheduler::{NoisePredictor, NoiseSchedule, Prediction};

/// `ε*(z_t, t) = (z_t − √ᾱ_t·x̂₀)/√(1−ᾱ_t)`, where `x̂₀` is the softmax-weighted
/// mean of the stored points with logits `−‖z_t − √ᾱ_t·x_i‖² / (2(1−ᾱ_t))`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    points: Vec<Tensor>,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(points: Vec<Tensor>, schedule: NoiseSchedule) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(arg_err!("oracle needs at least one data point"));
        };
        if points.iter().any(|p| p.shape() != first.shape()) {
            return Err(dim_err!("oracle data points differ in shape"));
        }
        Ok(Self { points, schedule })
    }

    pub fn points(&self) -> &[Tensor] {
        &self.points
    }

    /// Posterior weights over the stored points for one latent.
    pub fn weights(&self, z: &Tensor, t: usize) -> Result<Vec<f64>> {
        if z.shape() != self.points[0].shape() {
            return Err(dim_err!(
                "latent {:?} vs data {:?}",
                z.shape(),
                self.points[0].shape()
            ));
        }
        if t == 0 {
            return Err(arg_err!("oracle noise is undefined at t = 0"));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (sa, var) = (ab.sqrt(), 1.0 - ab);
        let logits: Vec<f64> = self
            .points
            .iter()
            .map(|x| {
                let d2: f64 = z
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&zv, &xv)| (zv as f64 - sa * xv as f64).powi(2))
                    .sum();
                -d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        Ok(exp.into_iter().map(|e| e / total).collect())
    }

    /// Noise estimate for one latent shaped like the data points.
    pub fn eps(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        let w = self.weights(z, t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let mut mean = vec![0.0f64; z.len()];
        for (wi, x) in w.iter().zip(&self.points) {
            for (m, &v) in mean.iter_mut().zip(x.data()) {
                *m += wi * v as f64;
            }
        }
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z
            .data()
            .iter()
            .zip(&mean)
            .map(|(&zv, &m)| ((zv as f64 - sa * m) / s1) as f32)
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }
}

impl NoisePredictor for OracleDenoiser {
    fn predict(
        &self,
        z: &Tensor,
        t: usize,
        _prompts: &[Prompt],
        _mode: AttentionMode,
    ) -> Result<Prediction> {
        let eps = z
            .unstack()
            .iter()
            .map(|zi| self.eps(zi, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction {
            eps: Tensor::stack(&eps)?,
            attn: Vec::new(),
        })
    }
}
