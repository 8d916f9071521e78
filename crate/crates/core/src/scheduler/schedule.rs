use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-β schedule with cumulative products `ᾱ_t` for `t = 0..=T` and an
/// evenly spaced DDIM subsequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
    /// Strictly increasing, ending at `T`; the step before the first is 0.
    timesteps: Vec<usize>,
}

pub fn make_schedule(params: ScheduleParams, ddim_steps: usize) -> Result<NoiseSchedule> {
    let t_max = params.train_steps;
    if t_max == 0 {
        return Err(arg_err!("schedule needs at least one diffusion step"));
    }
    if ddim_steps == 0 || ddim_steps > t_max {
        return Err(arg_err!("ddim_steps {ddim_steps} outside 1..={t_max}"));
    }
    let (b0, b1) = (params.beta_start, params.beta_end);
    if !(b0 > 0.0 && b1 >= b0 && b1 < 1.0) {
        return Err(arg_err!(
            "beta range [{b0}, {b1}] must satisfy 0 < start <= end < 1"
        ));
    }
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0f64;
    for s in 1..=t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            (s - 1) as f64 / (t_max - 1) as f64
        };
        acc *= 1.0 - (b0 + (b1 - b0) * frac);
        alpha_bar.push(acc);
    }
    let timesteps = (1..=ddim_steps).map(|k| k * t_max / ddim_steps).collect();
    Ok(NoiseSchedule {
        params,
        alpha_bar,
        timesteps,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn train_steps(&self) -> usize {
        self.params.train_steps
    }

    pub fn ddim_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| arg_err!("timestep {t} outside 0..={}", self.params.train_steps))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// The DDIM subsequence in increasing order.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `(t_prev, t)` pairs in inversion order (increasing `t`).
    pub fn inversion_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(k, &t)| (if k == 0 { 0 } else { self.timesteps[k - 1] }, t))
    }

    /// `(t, t_prev)` pairs in sampling order (decreasing `t`).
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let pairs: Vec<_> = self.inversion_pairs().map(|(p, t)| (t, p)).collect();
        pairs.into_iter().rev()
    }

    /// The same schedule with a different DDIM step count.
    pub fn with_ddim_steps(&self, ddim_steps: usize) -> Result<NoiseSchedule> {
        make_schedule(self.params, ddim_steps)
    }
}

fn check_alpha(ab: f64) -> Result<()> {
    if ab > 0.0 && ab <= 1.0 {
        Ok(())
    } else {
        Err(arg_err!("cumulative alpha {ab} outside (0, 1]"))
    }
}

/// `(z − √(1−ᾱ)·ε)/√ᾱ` for an explicit `ᾱ ∈ (0, 1]`.
pub fn clean_from_alpha(z: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    check_alpha(ab)?;
    let inv = 1.0 / ab.sqrt();
    z.lincomb_f64(inv, eps, -(1.0 - ab).sqrt() * inv)
}

/// `√ᾱ·ẑ₀ + √(1−ᾱ)·ε`: the common final form of every DDIM update here.
pub fn renoise(z0_hat: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    check_alpha(ab)?;
    z0_hat.lincomb_f64(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

pub fn reverse_step_alpha(z_t: &Tensor, eps: &Tensor, ab_t: f64, ab_prev: f64) -> Result<Tensor> {
    renoise(&clean_from_alpha(z_t, eps, ab_t)?, eps, ab_prev)
}

pub fn inversion_step_alpha(
    z_prev: &Tensor,
    eps: &Tensor,
    ab_prev: f64,
    ab_t: f64,
) -> Result<Tensor> {
    renoise(&clean_from_alpha(z_prev, eps, ab_prev)?, eps, ab_t)
}

/// Predicted clean sample `ẑ₀,t`.
pub fn predict_clean(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t == 0 {
        return Err(arg_err!("clean prediction needs t > 0"));
    }
    clean_from_alpha(z_t, eps, sched.alpha_bar(t)?)
}

/// One deterministic DDIM step from `t` down to `t_prev`.
pub fn ddim_reverse_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(arg_err!(
            "reverse step needs t > t_prev, got {t} -> {t_prev}"
        ));
    }
    renoise(
        &predict_clean(z_t, eps, t, sched)?,
        eps,
        sched.alpha_bar(t_prev)?,
    )
}

/// One DDIM inversion step from `t_prev` up to `t`, reusing the noise
/// estimate made at `t_prev`.
pub fn ddim_inversion_step(
    z_prev: &Tensor,
    eps_at_prev: &Tensor,
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(arg_err!(
            "inversion step needs t > t_prev, got {t_prev} -> {t}"
        ));
    }
    inversion_step_alpha(
        z_prev,
        eps_at_prev,
        sched.alpha_bar(t_prev)?,
        sched.alpha_bar(t)?,
    )
}

/// Classifier-free guidance: `ε_u + w·(ε_c − ε_u)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f32) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(crate::error::dim_err!(
            "guidance inputs differ in shape: {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        ));
    }
    let diff = eps_cond.sub(eps_uncond)?;
    eps_uncond.lincomb(1.0, &diff, w)
}
