//! ε-prediction training with Adam.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dataset::{image_to_latent, random_sample, Sample};
use super::model::DenoiserModel;
use super::prompt::Prompt;
use crate::attention::AttentionMode;
use crate::error::{arg_err, Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::scheduler::NoiseSchedule;

const TRAIN_STREAM: u64 = 0x7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Probability that a training prompt is replaced by the null prompt.
    pub null_prob: f32,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Decay of the parameter moving average that replaces the trained
    /// weights at the end; `None` keeps the last iterate.
    pub ema_decay: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            null_prob: 0.1,
            grad_clip: Some(1.0),
            ema_decay: Some(0.999),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(arg_err!("training needs at least one step"));
        }
        if self.batch_size == 0 {
            return Err(arg_err!("batch size must be positive"));
        }
        if !self.learning_rate.is_finite()
            || self.learning_rate <= 0.0
            || !(0.0..=1.0).contains(&self.null_prob)
        {
            return Err(arg_err!(
                "learning rate must be positive and null_prob in [0, 1]"
            ));
        }
        if let Some(d) = self.ema_decay.filter(|d| !(0.0..1.0).contains(d)) {
            return Err(arg_err!("EMA decay {d} outside [0, 1)"));
        }
        Ok(())
    }
}

/// Adam state, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(
        sizes: impl IntoIterator<Item = usize>,
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    ) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = Arc::make_mut(p).data_mut();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Exponential moving average of the parameters. The effective decay is
/// `min(decay, (1 + n) / (10 + n))` after `n` updates.
#[derive(Clone, Debug)]
pub struct Ema {
    decay: f32,
    updates: usize,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &[Arc<Tensor>], decay: f32) -> Self {
        Self {
            decay,
            updates: 0,
            shadow: params.iter().map(|p| (**p).clone()).collect(),
        }
    }

    pub fn update(&mut self, params: &[Arc<Tensor>]) {
        let n = self.updates as f32;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        self.updates += 1;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.shadow
    }
}

/// One training minibatch: clean latents, timesteps, noise and prompts.
#[derive(Clone, Debug)]
pub struct Batch {
    pub z0: Tensor,
    pub t: Vec<usize>,
    pub noise: Tensor,
    pub prompts: Vec<Prompt>,
}

impl Batch {
    /// Fresh shapes for `step`, drawn from a stream that depends only on
    /// `(rng, step)`.
    pub fn draw(
        rng: &Rng,
        step: usize,
        cfg: &TrainConfig,
        sched: &NoiseSchedule,
        image_size: usize,
    ) -> Result<Batch> {
        let mut r = rng.split(step as u64, TRAIN_STREAM);
        let samples: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| random_sample(&mut r, image_size))
            .collect();
        let images: Vec<Tensor> = samples
            .iter()
            .map(|s| image_to_latent(&s.image))
            .collect::<Result<_>>()?;
        let prompts = samples
            .iter()
            .map(|s| {
                if r.uniform() < cfg.null_prob {
                    Prompt::null()
                } else {
                    s.prompt
                }
            })
            .collect();
        let t = (0..cfg.batch_size)
            .map(|_| 1 + r.below(sched.train_steps()))
            .collect();
        let noise = r.randn(&[cfg.batch_size, images[0].shape()[0], image_size, image_size]);
        Ok(Batch {
            z0: Tensor::stack(&images)?,
            t,
            noise,
            prompts,
        })
    }

    /// `√ᾱ_t·z₀ + √(1−ᾱ_t)·ε` per sample.
    pub fn noised(&self, sched: &NoiseSchedule) -> Result<Tensor> {
        let parts = self
            .z0
            .unstack()
            .iter()
            .zip(self.noise.unstack())
            .zip(&self.t)
            .map(|((z, e), &t)| {
                let ab = sched.alpha_bar(t)?;
                z.lincomb(ab.sqrt() as f32, &e, (1.0 - ab).sqrt() as f32)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }
}

/// Mean squared ε error and its gradient with respect to every parameter.
pub fn loss_and_grads(
    model: &DenoiserModel,
    batch: &Batch,
    sched: &NoiseSchedule,
) -> Result<(f32, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model
        .params()
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect();
    let loss = loss_graph(model, &mut tape, &vars, batch, sched)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

pub(crate) fn loss_graph(
    model: &DenoiserModel,
    tape: &mut Tape,
    vars: &[Var],
    batch: &Batch,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let z_t = tape.constant(batch.noised(sched)?);
    let (eps, _) = model.graph(
        tape,
        vars,
        z_t,
        &batch.t,
        &batch.prompts,
        AttentionMode::Standard,
    )?;
    let target = tape.constant(batch.noise.clone());
    let diff = tape.sub(eps, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Train in place for `cfg.steps` steps; returns the loss of every step.
/// `on_step(step, loss)` is called after each update. With `ema_decay` set
/// the model ends up holding the averaged weights.
pub fn train(
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &Rng,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let mut adam = Adam::new(
        model.params().iter().map(|p| p.len()),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut ema = cfg.ema_decay.map(|d| Ema::new(model.params(), d));
    let size = model.config().image_size;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = Batch::draw(rng, step, cfg, sched, size)?;
        let (loss, mut grads) = match loss_and_grads(model, &batch, sched) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Training {
                    step,
                    loss: f32::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        if let Some(limit) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt() as f32;
            if norm > limit {
                grads = grads
                    .iter()
                    .map(|g| g.scale(limit / norm))
                    .collect::<Result<_>>()?;
            }
        }
        adam.step(model.params_mut(), &grads);
        if let Some(ema) = &mut ema {
            ema.update(model.params());
        }
        losses.push(loss);
        on_step(step, loss);
    }
    if let Some(ema) = ema {
        for (p, s) in model.params_mut().iter_mut().zip(ema.into_params()) {
            *p = Arc::new(s);
        }
    }
    Ok(losses)
}
