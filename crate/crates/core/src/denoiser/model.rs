//! Convolutional encoder-decoder noise predictor with two cross-attention
//! blocks (at half and quarter resolution).
//!
//! ```text
//! z ─ conv_in ─ res0 ───────────────────────────────┐ skip
//!               └ down1 ─ res1 ─ attn1 ─────────┐    │
//!                          └ down2 ─ res2 ─ attn2 ─ up2 (+) ─ res3 ─ up1 (+) ─ res4 ─ conv_out ─ ε
//! ```
//!
//! There are no normalization layers. Every residual block receives the time
//! embedding as a per-channel bias.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::prompt::{Prompt, PROMPT_LEN, VOCAB_SIZE};
use crate::attention::{cross_attention, AttentionMode, AttentionVars};
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{ConvSpec, Rng, Tape, Tensor, Var};
use crate::scheduler::{NoisePredictor, Prediction, ScheduleParams};

const SAME: ConvSpec = ConvSpec { stride: 1, pad: 1 };
const DOWN: ConvSpec = ConvSpec { stride: 2, pad: 1 };

/// Names of the layers whose cross-attention terms are captured, in order.
pub const ATTENTION_LAYERS: [&str; 2] = ["attn1", "attn2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    /// Prompt embedding width `d_c`.
    pub d_c: usize,
    /// Attention width `d`.
    pub attn_dim: usize,
    pub heads: usize,
    /// Sinusoidal feature count.
    pub time_dim: usize,
    pub temb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            widths: [32, 64, 128],
            d_c: 32,
            attn_dim: 64,
            heads: 1,
            time_dim: 32,
            temb_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(arg_err!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            ));
        }
        if self.widths.contains(&0) || self.channels == 0 || self.d_c == 0 || self.temb_dim == 0 {
            return Err(arg_err!("model widths must be positive"));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(arg_err!(
                "time feature count {} must be even and positive",
                self.time_dim
            ));
        }
        if self.heads == 0 || !self.attn_dim.is_multiple_of(self.heads) {
            return Err(arg_err!(
                "{} heads do not divide attention width {}",
                self.heads,
                self.attn_dim
            ));
        }
        Ok(())
    }

    /// `(name, shape, init scale)` for every parameter, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, f32)> {
        let [w0, w1, w2] = self.widths;
        let (dc, d, te) = (self.d_c, self.attn_dim, self.temb_dim);
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
            let scale = if fan_in == 0 {
                0.0
            } else {
                1.0 / (fan_in as f32).sqrt()
            };
            out.push((name, shape, scale));
        };
        push("tok_emb".into(), vec![VOCAB_SIZE, dc], 1);
        push("slot_emb".into(), vec![PROMPT_LEN, dc], 4);
        push("time.w1".into(), vec![self.time_dim, te], self.time_dim);
        push("time.b1".into(), vec![te], 0);
        push("time.w2".into(), vec![te, te], te);
        push("time.b2".into(), vec![te], 0);
        let conv =
            |push: &mut dyn FnMut(String, Vec<usize>, usize), name: &str, o: usize, c: usize| {
                push(format!("{name}.w"), vec![o, c, 3, 3], c * 9);
                push(format!("{name}.b"), vec![o], 0);
            };
        conv(&mut push, "conv_in", w0, self.channels);
        for (name, c) in [
            ("res0", w0),
            ("res1", w1),
            ("res2", w2),
            ("res3", w1),
            ("res4", w0),
        ] {
            conv(&mut push, &format!("{name}.conv1"), c, c);
            push(format!("{name}.temb.w"), vec![te, c], te);
            push(format!("{name}.temb.b"), vec![c], 0);
            conv(&mut push, &format!("{name}.conv2"), c, c);
            if name == "res0" {
                conv(&mut push, "down1", w1, w0);
            } else if name == "res1" {
                conv(&mut push, "down2", w2, w1);
            }
        }
        for (name, dx) in [("attn1", w1), ("attn2", w2)] {
            push(format!("{name}.q"), vec![dx, d], dx);
            push(format!("{name}.k"), vec![dc, d], dc);
            push(format!("{name}.v"), vec![dc, d], dc);
            push(format!("{name}.o"), vec![d, dx], d);
        }
        conv(&mut push, "up2", w1, w2);
        conv(&mut push, "up1", w0, w1);
        conv(&mut push, "conv_out", self.channels, w0);
        out
    }
}

/// The noise predictor `ε(z_t, t, c)`. Weights are immutable during
/// inference, so one model can serve concurrent forward passes.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: ModelConfig,
    schedule: ScheduleParams,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

/// Sinusoidal timestep features, `[B, dim]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        data.extend(angles.iter().map(|a| a.sin() as f32));
        data.extend(angles.iter().map(|a| a.cos() as f32));
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

impl DenoiserModel {
    /// Randomly initialised model; weights scaled by `1/√fan_in`, biases zero.
    pub fn new(config: ModelConfig, schedule: ScheduleParams, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, scale) in layout {
            let t = if scale == 0.0 {
                Tensor::zeros(&shape)
            } else {
                rng.randn(&shape).scale(scale)?
            };
            names.push(name);
            params.push(Arc::new(t));
        }
        Self::from_params(config, schedule, names.into_iter().zip(params).collect())
    }

    /// Assemble a model from named tensors; every expected name must be
    /// present with the expected shape.
    pub fn from_params(
        config: ModelConfig,
        schedule: ScheduleParams,
        named: Vec<(String, Arc<Tensor>)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut given: HashMap<String, Arc<Tensor>> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, _) in config.layout() {
            let t = given
                .remove(&name)
                .ok_or_else(|| arg_err!("missing parameter {name}"))?;
            if t.shape() != shape {
                return Err(dim_err!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
            names.push(name);
            params.push(t);
        }
        if let Some(extra) = given.keys().next() {
            return Err(arg_err!("unexpected parameter {extra}"));
        }
        let index = names
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        Ok(Self {
            config,
            schedule,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> ScheduleParams {
        self.schedule
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &*self.params[i])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| arg_err!("no parameter named {name}"))?;
        if value.shape() != self.params[i].shape() {
            return Err(dim_err!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].shape(),
                value.shape()
            ));
        }
        self.params[i] = Arc::new(value);
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Noise prediction for a batch `z: [B, C, S, S]` with per-sample
    /// timesteps and prompts, plus the `A` term of each attention layer.
    pub fn forward(
        &self,
        z: &Tensor,
        t: &[usize],
        prompts: &[Prompt],
        mode: AttentionMode,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant_shared(p.clone()))
            .collect();
        let z = tape.constant(z.clone());
        let (eps, attn) = self.graph(&mut tape, &vars, z, t, prompts, mode)?;
        Ok(Prediction {
            eps: tape.value(eps).clone(),
            attn: attn.iter().map(|&a| tape.value(a).clone()).collect(),
        })
    }

    /// Record the network on `tape`, with `vars[i]` standing for parameter `i`.
    /// Returns `ε` and the captured attention terms.
    pub(crate) fn graph(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        t: &[usize],
        prompts: &[Prompt],
        mode: AttentionMode,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let s = cfg.image_size;
        let zs = tape.shape(z).to_vec();
        if zs.len() != 4 || zs[1..] != [cfg.channels, s, s] {
            return Err(dim_err!(
                "latent must be [B, {}, {s}, {s}], got {zs:?}",
                cfg.channels
            ));
        }
        let b = zs[0];
        if t.len() != b || prompts.len() != b {
            return Err(dim_err!(
                "{b} latents with {} timesteps and {} prompts",
                t.len(),
                prompts.len()
            ));
        }
        let t_max = self.schedule.train_steps;
        if let Some(bad) = t.iter().find(|&&step| step > t_max) {
            return Err(arg_err!("timestep {bad} outside 0..={t_max}"));
        }
        let p = |name: &str| vars[self.index[name]];

        let ids: Vec<usize> = prompts
            .iter()
            .flat_map(|pr| pr.tokens().iter().copied())
            .collect();
        let slots: Vec<usize> = (0..ids.len()).map(|i| i % PROMPT_LEN).collect();
        let tok = tape.gather(p("tok_emb"), &ids)?;
        let pos = tape.gather(p("slot_emb"), &slots)?;
        let c = tape.add(tok, pos)?;
        let c = tape.reshape(c, &[b, PROMPT_LEN, cfg.d_c])?;

        let feats = tape.constant(timestep_features(t, cfg.time_dim));
        let e = tape.matmul(feats, p("time.w1"))?;
        let e = tape.add_bias(e, p("time.b1"))?;
        let e = tape.silu(e)?;
        let e = tape.matmul(e, p("time.w2"))?;
        let e = tape.add_bias(e, p("time.b2"))?;
        let temb = tape.silu(e)?;

        let conv = |tape: &mut Tape, x: Var, name: &str, spec: ConvSpec| -> Result<Var> {
            tape.conv2d(
                x,
                p(&format!("{name}.w")),
                Some(p(&format!("{name}.b"))),
                spec,
            )
        };
        let res = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let a = tape.silu(x)?;
            let a = conv(tape, a, &format!("{name}.conv1"), SAME)?;
            let tb = tape.matmul(temb, p(&format!("{name}.temb.w")))?;
            let tb = tape.add_bias(tb, p(&format!("{name}.temb.b")))?;
            let a = tape.add_channel(a, tb)?;
            let a = tape.silu(a)?;
            let a = conv(tape, a, &format!("{name}.conv2"), SAME)?;
            tape.add(x, a)
        };
        let mut captured = Vec::with_capacity(ATTENTION_LAYERS.len());
        let mut attend = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let &[_, ch, h, w] = tape.shape(x) else {
                unreachable!()
            };
            let tokens = tape.reshape(x, &[b, ch, h * w])?;
            let tokens = tape.permute(tokens, &[0, 2, 1])?;
            let weights = AttentionVars {
                q: p(&format!("{name}.q")),
                k: p(&format!("{name}.k")),
                v: p(&format!("{name}.v")),
                o: p(&format!("{name}.o")),
            };
            let nodes = cross_attention(tape, tokens, c, weights, cfg.heads, mode)?;
            captured.push(nodes.update);
            let out = tape.permute(nodes.x_tilde, &[0, 2, 1])?;
            tape.reshape(out, &[b, ch, h, w])
        };

        let h0 = conv(tape, z, "conv_in", SAME)?;
        let h0 = res(tape, h0, "res0")?;
        let h1 = tape.silu(h0)?;
        let h1 = conv(tape, h1, "down1", DOWN)?;
        let h1 = res(tape, h1, "res1")?;
        let h1 = attend(tape, h1, "attn1")?;
        let h2 = tape.silu(h1)?;
        let h2 = conv(tape, h2, "down2", DOWN)?;
        let h2 = res(tape, h2, "res2")?;
        let h2 = attend(tape, h2, "attn2")?;

        let u = tape.silu(h2)?;
        let u = tape.upsample2x(u)?;
        let u = conv(tape, u, "up2", SAME)?;
        let u = tape.add(u, h1)?;
        let u = res(tape, u, "res3")?;
        let u = tape.silu(u)?;
        let u = tape.upsample2x(u)?;
        let u = conv(tape, u, "up1", SAME)?;
        let u = tape.add(u, h0)?;
        let u = res(tape, u, "res4")?;
        let u = tape.silu(u)?;
        let eps = conv(tape, u, "conv_out", SAME)?;
        Ok((eps, captured))
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict(
        &self,
        z: &Tensor,
        t: usize,
        prompts: &[Prompt],
        mode: AttentionMode,
    ) -> Result<Prediction> {
        let b = z.shape().first().copied().unwrap_or(0);
        self.forward(z, &vec![t; b], prompts, mode)
    }
}
