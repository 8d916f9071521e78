//! Text-conditioned cross-attention with switchable score maps.
//!
//! For visual tokens `x: [M, d_x]` and prompt embeddings `c: [N, d_c]`:
//!
//! ```text
//! Q = x·W_q   K = c·W_k   V = c·W_v
//! S = softmax(Q·Kᵀ / √d)       (Standard)
//!   = 1/N everywhere            (Uniform)
//! A = (S·V)·W_o                 (A = 0 in Zero mode)
//! x̃ = x + A
//! ```
//!
//! Uniform and Zero modes never compute `Q` or `K`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Standard,
    Uniform,
    Zero,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [Self::Standard, Self::Uniform, Self::Zero];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Uniform => "uniform",
            Self::Zero => "zero",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "uniform" => Ok(Self::Uniform),
            "zero" => Ok(Self::Zero),
            other => Err(arg_err!(
                "unknown attention mode {other:?} (standard|uniform|zero)"
            )),
        }
    }
}

/// The four projection matrices of one layer, as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Result of one cross-attention update on the tape.
pub(crate) struct AttentionNodes {
    pub x_tilde: Var,
    /// Update term `A`, `[B, M, d_x]`.
    pub update: Var,
    /// `S·V` before the output projection, `[B, M, d]`.
    pub mixed: Option<Var>,
    /// Score maps `[B * heads, M, N]`; absent in Zero mode.
    pub scores: Option<Var>,
}

/// Record a batched cross-attention update.
///
/// `x: [B, M, d_x]`, `c: [B, N, d_c]`; weights `q: [d_x, d]`, `k, v: [d_c, d]`,
/// `o: [d, d_x]`.
pub(crate) fn cross_attention(
    tape: &mut Tape,
    x: Var,
    c: Var,
    w: AttentionVars,
    heads: usize,
    mode: AttentionMode,
) -> Result<AttentionNodes> {
    let &[b, m, dx] = tape.shape(x) else {
        return Err(dim_err!(
            "attention input must be [B, M, d_x], got {:?}",
            tape.shape(x)
        ));
    };
    let &[b2, n, dc] = tape.shape(c) else {
        return Err(dim_err!(
            "prompt embedding must be [B, N, d_c], got {:?}",
            tape.shape(c)
        ));
    };
    if n == 0 {
        return Err(arg_err!("prompt has no tokens"));
    }
    if b != b2 {
        return Err(dim_err!("batch of {b} images but {b2} prompts"));
    }
    let (wq, wk) = (tape.shape(w.q).to_vec(), tape.shape(w.k).to_vec());
    let (wv, wo) = (tape.shape(w.v).to_vec(), tape.shape(w.o).to_vec());
    let d = wv[1];
    if wq != [dx, d] || wk != [dc, d] || wv != [dc, d] || wo != [d, dx] {
        return Err(dim_err!(
            "projection shapes q{wq:?} k{wk:?} v{wv:?} o{wo:?} do not fit d_x={dx}, d_c={dc}"
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(arg_err!("{heads} heads do not divide width {d}"));
    }

    if mode == AttentionMode::Zero {
        let update = tape.constant(Tensor::zeros(&[b, m, dx]));
        return Ok(AttentionNodes {
            x_tilde: x,
            update,
            mixed: None,
            scores: None,
        });
    }

    let dh = d / heads;
    // [B, L, d] -> [B*heads, L, dh]
    let split = |tape: &mut Tape, t: Var, len: usize| -> Result<Var> {
        if heads == 1 {
            return tape.reshape(t, &[b, len, d]);
        }
        let t = tape.reshape(t, &[b, len, heads, dh])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        tape.reshape(t, &[b * heads, len, dh])
    };

    let c_flat = tape.reshape(c, &[b * n, dc])?;
    let v = tape.matmul(c_flat, w.v)?;
    let v = split(tape, v, n)?;

    let scores = match mode {
        AttentionMode::Standard => {
            let x_flat = tape.reshape(x, &[b * m, dx])?;
            let q = tape.matmul(x_flat, w.q)?;
            let q = split(tape, q, m)?;
            let k = tape.matmul(c_flat, w.k)?;
            let k = split(tape, k, n)?;
            let kt = tape.permute(k, &[0, 2, 1])?;
            let logits = tape.bmm(q, kt)?;
            let logits = tape.scale(logits, 1.0 / (dh as f32).sqrt())?;
            tape.softmax(logits)?
        }
        AttentionMode::Uniform => tape.constant(Tensor::full(&[b * heads, m, n], 1.0 / n as f32)?),
        AttentionMode::Zero => unreachable!(),
    };

    let mixed = tape.bmm(scores, v)?;
    let mixed = if heads == 1 {
        mixed
    } else {
        let t = tape.reshape(mixed, &[b, heads, m, dh])?;
        tape.permute(t, &[0, 2, 1, 3])?
    };
    let mixed = tape.reshape(mixed, &[b * m, d])?;
    let update = tape.matmul(mixed, w.o)?;
    let update = tape.reshape(update, &[b, m, dx])?;
    let x_tilde = tape.add(x, update)?;
    let mixed = tape.reshape(mixed, &[b, m, d])?;
    Ok(AttentionNodes {
        x_tilde,
        update,
        mixed: Some(mixed),
        scores: Some(scores),
    })
}

/// A standalone cross-attention layer holding its own projections.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer {
    pub w_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    pub w_o: Arc<Tensor>,
    pub heads: usize,
}

/// Output of [`CrossAttentionLayer::attention_update`] for one image.
#[derive(Clone, Debug)]
pub struct AttentionUpdate {
    /// `x + A`, `[M, d_x]`.
    pub x_tilde: Tensor,
    /// The cross-attention term `A` after the output projection, `[M, d_x]`.
    pub update: Tensor,
    /// `S·V` before the output projection, `[M, d]`; all zeros in Zero mode.
    pub mixed: Tensor,
}

impl CrossAttentionLayer {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let layer = Self {
            w_q: Arc::new(w_q),
            w_k: Arc::new(w_k),
            w_v: Arc::new(w_v),
            w_o: Arc::new(w_o),
            heads,
        };
        let (dx, d) = (layer.w_q.shape()[0], layer.w_q.shape()[1]);
        let dc = layer.w_k.shape()[0];
        if layer.w_q.rank() != 2
            || layer.w_k.shape() != [dc, d]
            || layer.w_v.shape() != [dc, d]
            || layer.w_o.shape() != [d, dx]
        {
            return Err(dim_err!("inconsistent cross-attention projection shapes"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(arg_err!("{heads} heads do not divide width {d}"));
        }
        Ok(layer)
    }

    /// Random projections scaled by `1/√fan_in`.
    pub fn random(d_x: usize, d_c: usize, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let mut init =
            |rows: usize, cols: usize| rng.randn(&[rows, cols]).scale(1.0 / (rows as f32).sqrt());
        Self::new(
            init(d_x, d)?,
            init(d_c, d)?,
            init(d_c, d)?,
            init(d, d_x)?,
            heads,
        )
    }

    pub fn d_x(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_c(&self) -> usize {
        self.w_k.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[1]
    }

    fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            q: tape.constant_shared(self.w_q.clone()),
            k: tape.constant_shared(self.w_k.clone()),
            v: tape.constant_shared(self.w_v.clone()),
            o: tape.constant_shared(self.w_o.clone()),
        }
    }

    fn run(
        &self,
        x: &Tensor,
        c_emb: &Tensor,
        mode: AttentionMode,
    ) -> Result<(Tape, AttentionNodes)> {
        let (&[m, dx], &[n, dc]) = (x.shape(), c_emb.shape()) else {
            return Err(dim_err!(
                "expected x: [M, d_x] and c: [N, d_c], got {:?} and {:?}",
                x.shape(),
                c_emb.shape()
            ));
        };
        x.check_finite()?;
        c_emb.check_finite()?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let xv = tape.constant(x.reshape(&[1, m, dx])?);
        let cv = tape.constant(c_emb.reshape(&[1, n, dc])?);
        let nodes = cross_attention(&mut tape, xv, cv, w, self.heads, mode)?;
        Ok((tape, nodes))
    }

    /// Score map `S`: `[M, N]` for a single head, `[heads, M, N]` otherwise.
    pub fn score_map(&self, x: &Tensor, c_emb: &Tensor, mode: AttentionMode) -> Result<Tensor> {
        let (tape, nodes) = self.run(x, c_emb, mode)?;
        let (m, n) = (x.shape()[0], c_emb.shape()[0]);
        match nodes.scores {
            Some(s) if self.heads == 1 => tape.value(s).reshape(&[m, n]),
            Some(s) => Ok(tape.value(s).clone()),
            None if self.heads == 1 => Ok(Tensor::zeros(&[m, n])),
            None => Ok(Tensor::zeros(&[self.heads, m, n])),
        }
    }

    pub fn attention_update(
        &self,
        x: &Tensor,
        c_emb: &Tensor,
        mode: AttentionMode,
    ) -> Result<AttentionUpdate> {
        let (tape, nodes) = self.run(x, c_emb, mode)?;
        let (m, dx) = (x.shape()[0], x.shape()[1]);
        let mixed = match nodes.mixed {
            Some(v) => tape.value(v).reshape(&[m, self.width()])?,
            None => Tensor::zeros(&[m, self.width()]),
        };
        Ok(AttentionUpdate {
            x_tilde: tape.value(nodes.x_tilde).reshape(&[m, dx])?,
            update: tape.value(nodes.update).reshape(&[m, dx])?,
            mixed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(seed: u64, heads: usize) -> CrossAttentionLayer {
        CrossAttentionLayer::random(6, 5, 8, heads, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn uniform_scores_are_one_over_n() {
        let l = layer(1, 1);
        let mut r = Rng::new(2);
        let s = l
            .score_map(&r.randn(&[2, 6]), &r.randn(&[4, 5]), AttentionMode::Uniform)
            .unwrap();
        assert_eq!(s.shape(), &[2, 4]);
        assert!(s.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn zero_logits_give_uniform_rows() {
        let mut l = layer(3, 1);
        l.w_q = Arc::new(Tensor::zeros(&[6, 8]));
        let mut r = Rng::new(4);
        let s = l
            .score_map(
                &r.randn(&[3, 6]),
                &r.randn(&[5, 5]),
                AttentionMode::Standard,
            )
            .unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn standard_scores_match_naive_loops() {
        let l = layer(5, 1);
        let mut r = Rng::new(6);
        let (x, c) = (r.randn(&[4, 6]), r.randn(&[3, 5]));
        let s = l.score_map(&x, &c, AttentionMode::Standard).unwrap();

        let dot = |a: &[f32], w: &Tensor, col: usize| -> f64 {
            a.iter()
                .enumerate()
                .map(|(i, &v)| v as f64 * w.data()[i * 8 + col] as f64)
                .sum()
        };
        for i in 0..4 {
            let xi = &x.data()[i * 6..(i + 1) * 6];
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    let cj = &c.data()[j * 5..(j + 1) * 5];
                    (0..8)
                        .map(|p| dot(xi, &l.w_q, p) * dot(cj, &l.w_k, p))
                        .sum::<f64>()
                        / 8f64.sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let row_sum: f32 = s.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
            for (j, logit) in logits.iter().enumerate() {
                assert!((s.data()[i * 3 + j] as f64 - logit.exp() / z).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_mode_leaves_x_bitwise_unchanged() {
        let l = layer(7, 2);
        let mut r = Rng::new(8);
        let x = r.randn(&[5, 6]);
        let out = l
            .attention_update(&x, &r.randn(&[2, 5]), AttentionMode::Zero)
            .unwrap();
        assert_eq!(out.x_tilde, x);
        assert!(out.update.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_with_two_tokens_averages_value_rows() {
        let l = layer(9, 1);
        let mut r = Rng::new(10);
        let c = r.randn(&[2, 5]);
        let out = l
            .attention_update(&r.randn(&[3, 6]), &c, AttentionMode::Uniform)
            .unwrap();
        let v = c.matmul(&l.w_v).unwrap();
        for row in out.mixed.data().chunks(8) {
            for (p, &got) in row.iter().enumerate() {
                let want = (v.data()[p] + v.data()[8 + p]) / 2.0;
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_is_token_permutation_invariant() {
        let l = layer(11, 1);
        let mut r = Rng::new(12);
        let x = r.randn(&[4, 6]);
        let c = r.randn(&[3, 5]);
        let mut permuted = Vec::new();
        for j in [2, 0, 1] {
            permuted.extend_from_slice(&c.data()[j * 5..(j + 1) * 5]);
        }
        let cp = Tensor::new(vec![3, 5], permuted).unwrap();
        let a = l
            .attention_update(&x, &c, AttentionMode::Uniform)
            .unwrap()
            .update;
        let b = l
            .attention_update(&x, &cp, AttentionMode::Uniform)
            .unwrap()
            .update;
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_update_ignores_query_content() {
        let l = layer(13, 2);
        let mut r = Rng::new(14);
        let c = r.randn(&[3, 5]);
        let a = l
            .attention_update(&r.randn(&[4, 6]), &c, AttentionMode::Uniform)
            .unwrap();
        let b = l
            .attention_update(&r.randn(&[4, 6]), &c, AttentionMode::Uniform)
            .unwrap();
        assert_eq!(a.update, b.update);
        assert_ne!(a.x_tilde, b.x_tilde);
    }

    #[test]
    fn standard_update_depends_on_query_content() {
        let l = layer(15, 1);
        let mut r = Rng::new(16);
        let c = r.randn(&[3, 5]);
        let a = l
            .attention_update(&r.randn(&[4, 6]), &c, AttentionMode::Standard)
            .unwrap();
        let b = l
            .attention_update(&r.randn(&[4, 6]), &c, AttentionMode::Standard)
            .unwrap();
        assert!(a.update.max_abs_diff(&b.update).unwrap() > 1e-4);
    }

    #[test]
    fn multi_head_rows_sum_to_one() {
        let l = layer(17, 4);
        let mut r = Rng::new(18);
        let s = l
            .score_map(
                &r.randn(&[5, 6]),
                &r.randn(&[3, 5]),
                AttentionMode::Standard,
            )
            .unwrap();
        assert_eq!(s.shape(), &[4, 5, 3]);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let l = layer(19, 1);
        let mut r = Rng::new(20);
        assert!(matches!(
            l.attention_update(
                &r.randn(&[4, 7]),
                &r.randn(&[2, 5]),
                AttentionMode::Standard
            ),
            Err(Error::Dimension(_))
        ));
        assert!(l
            .score_map(&r.randn(&[4, 6]), &r.randn(&[2, 4]), AttentionMode::Uniform)
            .is_err());
        assert!(CrossAttentionLayer::random(6, 5, 8, 3, &mut r).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in AttentionMode::ALL {
            assert_eq!(m.as_str().parse::<AttentionMode>().unwrap(), m);
        }
        assert!("softmax".parse::<AttentionMode>().is_err());
    }
}
