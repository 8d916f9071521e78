//! Reverse-mode differentiation over the fixed op set the denoiser needs.
//!
//! A [`Tape`] records every value it produces. [`Tape::backward`] then walks
//! the records from last to first, so adjoints are always complete before a
//! node passes them on to its inputs.

use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::{ensure_finite, Tensor};
use crate::error::{arg_err, dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    AddChannel(Var, Var),
    Silu(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Upsample2x(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Move the adjoint out; `None` if `v` does not influence the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0].take().map(|g| Tensor::from_parts(shape, g))
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, axes);
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn conv_out_extent(n: usize, k: usize, spec: ConvSpec) -> Option<usize> {
    (n + 2 * spec.pad)
        .checked_sub(k)
        .map(|v| v / spec.stride + 1)
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` lies in `0..w`.
fn valid_range(w: usize, wo: usize, kj: usize, spec: ConvSpec) -> (usize, usize) {
    let lo = spec.pad.saturating_sub(kj).div_ceil(spec.stride);
    let hi = if w + spec.pad > kj {
        ((w - 1 + spec.pad - kj) / spec.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one `[C, H, W]` image into `[C*K*K, Ho*Wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_range(w, wo, kj, spec);
                let row = &mut cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if lo < hi {
                        let first = lo * spec.stride + kj - spec.pad;
                        if spec.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(spec.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_range(w, wo, kj, spec);
                if lo >= hi {
                    continue;
                }
                let first = lo * spec.stride + kj - spec.pad;
                let row = &cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    let dst = &mut plane[iy as usize * w + first..];
                    if spec.stride == 1 {
                        dst[..hi - lo]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    } else {
                        for (d, s) in dst.iter_mut().step_by(spec.stride).zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf; receives an adjoint.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no adjoint is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant leaf sharing storage with the caller (frozen weights).
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// Batched product `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, m, k], &[bb, k2, n]) = (sa, sb) else {
            return Err(dim_err!(
                "bmm expects rank-3 operands, got {sa:?} and {sb:?}"
            ));
        };
        if ba != bb || k != k2 {
            return Err(dim_err!("bmm shapes {sa:?} and {sb:?} are incompatible"));
        }
        let mut out = vec![0.0; ba * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                (&ad[i * m * k..(i + 1) * m * k], k as isize, 1),
                (&bd[i * k * n..(i + 1) * k * n], n as isize, 1),
                (&mut out[i * m * n..(i + 1) * m * n], n as isize, 1),
                false,
            );
        }
        ensure_finite(&out, "bmm")?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![ba, m, n], out), Op::Bmm(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).scale(c)?;
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Scale(a, c), g))
    }

    /// `x + bias`, with `bias` of shape `[n]` broadcast over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [n] {
            return Err(dim_err!(
                "bias {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let data: Vec<f32> = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a + b))
            .collect();
        ensure_finite(&data, "add_bias")?;
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), g))
    }

    /// `x[b, c, :, :] + bias[b, c]` for `x` of shape `[B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let &[b, c, h, w] = xv.shape() else {
            return Err(dim_err!(
                "add_channel expects [B, C, H, W], got {:?}",
                xv.shape()
            ));
        };
        if bv.shape() != [b, c] {
            return Err(dim_err!(
                "channel bias {:?} does not match {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let plane = h * w;
        let mut data = xv.data().to_vec();
        for (chunk, &bias) in data.chunks_mut(plane).zip(bv.data()) {
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        ensure_finite(&data, "add_channel")?;
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(out, Op::AddChannel(x, bias), g))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu)?;
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Silu(a), g))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Softmax(a), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&i| i >= rank || std::mem::replace(&mut seen[i], true))
        {
            return Err(arg_err!("invalid permutation {axes:?} for rank {rank}"));
        }
        let data = permute_data(v.data(), v.shape(), axes);
        let out = Tensor::from_parts(permuted_shape(v.shape(), axes), data);
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), g))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [O, C, K, K]` and
    /// optional `b: [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[bn, c, h, wd], &[o, c2, k, k2]) = (xv.shape(), wv.shape()) else {
            return Err(dim_err!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            ));
        };
        if c != c2 || k != k2 || spec.stride == 0 {
            return Err(dim_err!(
                "conv2d weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err!("conv2d bias {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let (Some(ho), Some(wo)) = (conv_out_extent(h, k, spec), conv_out_extent(wd, k, spec))
        else {
            return Err(dim_err!(
                "conv2d kernel {k} larger than padded input {h}x{wd}"
            ));
        };
        let ckk = c * k * k;
        let n = ho * wo;
        let mut cols = vec![0.0; ckk * n];
        let mut out = vec![0.0; bn * o * n];
        let xd = xv.data();
        for i in 0..bn {
            im2col(
                &xd[i * c * h * wd..(i + 1) * c * h * wd],
                c,
                h,
                wd,
                k,
                spec,
                ho,
                wo,
                &mut cols,
            );
            gemm(
                o,
                ckk,
                n,
                (wv.data(), ckk as isize, 1),
                (&cols, n as isize, 1),
                (&mut out[i * o * n..(i + 1) * o * n], n as isize, 1),
                false,
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (chunk, &bias) in out.chunks_mut(n).zip(bd.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        ensure_finite(&out, "conv2d")?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let g = self.grad_of(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![bn, o, ho, wo], out),
            Op::Conv2d { x, w, b, spec },
            g,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let &[b, c, h, w] = v.shape() else {
            return Err(dim_err!(
                "upsample2x expects [B, C, H, W], got {:?}",
                v.shape()
            ));
        };
        let mut out = vec![0.0; b * c * 4 * h * w];
        for (p, plane) in v.data().chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out),
            Op::Upsample2x(a),
            g,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mean());
        out.check_finite()?;
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Mean(a), g))
    }

    /// Rows `ids` of a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let &[vocab, d] = tv.shape() else {
            return Err(dim_err!(
                "gather expects a [V, D] table, got {:?}",
                tv.shape()
            ));
        };
        if ids.is_empty() {
            return Err(arg_err!("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(arg_err!("id {bad} outside vocabulary of {vocab}"));
        }
        let data: Vec<f32> = ids
            .iter()
            .flat_map(|&i| tv.data()[i * d..(i + 1) * d].iter().copied())
            .collect();
        let g = self.grad_of(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather(table, ids.to_vec()),
            g,
        ))
    }

    /// Adjoints of `loss` with respect to every recorded node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        for g in grads.iter().flatten() {
            ensure_finite(g, "gradient")?;
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        (gy, n as isize, 1),
                        (bv.data(), 1, n as isize),
                        (&mut da, k as isize, 1),
                        false,
                    );
                    add_owned(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        (av.data(), 1, k as isize),
                        (gy, n as isize, 1),
                        (&mut db, n as isize, 1),
                        false,
                    );
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; bn * m * k];
                    for i in 0..bn {
                        gemm(
                            m,
                            n,
                            k,
                            (&gy[i * m * n..(i + 1) * m * n], n as isize, 1),
                            (&bv.data()[i * k * n..(i + 1) * k * n], 1, n as isize),
                            (&mut da[i * m * k..(i + 1) * m * k], k as isize, 1),
                            false,
                        );
                    }
                    add_owned(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bn * k * n];
                    for i in 0..bn {
                        gemm(
                            k,
                            m,
                            n,
                            (&av.data()[i * m * k..(i + 1) * m * k], 1, k as isize),
                            (&gy[i * m * n..(i + 1) * m * n], n as isize, 1),
                            (&mut db[i * k * n..(i + 1) * k * n], n as isize, 1),
                            false,
                        );
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.wants(*b) {
                    add_owned(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    add_owned(
                        &mut grads[a.0],
                        gy.iter().zip(bv).map(|(g, y)| g * y).collect(),
                    );
                }
                if self.wants(*b) {
                    add_owned(
                        &mut grads[b.0],
                        gy.iter().zip(av).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::Scale(a, c) => {
                add_owned(&mut grads[a.0], gy.iter().map(|g| g * c).collect());
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], gy);
                }
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in gy.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    add_owned(&mut grads[bias.0], db);
                }
            }
            Op::AddChannel(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], gy);
                }
                if self.wants(*bias) {
                    let s = self.shape(*x);
                    let plane = s[2] * s[3];
                    let db = gy.chunks(plane).map(|c| c.iter().sum()).collect();
                    add_owned(&mut grads[bias.0], db);
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                let d = gy
                    .iter()
                    .zip(av)
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], gy),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                add_owned(
                    &mut grads[a.0],
                    permute_data(gy, node.value.shape(), &inverse),
                );
            }
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, *spec, gy, grads),
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let mut d = vec![0.0; self.value(*a).len()];
                for (p, plane) in gy.chunks(4 * h * w).enumerate() {
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += plane[y * 2 * w + x];
                        }
                    }
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                add_owned(&mut grads[a.0], vec![gy[0] / n as f32; n]);
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (row, &i) in gy.chunks(d).zip(ids) {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, g)| *a += g);
                }
                add_owned(&mut grads[table.0], dt);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bn, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        let ho = conv_out_extent(h, k, spec).unwrap();
        let wo = conv_out_extent(wd, k, spec).unwrap();
        let (ckk, n) = (c * k * k, ho * wo);

        if let Some(b) = b.filter(|b| self.wants(*b)) {
            let mut db = vec![0.0; o];
            for (chunk, d) in gy.chunks(n).zip((0..o).cycle()) {
                db[d] += chunk.iter().sum::<f32>();
            }
            add_owned(&mut grads[b.0], db);
        }
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        if !want_x && !want_w {
            return;
        }
        let mut cols = vec![0.0; ckk * n];
        let mut dw = if want_w {
            vec![0.0; o * ckk]
        } else {
            Vec::new()
        };
        let mut dx = if want_x {
            vec![0.0; xv.len()]
        } else {
            Vec::new()
        };
        for i in 0..bn {
            let gyi = &gy[i * o * n..(i + 1) * o * n];
            if want_w {
                im2col(
                    &xv.data()[i * c * h * wd..(i + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    k,
                    spec,
                    ho,
                    wo,
                    &mut cols,
                );
                // dW += dY_i · colsᵀ
                gemm(
                    o,
                    n,
                    ckk,
                    (gyi, n as isize, 1),
                    (&cols, 1, n as isize),
                    (&mut dw, ckk as isize, 1),
                    true,
                );
            }
            if want_x {
                // dcols = Wᵀ · dY_i
                gemm(
                    ckk,
                    o,
                    n,
                    (wv.data(), 1, ckk as isize),
                    (gyi, n as isize, 1),
                    (&mut cols, n as isize, 1),
                    false,
                );
                col2im(
                    &cols,
                    c,
                    h,
                    wd,
                    k,
                    spec,
                    ho,
                    wo,
                    &mut dx[i * c * h * wd..(i + 1) * c * h * wd],
                );
            }
        }
        if want_w {
            add_owned(&mut grads[w.0], dw);
        }
        if want_x {
            add_owned(&mut grads[x.0], dx);
        }
    }
}
