use std::fmt;

use crate::error::{arg_err, dim_err, Error, Result};

/// Dense row-major `f32` array.
///
/// `shape.iter().product() == data.len()` always holds. Constructors and
/// the arithmetic helpers below reject non-finite results.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(dim_err!("zero extent in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

pub(crate) fn ensure_finite(data: &[f32], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!(
            "{what}: element {i} is {}",
            data[i]
        ))),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        ensure_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output length is correct by
    /// construction. Finiteness is the caller's responsibility.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![1.0; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(dim_err!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn check_finite(&self) -> Result<()> {
        ensure_finite(&self.data, "tensor")
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        ensure_finite(&data, op)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        ensure_finite(&data, "map")?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// `a * self + b * other`, elementwise.
    ///
    /// The DDIM update rules are all of this form and go through here so
    /// that every code path performing "the same" step rounds identically.
    pub fn lincomb(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        self.zip_map(other, "lincomb", |x, y| a * x + b * y)
    }

    /// `a·self + b·other` evaluated in f64 and rounded once.
    pub fn lincomb_f64(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, "lincomb", |x, y| {
            (a * x as f64 + b * y as f64) as f32
        })
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul lhs")?;
        let (k2, n) = as_matrix(other, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        super::gemm::gemm(
            m,
            k,
            n,
            (&self.data, k as isize, 1),
            (&other.data, n as isize, 1),
            (&mut out, n as isize, 1),
            false,
        );
        ensure_finite(&out, "matmul")?;
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Row-wise softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.check_finite()?;
        let n = *self
            .shape
            .last()
            .ok_or_else(|| arg_err!("softmax on rank-0 tensor"))?;
        let mut out = self.data.clone();
        softmax_in_place(&mut out, n);
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Select channel `c` of a `[C, ...]` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (&channels, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| dim_err!("channel() on rank-0 tensor"))?;
        if c >= channels || rest.is_empty() {
            return Err(dim_err!("channel {c} of shape {:?}", self.shape));
        }
        let plane: usize = rest.iter().product();
        Ok(Self::from_parts(
            rest.to_vec(),
            self.data[c * plane..(c + 1) * plane].to_vec(),
        ))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| arg_err!("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Split along the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        let (&b, rest) = self.shape.split_first().expect("rank >= 1");
        if rest.is_empty() {
            return self.data.iter().map(|&v| Tensor::scalar(v)).collect();
        }
        let n: usize = rest.iter().product();
        (0..b)
            .map(|i| Self::from_parts(rest.to_vec(), self.data[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}

pub(crate) fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(dim_err!("{what}: expected a matrix, got shape {s:?}")),
    }
}

pub(crate) fn softmax_in_place(data: &mut [f32], row: usize) {
    for r in data.chunks_mut(row) {
        let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        for v in r.iter_mut() {
            *v *= inv;
        }
    }
}

/// Linear-interpolation quantile at fractional rank `q * (n - 1)`.
pub fn quantile(values: &[f32], q: f32) -> Result<f32> {
    if values.is_empty() {
        return Err(arg_err!("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(arg_err!("quantile level {q} outside [0, 1]"));
    }
    ensure_finite(values, "quantile input")?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = q as f64 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = rank - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    Ok((a + (b - a) * frac) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let b = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::zeros(&[2, 4]);
        assert!(a.matmul(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[1, 4], &[0.0; 4]).softmax_rows().unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));

        let s = t(&[1, 2], &[0.0, 2f32.ln()]).softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let bad = Tensor::from_parts(vec![1, 2], vec![0.0, f32::NAN]);
        assert!(matches!(bad.softmax_rows(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn quantile_examples() {
        let xs = [0.9, 0.05, 0.2, 0.1];
        assert_eq!(quantile(&xs, 0.0).unwrap(), 0.05);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 0.9);
        assert!((quantile(&xs, 0.5).unwrap() - 0.15).abs() < 1e-7);
        assert_eq!(quantile(&[0.3; 7], 0.37).unwrap(), 0.3);
        assert!(matches!(quantile(&[], 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn quantile_median_of_odd_set_is_exact() {
        let xs = [5.0, -1.0, 3.25, 9.0, 0.5];
        assert_eq!(quantile(&xs, 0.5).unwrap(), 3.25);
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::INFINITY]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn elementwise_overflow_is_an_error() {
        let big = Tensor::full(&[2], f32::MAX).unwrap();
        assert!(matches!(big.add(&big), Err(Error::NonFinite(_))));
    }
}
