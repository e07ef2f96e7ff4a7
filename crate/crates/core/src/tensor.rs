//! Dense row-major tensors and the forward-only kernels shared with the tape.
//!
//! Matrix operations view a tensor as `rows x cols`, where `cols` is the last
//! extent and `rows` is the product of all leading extents.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Error, Result};

/// Real scalar type the tape can run on. Training uses `f32`; the
/// finite-difference harness may promote a model to `f64`.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {expected} scalars, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Matrix from nested rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(shape_err("rows have different widths"));
        }
        Self::new(vec![n, width], rows.iter().flatten().copied().collect())
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        self.grad = grad;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `start..start+len` of a matrix view, as a new `len x cols` tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        if start + len > self.rows() || len == 0 {
            return Err(shape_err(format!(
                "row slice {start}..{} out of {} rows",
                start + len,
                self.rows()
            )));
        }
        Self::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }
}

/// Numerically stable softmax over one contiguous slice. Masked entries are
/// written as exact zeros.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> Result<()> {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if !(0..row.len()).any(keep) {
        return Err(Error::EmptyAttentionRow);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            total = total + *v;
        } else {
            *v = T::zero();
        }
    }
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = *v / total;
        }
    }
    Ok(())
}

/// Softmax along `axis`. `mask`, when given, has one flag per element of
/// `logits` (row-major, same shape); `false` entries are excluded and come
/// back as exact zeros.
pub fn masked_softmax<T: Scalar>(
    logits: &Tensor<T>,
    axis: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(shape_err(format!(
                "mask has {} entries, logits have {}",
                m.len(),
                logits.len()
            )));
        }
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = logits.clone();
    out.set_requires_grad(false);
    out.set_grad(None);
    let mut buf = vec![T::zero(); extent];
    let mut mbuf = vec![true; extent];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            for k in 0..extent {
                buf[k] = logits.data[idx(k)];
                if let Some(m) = mask {
                    mbuf[k] = m[idx(k)];
                }
            }
            softmax_in_place(&mut buf, mask.map(|_| mbuf.as_slice()))?;
            for k in 0..extent {
                out.data[idx(k)] = buf[k];
            }
        }
    }
    Ok(out)
}

/// Per-position normalization over the last axis followed by `gain * x + bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(format!(
            "layer norm over {d} features got gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let (xhat, _) = normalize_row(x.row(r), eps);
        let dst = &mut out.data[r * d..(r + 1) * d];
        for j in 0..d {
            dst[j] = xhat[j] * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// Returns the standardized row and `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_usize(row.len()).expect("row length");
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

/// `a (n x k) * b (k x m)`, row-major.
pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let src = &b[p * m..(p + 1) * m];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + av * s;
            }
        }
    }
    out
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d = *d + alpha * s;
    }
}
