//! Immutable dense tensors and the forward kernels of every primitive.

use std::fmt;
use std::sync::Arc;

use super::{NumericsError, Real, Result};

/// A row-major dense array. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &preview).finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape("new", &shape)?;
        if n != data.len() {
            return Err(NumericsError::InvalidShape {
                op: "new",
                shape,
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "new", node: None });
        }
        Ok(Tensor { shape, data: data.into() })
    }

    /// Shape/length are the caller's invariant; used by kernels whose output
    /// sizes are derived from already-validated inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: data.into() }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape("full", shape)?;
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape("from_fn", shape)?;
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Independent `N(0, std²)` entries drawn from `rng`.
    pub fn random_normal(shape: &[usize], std: f64, rng: &mut super::Rng) -> Result<Self> {
        Self::from_fn(shape, |_| T::of(std * rng.normal()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts between precisions.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(NumericsError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self.data.iter().zip(other.data.iter()).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(())
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, op: &'static str, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, other)?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map(|v| v.exp())
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map(|v| v.ln())
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.map(|v| v.sqrt())
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map(|v| v.tanh())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n = check_shape("reshape", shape)?;
        if n != self.numel() {
            return Err(NumericsError::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(NumericsError::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                reason: "needs at least two axes".into(),
            });
        }
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (rows * cols);
        let mut out = Vec::with_capacity(self.numel());
        for b in 0..batch {
            let base = b * rows * cols;
            for c in 0..cols {
                for rr in 0..rows {
                    out.push(self.data[base + rr * cols + c]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Matrix product.
    ///
    /// * `[.., m, k] × [k, n]`: the leading axes of the left operand are
    ///   flattened into rows (a shared weight).
    /// * `[b, m, k] × [b, k, n]`: batched product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.forward(&self.data, &other.data, &mut out);
        Ok(Tensor::from_parts(plan.out_shape.clone(), out))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        let r = self.rank();
        if axis >= r {
            return Err(NumericsError::AxisOutOfRange { op: "slice", axis, rank: r });
        }
        if start >= end || end > self.shape[axis] {
            return Err(NumericsError::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                reason: format!("range {start}..{end} invalid on axis {axis}"),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        let r = first.rank();
        if axis >= r {
            return Err(NumericsError::AxisOutOfRange { op: "concat", axis, rank: r });
        }
        for p in parts.iter().skip(1) {
            let compatible = p.rank() == r
                && p.shape.iter().zip(first.shape.iter()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, out))
    }

    fn last_axis(&self, op: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(NumericsError::Empty { op }),
        }
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last_axis(&self) -> Result<Tensor<T>> {
        let n = self.last_axis("softmax")?;
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance.
    /// Returns the normalized tensor and the per-row reciprocal std.
    pub fn layer_norm_last_axis(&self, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
        let n = self.last_axis("layer_norm")?;
        let nf = T::of_usize(n);
        let mut out = self.data.to_vec();
        let mut rstds = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        Ok((Tensor::from_parts(self.shape.clone(), out), rstds))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        Tensor::from_parts(vec![1], vec![self.data.iter().copied().sum()])
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::of_usize(self.numel());
        Tensor::from_parts(vec![1], vec![self.data.iter().copied().sum::<T>() / n])
    }

    /// Sums over `axis`, keeping it with length one.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let r = self.rank();
        if axis >= r {
            return Err(NumericsError::AxisOutOfRange { op: "sum_axis", axis, rank: r });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let s = self.sum_axis(axis)?;
        let n = T::of_usize(self.shape[axis]);
        Ok(s.map(|v| v / n))
    }

    /// Broadcasts to `shape` with right-aligned axes; source axes must match
    /// or have length one.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let plan = BroadcastPlan::new(&self.shape, shape)?;
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.data[plan.source_index(i)]);
        }
        Ok(Tensor::from_parts(shape.to_vec(), out))
    }
}

/// Index bookkeeping shared by the forward broadcast and its reduction.
pub(crate) struct BroadcastPlan {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastPlan {
    pub(crate) fn new(src: &[usize], dst: &[usize]) -> Result<Self> {
        check_shape("broadcast", dst)?;
        let mismatch = || NumericsError::ShapeMismatch { op: "broadcast", lhs: src.to_vec(), rhs: dst.to_vec() };
        if src.len() > dst.len() {
            return Err(mismatch());
        }
        let offset = dst.len() - src.len();
        let mut src_strides = vec![0usize; dst.len()];
        let mut stride = 1usize;
        for i in (0..src.len()).rev() {
            let d = dst[offset + i];
            if src[i] == d {
                src_strides[offset + i] = stride;
            } else if src[i] == 1 {
                src_strides[offset + i] = 0;
            } else {
                return Err(mismatch());
            }
            stride *= src[i];
        }
        Ok(BroadcastPlan { out_shape: dst.to_vec(), src_strides })
    }

    pub(crate) fn source_index(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for (d, s) in self.out_shape.iter().zip(self.src_strides.iter()).rev() {
            idx += (flat % d) * s;
            flat /= d;
        }
        idx
    }
}

/// Resolved geometry of a matrix product.
pub(crate) struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand shared across the batch (weight matrix).
    shared_rhs: bool,
    pub(crate) out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || NumericsError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let k = a[a.len() - 1];
        if b.len() == 2 {
            if b[0] != k {
                return Err(mismatch());
            }
            let m: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a.to_vec();
            *out_shape.last_mut().unwrap() = b[1];
            return Ok(MatmulPlan { batch: 1, m, k, n: b[1], shared_rhs: true, out_shape });
        }
        if a.len() == 3 && b.len() == 3 && a[0] == b[0] && b[1] == k {
            return Ok(MatmulPlan {
                batch: a[0],
                m: a[1],
                k,
                n: b[2],
                shared_rhs: false,
                out_shape: vec![a[0], a[1], b[2]],
            });
        }
        Err(mismatch())
    }

    pub(crate) fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn rhs_block(&self) -> usize {
        if self.shared_rhs {
            0
        } else {
            self.k * self.n
        }
    }

    pub(crate) fn forward<T: Real>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let rb = bi * self.rhs_block();
            T::gemm(
                m,
                k,
                n,
                &a[bi * m * k..],
                (k as isize, 1),
                &b[rb..],
                (n as isize, 1),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }

    /// Accumulates `dA += dC · Bᵀ`.
    pub(crate) fn grad_lhs<T: Real>(&self, grad: &[T], b: &[T], da: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let rb = bi * self.rhs_block();
            T::gemm(
                m,
                n,
                k,
                &grad[bi * m * n..],
                (n as isize, 1),
                &b[rb..],
                (1, n as isize),
                T::one(),
                &mut da[bi * m * k..(bi + 1) * m * k],
            );
        }
    }

    /// Accumulates `dB += Aᵀ · dC` (summed over the batch when shared).
    pub(crate) fn grad_rhs<T: Real>(&self, grad: &[T], a: &[T], db: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let rb = bi * self.rhs_block();
            T::gemm(
                k,
                m,
                n,
                &a[bi * m * k..],
                (1, k as isize),
                &grad[bi * m * n..],
                (n as isize, 1),
                T::one(),
                &mut db[rb..rb + k * n],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax_last_axis().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000.0, 1000.0]).softmax_last_axis().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[0.0, 3f64.ln()]).softmax_last_axis().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 5.0, 5.5, -1.0]);
        let shifted = x.map(|v| v + 17.0);
        let d = x.softmax_last_axis().unwrap().max_abs_diff(&shifted.softmax_last_axis().unwrap()).unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(matches!(Tensor::<f64>::new(vec![1], vec![f64::NAN]), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn matmul_shapes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 1], &[1.0, 0.0, -1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[-2.0, -2.0]);

        let a3 = a.reshape(&[1, 2, 3]).unwrap();
        assert_eq!(a3.matmul(&b).unwrap().shape(), &[1, 2, 1]);
        assert!(matches!(b.matmul(&b), Err(NumericsError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn batched_matmul_matches_loop() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64 * 0.5 - 1.0).unwrap();
        let b = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i as f64).sin()).unwrap();
        let c = a.matmul(&b).unwrap();
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a.data()[bi * 6 + i * 3 + k] * b.data()[bi * 6 + k * 2 + j];
                    }
                    assert!((c.data()[bi * 4 + i * 2 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn slice_concat_inverse() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64).unwrap();
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 5).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
    }

    #[test]
    fn broadcast_and_sum_axis() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = x.broadcast_to(&[2, 2, 3]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(x.broadcast_to(&[2, 2]).is_err());
        let s = y.sum_axis(0).unwrap();
        assert_eq!(s.shape(), &[1, 2, 3]);
        assert_eq!(s.data(), &[2.0, 4.0, 6.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn transpose_swaps_last_axes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let (y, _) = x.layer_norm_last_axis(0.0).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}
