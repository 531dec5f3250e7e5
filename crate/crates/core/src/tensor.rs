//! Dense row-major `f64` tensors and the few whole-tensor operations the
//! layers are built from.

use std::fmt;

use crate::error::{dim_err, Error, Result};

/// A dense, row-major array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernel outputs; only checks the length.
    pub(crate) fn from_raw(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_raw(shape, vec![0.0; numel(shape)])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_raw(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(&[], vec![value])
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Fills a tensor by calling `f` with each multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::from_raw(shape, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub(crate) fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of range for extent {n}");
                acc * n + i
            })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let k = self.flat_index(idx);
        self.data[k] = value;
    }

    /// Same data, new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self::from_raw(shape, self.data.clone()))
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("{perm:?} is not a permutation of {rank} axes"));
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let out = Self::from_fn(&out_shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            self.data[off]
        });
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_raw(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self::from_raw(
            &self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

/// `x / (1 + |x|)`.
#[inline]
pub fn softsign_scalar(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Derivative of softsign, `1 / (1 + |x|)^2`; equals 1 at the origin.
#[inline]
pub fn softsign_grad_scalar(x: f64) -> f64 {
    let d = 1.0 + x.abs();
    1.0 / (d * d)
}

/// Elementwise softsign.
pub fn softsign(x: &Tensor) -> Tensor {
    x.map(softsign_scalar)
}

/// Sum-product of `a` and `b` over the paired axes `(axis_of_a, axis_of_b)`.
///
/// The result carries the unpaired axes of `a` followed by the unpaired axes
/// of `b`, each group in its original order.
pub fn contract(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let mut used_a = vec![false; a.rank()];
    let mut used_b = vec![false; b.rank()];
    for &(pa, pb) in pairs {
        if pa >= a.rank() || pb >= b.rank() {
            return Err(dim_err!("contraction axis ({pa}, {pb}) out of range"));
        }
        if used_a[pa] || used_b[pb] {
            return Err(dim_err!("contraction axis ({pa}, {pb}) paired twice"));
        }
        if a.shape[pa] != b.shape[pb] {
            return Err(dim_err!(
                "contraction extent mismatch: a axis {pa} = {}, b axis {pb} = {}",
                a.shape[pa],
                b.shape[pb]
            ));
        }
        used_a[pa] = true;
        used_b[pb] = true;
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|&k| !used_b[k]).collect();

    let perm_a: Vec<usize> = free_a.iter().copied().chain(pairs.iter().map(|p| p.0)).collect();
    let perm_b: Vec<usize> = pairs.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
    let a2 = a.permute(&perm_a)?;
    let b2 = b.permute(&perm_b)?;

    let rows: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let inner: usize = pairs.iter().map(|p| a.shape[p.0]).product();
    let cols: usize = free_b.iter().map(|&k| b.shape[k]).product();

    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let arow = &a2.data[r * inner..(r + 1) * inner];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b2.data[k * cols..(k + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let shape: Vec<usize> = free_a
        .iter()
        .map(|&k| a.shape[k])
        .chain(free_b.iter().map(|&k| b.shape[k]))
        .collect();
    Ok(Tensor::from_raw(&shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(Tensor::new(&[2], vec![1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(Tensor::new(&[2], vec![1.0, f64::INFINITY]), Err(Error::Numeric(_))));
        assert!(matches!(Tensor::new(&[3], vec![1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn softsign_values() {
        assert_eq!(softsign_scalar(0.0), 0.0);
        assert_eq!(softsign_scalar(1.0), 0.5);
        assert_eq!(softsign_scalar(-3.0), -0.75);
        assert_eq!(softsign_grad_scalar(0.0), 1.0);
    }

    #[test]
    fn contract_identity_cases() {
        let eye = Tensor::eye(3);
        let v = Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        assert_eq!(contract(&eye, &v, &[(1, 0)]).unwrap(), v);

        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(contract(&a, &Tensor::eye(2), &[(1, 0)]).unwrap(), a);
    }

    #[test]
    fn contract_rejects_extent_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(contract(&a, &b, &[(1, 0)]), Err(Error::Dimension(_))));
    }

    #[test]
    fn contract_4d_against_loops() {
        let (t, m, d) = (3, 4, 2);
        let mut rng = SeededRng::new(11);
        let adj = rng.uniform_tensor(&[t, m, t, m], -1.0, 1.0);
        let h = rng.uniform_tensor(&[t, m, d], -1.0, 1.0);
        let got = contract(&adj, &h, &[(2, 0), (3, 1)]).unwrap();
        assert_eq!(got.shape(), &[t, m, d]);
        let mut worst: f64 = 0.0;
        for i in 0..t {
            for j in 0..m {
                for k in 0..d {
                    let mut acc = 0.0;
                    for a in 0..t {
                        for b in 0..m {
                            acc += adj.get(&[i, j, a, b]) * h.get(&[a, b, k]);
                        }
                    }
                    worst = worst.max((acc - got.get(&[i, j, k])).abs());
                }
            }
        }
        assert!(worst < 1e-12, "max abs diff {worst}");
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = SeededRng::new(3);
        let a = rng.uniform_tensor(&[2, 3, 4], -1.0, 1.0);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), a.get(&[1, 2, 3]));
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), a);
    }

    proptest! {
        #[test]
        fn softsign_is_odd_and_bounded(x in -1e6f64..1e6) {
            prop_assert_eq!(softsign_scalar(-x), -softsign_scalar(x));
            prop_assert!(softsign_scalar(x).abs() < 1.0);
        }

        #[test]
        fn contract_is_linear_in_first_argument(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let a = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
            let a2 = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
            let b = rng.uniform_tensor(&[4, 2], -1.0, 1.0);
            let lhs = contract(&a.add(&a2).unwrap(), &b, &[(1, 0)]).unwrap();
            let rhs = contract(&a, &b, &[(1, 0)]).unwrap()
                .add(&contract(&a2, &b, &[(1, 0)]).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
