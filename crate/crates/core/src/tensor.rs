//! Dense row-major tensors and the raw kernels the tape is built from.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Real scalar type a tensor can hold. Implemented for `f32` (training) and
/// `f64` (verification).
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense value with a shape. `product(shape) == data.len()` always holds;
/// a rank-0 tensor (empty shape) is a scalar with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to `F`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::dim("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

/// `out[n,p] = a[n,m] · b[m,p]`, accumulating each output over `m` in index
/// order (the order is fixed so that results are reproducible bit for bit).
pub(crate) fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        row.iter_mut().for_each(|x| *x = F::zero());
        for k in 0..m {
            let aik = a[i * m + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
}

/// `out[m,p] += a[n,m]ᵀ · g[n,p]`
pub(crate) fn matmul_at_b_acc<F: Scalar>(a: &[F], g: &[F], out: &mut [F], n: usize, m: usize, p: usize) {
    for i in 0..n {
        for k in 0..m {
            let aik = a[i * m + k];
            let orow = &mut out[k * p..(k + 1) * p];
            for (o, &gij) in orow.iter_mut().zip(&g[i * p..(i + 1) * p]) {
                *o = *o + aik * gij;
            }
        }
    }
}

/// `out[n,m] += g[n,p] · b[m,p]ᵀ`
pub(crate) fn matmul_a_bt_acc<F: Scalar>(g: &[F], b: &[F], out: &mut [F], n: usize, m: usize, p: usize) {
    for i in 0..n {
        for k in 0..m {
            let mut s = F::zero();
            for j in 0..p {
                s = s + g[i * p + j] * b[k * p + j];
            }
            out[i * m + k] = out[i * m + k] + s;
        }
    }
}

/// Row-wise softmax over rows of length `width`. `-inf` entries map to exactly
/// zero; a row with no finite entry is an error.
pub(crate) fn softmax_rows<F: Scalar>(x: &[F], width: usize) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); x.len()];
    for (r, (row, orow)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        if max == F::neg_infinity() || max.is_nan() {
            return Err(Error::MaskedRow { row: r });
        }
        let mut sum = F::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Pairwise summation; the split points depend only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(2.5f64);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn at_uses_row_major_order() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
