//! Dense f64 tensors and a tape-based reverse-mode gradient engine.
//!
//! [`Tensor`] is a plain value: a shape plus contiguous row-major data. The
//! gradient machinery lives in [`Graph`], which records operations on
//! [`Var`] handles and replays them in reverse. Gradient flags and
//! accumulators belong to graph nodes, so a tensor used outside any graph
//! (the frozen teacher, evaluation) never touches a tape.

mod graph;
pub mod io;
pub(crate) mod kernels;

pub use graph::{Backward, Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, CsgError, Result};

/// Floor applied to magnitudes in `log`, `div` and `l2_normalize`.
pub const EPS: f64 = 1e-12;

/// Divisors below this magnitude are rejected outright.
pub const DIV_REJECT: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return dim_err(format!("index {:?} for shape {:?}", index, self.shape));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return dim_err(format!("index {:?} out of bounds for {:?}", index, self.shape));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of a rank-2 tensor, or image `i` of a batch.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return dim_err(format!("outer index {} for shape {:?}", i, self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Self {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| CsgError::Dimension("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return dim_err(format!("stack shape {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        kernels::matmul(self, other)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        kernels::transpose2d(self)
    }

    /// Cross-correlation; see [`Graph::conv2d`] for the accepted layouts.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Self> {
        Ok(kernels::conv2d_forward(self, kernel, bias, stride, padding)?.0)
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        kernels::upsample_nearest(self, factor)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn exp(&self) -> Self {
        self.map(f64::exp)
    }

    pub fn log(&self) -> Self {
        self.map(|v| v.max(EPS).ln())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        kernels::binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        kernels::binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        kernels::binary(self, other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self> {
        kernels::check_divisor(other)?;
        kernels::binary(self, other, |a, b| a / kernels::guard(b))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// Sum over the listed axes, dropping them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        kernels::sum_axes(self, axes)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let count: usize = kernels::validate_axes(self.shape(), axes)?
            .iter()
            .map(|&a| self.shape[a])
            .product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Normalise along the last axis: `v / max(|v|, EPS)`.
    pub fn l2_normalize(&self) -> Self {
        kernels::l2_normalize_rows(self).0
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(CsgError::Dimension(_))
        ));
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let row = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
        assert!(matches!(row.matmul(&row), Err(CsgError::Dimension(_))));
    }

    #[test]
    fn conv_all_ones_and_identity() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        assert_eq!(x.conv2d(&k, None, 1, 0).unwrap().data(), &[9.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random_normal(&[1, 4, 5], 1.0, &mut rng);
        let id = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(x.conv2d(&id, None, 1, 0).unwrap(), x);

        let big = Tensor::ones(&[1, 1, 5, 5]);
        assert!(matches!(
            Tensor::ones(&[1, 3, 3]).conv2d(&big, None, 1, 0),
            Err(CsgError::Dimension(_))
        ));
        // padding makes the same kernel legal
        assert!(Tensor::ones(&[1, 3, 3]).conv2d(&big, None, 1, 1).is_ok());
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let y = Tensor::from_vec(vec![0.5, 1.0, 2.0]);
        assert!(y.log().exp().max_abs_diff(&y) < 1e-12);
        let tiny = Tensor::from_vec(vec![1.0, 1e-301, 1.0]);
        assert!(matches!(y.div(&tiny), Err(CsgError::NumericDomain(_))));
    }

    #[test]
    fn normalize_examples() {
        let v = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(v.l2_normalize().data(), &[0.6, 0.8]);
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(z.l2_normalize().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_is_sum_over_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::random_normal(&[4, 4], 1.0, &mut rng);
        assert!((t.mean_all() - t.sum_all() / 16.0).abs() < 1e-15);
        let m = t.mean_axes(&[0, 1]).unwrap();
        assert!((m.item().unwrap() - t.sum_all() / 16.0).abs() < 1e-15);
        let rows = t.sum_axes(&[1]).unwrap();
        assert_eq!(rows.shape(), &[4]);
        assert!((rows.data()[2] - t.data()[8..12].iter().sum::<f64>()).abs() < 1e-15);
    }
}
