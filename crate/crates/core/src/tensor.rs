//! Dense row-major tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking `values.len() == product(shape)` and that
    /// every dimension is positive.
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(&mut f).collect(),
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            S::of(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    /// Number of scalar entries.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> S {
        let sq: Vec<S> = self.values.iter().map(|&v| v * v).collect();
        pairwise_sum(&sq)
    }

    pub fn norm(&self) -> S {
        self.norm_sq().sqrt()
    }

    pub fn sum(&self) -> S {
        pairwise_sum(&self.values)
    }

    pub fn scale(&mut self, k: S) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn scaled(&self, k: S) -> Self {
        let mut out = self.clone();
        out.scale(k);
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: S, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Converts every entry to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

/// Element-wise pairwise sum of equally shaped tensors. The reduction tree
/// depends only on the slice length, so any fixed order reproduces bit for bit.
pub fn sum_tensors<S: Scalar>(ts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    match ts {
        [] => Err(Error::Dimension("sum of zero tensors".into())),
        [t] => Ok((*t).clone()),
        _ => {
            let mid = ts.len() / 2;
            let mut left = sum_tensors(&ts[..mid])?;
            let right = sum_tensors(&ts[mid..])?;
            left.add_assign(&right)?;
            Ok(left)
        }
    }
}
