//! Flat parameter vectors and the few dense kernels built on them.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Model parameters, or a difference of two parameter sets, flattened into a
/// single contiguous vector. All layers of a model live in one vector so that
/// similarity between updates is measured over the whole model.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector<T>(Vec<T>);

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self(data)
    }

    pub fn filled(len: usize, value: T) -> Self {
        Self(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| x.is_zero())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> T {
        self.0.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// `self += alpha * x`. Lengths must already agree.
    pub fn axpy(&mut self, alpha: T, x: &Self) {
        assert_eq!(self.len(), x.len(), "axpy length mismatch");
        for (a, &b) in self.0.iter_mut().zip(&x.0) {
            *a = *a + alpha * b;
        }
    }

    /// `self += x`. Lengths must already agree.
    pub fn add_assign(&mut self, x: &Self) {
        assert_eq!(self.len(), x.len(), "add length mismatch");
        for (a, &b) in self.0.iter_mut().zip(&x.0) {
            *a = *a + b;
        }
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len(self, other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect()))
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        check_len(self, other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect()))
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self(self.0.iter().map(|&x| alpha * x).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self(self.0.iter().map(|&x| f(x)).collect())
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        check_len(self, other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

impl<T> Index<usize> for ParamVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for ParamVector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

impl<T> From<Vec<T>> for ParamVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

fn check_len<T: Scalar>(a: &ParamVector<T>, b: &ParamVector<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("parameter vector"));
    }
    Ok(())
}

/// Inner product. This is the similarity used for attention scores.
pub fn dot<T: Scalar>(a: &ParamVector<T>, b: &ParamVector<T>) -> Result<T> {
    check_len(a, b)?;
    Ok(dot_unchecked(a.as_slice(), b.as_slice()))
}

pub(crate) fn dot_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Linear combination `sum_j coeffs[j] * vecs[j]`, accumulated in list order.
pub fn combine<T: Scalar, V>(coeffs: &[T], vecs: &[V]) -> Result<ParamVector<T>>
where
    V: AsRef<ParamVector<T>>,
{
    if coeffs.is_empty() || vecs.is_empty() {
        return Err(Error::Empty("combine inputs"));
    }
    if coeffs.len() != vecs.len() {
        return Err(Error::DimensionMismatch {
            left: coeffs.len(),
            right: vecs.len(),
        });
    }
    let len = vecs[0].as_ref().len();
    if len == 0 {
        return Err(Error::Empty("parameter vector"));
    }
    let mut out = ParamVector::zeros(len);
    for (&c, v) in coeffs.iter().zip(vecs) {
        let v = v.as_ref();
        if v.len() != len {
            return Err(Error::DimensionMismatch {
                left: len,
                right: v.len(),
            });
        }
        out.axpy(c, v);
    }
    Ok(out)
}

/// Uniform mean of equally sized vectors, as `combine` with weights `1/n`.
pub fn mean<T: Scalar, V: AsRef<ParamVector<T>>>(vecs: &[V]) -> Result<ParamVector<T>> {
    let w = T::one() / T::of_usize(vecs.len().max(1));
    combine(&vec![w; vecs.len()], vecs)
}

impl<T> AsRef<ParamVector<T>> for ParamVector<T> {
    fn as_ref(&self) -> &ParamVector<T> {
        self
    }
}

/// Softmax with the maximum subtracted before exponentiation, so adding a
/// constant to every score leaves the output unchanged.
pub fn softmax_stable<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores"));
    }
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
