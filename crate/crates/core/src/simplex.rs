//! Probability-simplex vector.

use crate::{CoreError, Real};

/// A vector on the probability simplex: entries in [0, 1] summing to 1.
///
/// The sum tolerance scales with the scalar's epsilon so the invariant is
/// checkable for both f32 and f64; at f64 it is the 1e-12 contract.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexVector<T> {
    values: Vec<T>,
}

impl<T: Real> SimplexVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, CoreError> {
        if values.is_empty() {
            return Err(CoreError::EmptyInput("SimplexVector::new"));
        }
        let tol = Self::sum_tolerance(values.len());
        let mut sum = T::zero();
        for &v in &values {
            if !v.is_finite() || v < T::zero() || v > T::one() {
                return Err(CoreError::Simplex(format!("entry {v} outside [0, 1]")));
            }
            sum += v;
        }
        if (sum - T::one()).abs() > tol {
            return Err(CoreError::Simplex(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self { values })
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self, CoreError> {
        if n == 0 {
            return Err(CoreError::EmptyInput("SimplexVector::uniform"));
        }
        let w = T::one() / T::cast(n as f64);
        Self::new(vec![w; n])
    }

    /// Point mass on outcome `i` of `n`.
    pub fn one_hot(n: usize, i: usize) -> Result<Self, CoreError> {
        if i >= n {
            return Err(CoreError::Dimension(format!("one_hot index {i} >= {n}")));
        }
        let mut v = vec![T::zero(); n];
        v[i] = T::one();
        Self::new(v)
    }

    fn sum_tolerance(n: usize) -> T {
        let fp = T::epsilon() * T::cast(4.0 * n as f64);
        fp.max(T::cast(1e-12))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize) -> T {
        self.values[i]
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}
