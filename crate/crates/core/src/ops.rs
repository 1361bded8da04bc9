//! Elementwise nonlinearities and their analytic derivatives.

use crate::{CoreError, DenseMatrix, Real, SimplexVector};

/// Numerically stable softmax with max-subtraction.
pub fn softmax<T: Real>(u: &[T]) -> Result<SimplexVector<T>, CoreError> {
    if u.is_empty() {
        return Err(CoreError::EmptyInput("softmax"));
    }
    if !u.iter().all(|x| x.is_finite()) {
        return Err(CoreError::NonFinite("softmax input"));
    }
    SimplexVector::new(softmax_slice(u))
}

/// Softmax of one slice without the simplex wrapper. Callers guarantee a
/// nonempty finite input.
pub(crate) fn softmax_slice<T: Real>(u: &[T]) -> Vec<T> {
    let max = u.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut out: Vec<T> = u.iter().map(|&x| (x - max).exp()).collect();
    let sum = out.iter().fold(T::zero(), |a, &b| a + b);
    for x in &mut out {
        *x = *x / sum;
    }
    out
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Real>(m: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let r = softmax_slice(m.row(i));
        out.row_mut(i).copy_from_slice(&r);
    }
    out
}

/// Jacobian of softmax at the output point `g`: `diag(g) - g g^T`.
pub fn softmax_jacobian<T: Real>(g: &SimplexVector<T>) -> DenseMatrix<T> {
    let n = g.len();
    DenseMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { T::one() } else { T::zero() };
        g.get(i) * (delta - g.get(j))
    })
}

/// Shannon entropy (natural log) with the 0·log 0 = 0 convention; tiny
/// positives are clamped before the log so one-hot limits stay finite.
pub fn entropy<T: Real>(g: &SimplexVector<T>) -> T {
    entropy_of_probs(g.values())
}

/// Entropy of a raw probability slice (callers guarantee nonnegativity).
pub fn entropy_of_probs<T: Real>(p: &[T]) -> T {
    let floor = T::cast(1e-300).max(T::min_positive_value());
    let mut h = T::zero();
    for &x in p {
        if x > T::zero() {
            h -= x * x.max(floor).ln();
        }
    }
    h
}

/// Logistic function, saturation-safe on both tails.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

/// Layer normalization over one vector: zero-mean, unit-variance (population
/// variance, stabilized by `eps`), then `gain ⊙ x̂ + bias`.
pub fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<Vec<T>, CoreError> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(CoreError::Dimension(format!(
            "layer_norm lengths: x={}, gain={}, bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(CoreError::EmptyInput("layer_norm"));
    }
    if eps <= T::zero() {
        return Err(CoreError::Dimension("layer_norm eps must be > 0".into()));
    }
    let n = T::cast(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = x
        .iter()
        .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
        / n;
    let inv = T::one() / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&xi, (&g, &b))| g * (xi - mean) * inv + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Simplex;

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let s = softmax(&[0.0f64, 0.0]).unwrap();
        assert_eq!(s.values(), &[0.5, 0.5]);
        for c in [-31.7f64, 0.0, 4.2, 1e4] {
            let s = softmax(&[c, c, c, c]).unwrap();
            for &v in s.values() {
                assert!((v - 0.25).abs() < 1e-15, "c={c}: {v}");
            }
        }
        // shift invariance against the unshifted point
        let a = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        let b = softmax(&[1.0f64 + 123.0, 2.0 + 123.0, 3.0 + 123.0]).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // e^{u_i} / Σ e^{u_j} at u = [1, 2, 3], evaluated at 50 decimal digits
        let s = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        let expected = [
            0.090030573170380458,
            0.24472847105479765,
            0.6652409557748219,
        ];
        for (a, e) in s.values().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn softmax_jacobian_closed_forms() {
        let g = Simplex::new(vec![0.5, 0.5]).unwrap();
        let j = softmax_jacobian(&g);
        assert_eq!(j.data(), &[0.25, -0.25, -0.25, 0.25]);

        let g = Simplex::one_hot(2, 0).unwrap();
        let j = softmax_jacobian(&g);
        assert_eq!(j.max_abs(), 0.0);
    }

    #[test]
    fn softmax_jacobian_rows_and_cols_sum_to_zero() {
        let g = Simplex::new(vec![0.7, 0.2, 0.1]).unwrap();
        let j = softmax_jacobian(&g);
        for i in 0..3 {
            let rs: f64 = j.row(i).iter().sum();
            assert!(rs.abs() < 1e-12);
        }
        let cs = j.col_sums();
        for &c in cs.data() {
            assert!(c.abs() < 1e-12);
        }
        // symmetry
        assert!(j.sub(&j.transpose()).max_abs() < 1e-15);
    }

    #[test]
    fn entropy_extremes_and_direct_value() {
        let u = Simplex::uniform(4).unwrap();
        assert!((entropy(&u) - 1.3862943611198906).abs() < 1e-12);
        let o = Simplex::one_hot(5, 1).unwrap();
        assert_eq!(entropy(&o), 0.0);
        let g = Simplex::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert!((entropy(&g) - 0.8018185525433373).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_contracts() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(100.0f64) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-800.0f64) >= 0.0); // no overflow on the negative tail
        assert!((sigmoid(1.5f64) - 0.8175744761936437).abs() < 1e-15);
        for x in [-3.0f64, -0.4, 0.9, 7.7] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_contracts() {
        let gain = vec![1.0f64; 4];
        let bias = vec![0.0f64; 4];
        // constant vector: eps keeps the output finite and zero
        let y = layer_norm(&[3.0f64; 4], &gain, &bias, 1e-5).unwrap();
        for v in y {
            assert_eq!(v, 0.0);
        }
        // already normalized input passes through as eps -> 0
        let y = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10 && (y[1] + 1.0).abs() < 1e-10);
        // length mismatch
        assert!(layer_norm(&[1.0f64], &[1.0, 1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn layer_norm_moments_on_random_vector() {
        let x: Vec<f64> = (0..8).map(|i| ((i * 37 + 11) % 17) as f64 * 0.83 - 4.0).collect();
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-10).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 8.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}
