//! Central finite differences, the gradient oracle every analytic derivative
//! in the workspace is checked against.

use crate::{CoreError, DenseMatrix, Real};

/// Central-difference gradient of a scalar function: entry `i` is
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &[T], h: T) -> Result<Vec<T>, CoreError>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    if h <= T::zero() {
        return Err(CoreError::Oracle("step h must be > 0".into()));
    }
    let two_h = h + h;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::Oracle(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((fp - fm) / two_h);
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector function; entry `(i, j)` is
/// `∂f_i/∂x_j`.
pub fn finite_diff_jacobian<T, F>(
    mut f: F,
    x: &[T],
    h: T,
) -> Result<DenseMatrix<T>, CoreError>
where
    T: Real,
    F: FnMut(&[T]) -> Vec<T>,
{
    if h <= T::zero() {
        return Err(CoreError::Oracle("step h must be > 0".into()));
    }
    let two_h = h + h;
    let mut probe = x.to_vec();
    let mut cols: Vec<Vec<T>> = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        if fp.len() != fm.len() {
            return Err(CoreError::Oracle("inconsistent output length".into()));
        }
        let col: Vec<T> = fp
            .iter()
            .zip(&fm)
            .map(|(&p, &m)| (p - m) / two_h)
            .collect();
        if !col.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Oracle(format!(
                "non-finite evaluation at coordinate {j}"
            )));
        }
        cols.push(col);
    }
    let out_dim = cols.first().map_or(0, Vec::len);
    Ok(DenseMatrix::from_fn(out_dim, x.len(), |i, j| cols[j][i]))
}

/// Max relative discrepancy between two gradients, with an absolute floor so
/// near-zero entries compare absolutely.
pub fn max_rel_error<T: Real>(a: &[T], b: &[T], floor: T) -> T {
    let mut worst = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{entropy, softmax, softmax_jacobian};

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 7.5f64, &[0.3, -0.9, 2.2], 1e-5).unwrap();
        for v in g {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn non_finite_evaluation_is_oracle_error() {
        let f = |x: &[f64]| x[0].ln();
        assert!(finite_diff_grad(f, &[0.0], 1e-7).is_err());
    }

    #[test]
    fn entropy_of_softmax_matches_analytic_chain() {
        // d/du H(softmax(u)) = -(log g + 1)^T J_softmax, two independent paths
        let u = [0.3, -1.2, 0.7, 0.05];
        let f = |v: &[f64]| entropy(&softmax(v).unwrap());
        let numeric = finite_diff_grad(f, &u, 1e-6).unwrap();

        let g = softmax(&u).unwrap();
        let j = softmax_jacobian(&g);
        let w: Vec<f64> = g.values().iter().map(|&x| -(x.ln() + 1.0)).collect();
        let analytic: Vec<f64> = (0..4)
            .map(|col| (0..4).map(|row| w[row] * j[(row, col)]).sum())
            .collect();

        assert!(max_rel_error(&numeric, &analytic, 1e-8) < 1e-6);
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform() {
        // central differences bottom out near |H''| * eps / h ~ 1e-10 here,
        // so the oracle check uses a looser bar than the analytic one
        let u = [0.0; 6];
        let f = |v: &[f64]| entropy(&softmax(v).unwrap());
        let g = finite_diff_grad(f, &u, 1e-6).unwrap();
        for v in g {
            assert!(v.abs() < 1e-8);
        }
    }
}
