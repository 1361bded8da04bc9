//! Cyclic Jacobi eigensolver for small symmetric matrices (N ≤ 16 in
//! practice; nothing here assumes a bound but the cost is O(sweeps · n³)).

use crate::{CoreError, DenseMatrix, Real};

const MAX_SWEEPS: usize = 64;

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues<T: Real>(m: &DenseMatrix<T>) -> Result<Vec<T>, CoreError> {
    let n = m.rows();
    if n != m.cols() {
        return Err(CoreError::Dimension(format!(
            "eigensolver needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if n == 0 {
        return Err(CoreError::EmptyInput("symmetric_eigenvalues"));
    }
    let sym_tol = T::cast(1e-9) * (T::one() + m.max_abs());
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > sym_tol {
                return Err(CoreError::Dimension(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mut a = m.clone();
    let tol = T::epsilon() * T::cast(n as f64) * (T::one() + m.max_abs());
    for sweep in 0..MAX_SWEEPS {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off <= tol {
            let mut eigs: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
            eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
            return Ok(eigs);
        }
        let _ = sweep;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                // Jacobi rotation zeroing a[p][q]
                let theta = (a[(q, q)] - a[(p, p)]) / (T::cast(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(CoreError::NoConvergence(MAX_SWEEPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_jacobian;
    use crate::{Mat, Simplex};

    #[test]
    fn diagonal_matrix_eigenvalues() {
        let m = Mat::from_vec(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let e = symmetric_eigenvalues(&m).unwrap();
        assert_eq!(e, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[.25, -.25], [-.25, .25]] has eigenvalues {0, 0.5}
        let g = Simplex::uniform(2).unwrap();
        let j = softmax_jacobian(&g);
        let e = symmetric_eigenvalues(&j).unwrap();
        assert!(e[0].abs() < 1e-14);
        assert!((e[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(symmetric_eigenvalues(&m).is_err());
    }

    #[test]
    fn trace_and_psd_of_softmax_jacobian() {
        let g = Simplex::new(vec![0.6, 0.25, 0.1, 0.05]).unwrap();
        let j = softmax_jacobian(&g);
        let eigs = symmetric_eigenvalues(&j).unwrap();
        let trace: f64 = (0..4).map(|i| j[(i, i)]).sum();
        let sum: f64 = eigs.iter().sum();
        assert!((trace - sum).abs() < 1e-12);
        assert!(eigs[0] >= -1e-12);
    }
}
