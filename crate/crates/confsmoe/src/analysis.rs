//! Numerical materialization of the routing theory: the load-balance
//! gradient in closed form, the gradient-conflict probe, the full MoE-layer
//! Jacobian check, and the PSD audit of `diag(g) - g gᵀ`.

use crate::error::{Error, Result};
use crate::gating::gate_softmax;
use crate::moe::{moe_forward, ExpertPool};
use confsmoe_core::eigen::symmetric_eigenvalues;
use confsmoe_core::fdiff::finite_diff_jacobian;
use confsmoe_core::ops::{entropy, softmax_jacobian};
use confsmoe_core::{Mat, Simplex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One probe result; `conflict_score` is None when either direction is
/// numerically zero (norm < 1e-12).
#[derive(Clone, Debug)]
pub struct ConflictReport {
    pub step: usize,
    pub g_max: f64,
    pub conflict_score: Option<f64>,
    pub h_entropy: f64,
}

/// Probe axis; the routing-score side of the conflict is isolated along the
/// direction that increases the dominant expert's gate score.
#[derive(Copy, Clone, Debug)]
pub enum ProbeDirection {
    DominantExpert,
}

/// Gradient of `1/H(softmax(u))` with respect to the logits, evaluated at
/// the softmax output `g`: `H(g)^{-2} (log g + 1)ᵀ (diag(g) - g gᵀ)`.
/// The sign follows the chain rule d(1/H) = -H^{-2} dH with
/// dH/dg = -(log g + 1); the finite-difference suite pins it.
pub fn load_balance_grad(g: &Simplex) -> Result<Vec<f64>> {
    if g.values().iter().any(|&x| x <= 0.0) {
        return Err(Error::Numerical(
            "load_balance_grad needs a strictly interior distribution".into(),
        ));
    }
    let n = g.len();
    let h = entropy(g);
    let inv_h2 = 1.0 / (h * h);
    let w: Vec<f64> = g.values().iter().map(|&x| x.ln() + 1.0).collect();
    let j = softmax_jacobian(g);
    Ok((0..n)
        .map(|col| inv_h2 * (0..n).map(|row| w[row] * j[(row, col)]).sum::<f64>())
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine between (a) the logit direction that increases the dominant
/// expert's score — the argmax row of J_softmax — and (b) the descent
/// direction of the load loss. Sharp distributions are predicted to give a
/// negative cosine.
pub fn conflict_probe(g: &Simplex, _direction: ProbeDirection, step: usize) -> ConflictReport {
    let h_entropy = entropy(g);
    let g_max_idx = g.argmax();
    let g_max = g.get(g_max_idx);
    let j = softmax_jacobian(g);
    let ascent: Vec<f64> = (0..g.len()).map(|c| j[(g_max_idx, c)]).collect();

    let conflict_score = match load_balance_grad(g) {
        Ok(lb) => {
            let descent: Vec<f64> = lb.iter().map(|x| -x).collect();
            let (na, nb) = (norm(&ascent), norm(&descent));
            if na < 1e-12 || nb < 1e-12 {
                None
            } else {
                let dot: f64 = ascent.iter().zip(&descent).map(|(a, b)| a * b).sum();
                Some(dot / (na * nb))
            }
        }
        Err(_) => None,
    };

    ConflictReport {
        step,
        g_max,
        conflict_score,
        h_entropy,
    }
}

/// Dirichlet(1) draw: normalized iid exponentials, uniform over the simplex.
pub fn sample_simplex(n: usize, rng: &mut ChaCha8Rng) -> Simplex {
    let draws: Vec<f64> = (0..n)
        .map(|_| -(rng.random_range(1e-16..1.0f64)).ln())
        .collect();
    let sum: f64 = draws.iter().sum();
    Simplex::new(draws.iter().map(|x| x / sum).collect()).expect("normalized draw is on the simplex")
}

/// Sharp distribution with `g_max >= floor` at a random dominant index; the
/// remaining mass is spread by a Dirichlet(1) draw.
pub fn sample_sharp_simplex(n: usize, floor: f64, rng: &mut ChaCha8Rng) -> Simplex {
    let g_max = floor + (1.0 - floor - 1e-6) * rng.random_range(0.0..1.0);
    let dominant = rng.random_range(0..n);
    let rest = sample_simplex(n - 1, rng);
    let mut values = Vec::with_capacity(n);
    let mut it = rest.values().iter();
    for i in 0..n {
        if i == dominant {
            values.push(g_max);
        } else {
            values.push((1.0 - g_max) * it.next().unwrap());
        }
    }
    Simplex::new(values).expect("sharp construction stays on the simplex")
}

/// Minimum eigenvalue of `diag(g) - g gᵀ` over random simplex points.
pub fn psd_audit(
    samples: usize,
    n_range: std::ops::RangeInclusive<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("psd_audit needs at least one sample".into()));
    }
    let mut min_eig = f64::INFINITY;
    for _ in 0..samples {
        let n = rng.random_range(*n_range.start()..=*n_range.end());
        let g = sample_simplex(n, rng);
        let eigs = symmetric_eigenvalues(&softmax_jacobian(&g))?;
        min_eig = min_eig.min(eigs[0]);
    }
    Ok(min_eig)
}

/// Builds the full d×d Jacobian of the softmax-gated MoE layer at `h` two
/// ways — analytic composition and central finite differences — and returns
/// the max relative discrepancy. Retries with jittered `h` when the probe
/// sits on a ReLU kink or a selection boundary.
pub fn moe_jacobian_check(
    h: &[f64],
    pool: &ExpertPool,
    router: &Mat,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    const FD_STEP: f64 = 1e-6;
    const MAX_TRIES: usize = 5;
    let mut point = h.to_vec();
    for _ in 0..MAX_TRIES {
        if is_differentiable_at(&point, pool, router, k, FD_STEP)? {
            let analytic = analytic_moe_jacobian(&point, pool, router, k)?;
            let numeric = finite_diff_jacobian(
                |x| {
                    let hm = Mat::row_vector(x);
                    let gate = gate_softmax(&hm, router, k).expect("gate in probe");
                    moe_forward(&hm, &gate, pool)
                        .expect("forward in probe")
                        .row(0)
                        .to_vec()
                },
                &point,
                FD_STEP,
            )?;
            let mut worst = 0.0f64;
            for (a, b) in analytic.data().iter().zip(numeric.data()) {
                let denom = a.abs().max(b.abs()).max(1e-6);
                worst = worst.max((a - b).abs() / denom);
            }
            return Ok(worst);
        }
        for x in &mut point {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    Err(Error::Numerical(format!(
        "no differentiable probe point found after {MAX_TRIES} jitters"
    )))
}

/// A probe point is safe when the Top-K selection and every selected
/// expert's ReLU activation pattern are stable under per-coordinate
/// finite-difference steps (no kink or selection boundary inside the probe).
fn is_differentiable_at(
    h: &[f64],
    pool: &ExpertPool,
    router: &Mat,
    k: usize,
    step: f64,
) -> Result<bool> {
    let activation_pattern = |point: &[f64]| -> Result<(Vec<usize>, Vec<Vec<bool>>)> {
        let hm = Mat::row_vector(point);
        let gate = gate_softmax(&hm, router, k)?;
        let topk = gate.topk[0].clone();
        let pattern = topk
            .iter()
            .map(|&expert| {
                let z = hm
                    .matmul(&pool.experts[expert].weight)
                    .add_row_broadcast(&pool.experts[expert].bias);
                z.data().iter().map(|&v| v > 0.0).collect()
            })
            .collect();
        Ok((topk, pattern))
    };
    let base = activation_pattern(h)?;
    let mut probe = h.to_vec();
    for i in 0..h.len() {
        for sign in [1.0, -1.0] {
            probe[i] = h[i] + sign * step;
            if activation_pattern(&probe)? != base {
                return Ok(false);
            }
        }
        probe[i] = h[i];
    }
    Ok(true)
}

/// Analytic Jacobian entry (j, l) = δ_jl + Σ_{i ∈ topk} [ g_i·relu'(z_i)_j·W_i[l][j]
/// + (∂g_i/∂h_l)·relu(z_i)_j ], with ∂g_i/∂h_l = Σ_a J_softmax[i][a]·R[l][a].
fn analytic_moe_jacobian(h: &[f64], pool: &ExpertPool, router: &Mat, k: usize) -> Result<Mat> {
    let d = h.len();
    let hm = Mat::row_vector(h);
    let gate = gate_softmax(&hm, router, k)?;
    let g = Simplex::new(gate.scores.row(0).to_vec())
        .map_err(Error::Core)?;
    let j_soft = softmax_jacobian(&g);

    let mut jac = Mat::identity(d);
    for &expert in &gate.topk[0] {
        let w = &pool.experts[expert].weight;
        let z = hm.matmul(w).add_row_broadcast(&pool.experts[expert].bias);
        let gi = gate.scores[(0, expert)];
        for jcol in 0..d {
            let active = z[(0, jcol)] > 0.0;
            let y = z[(0, jcol)].max(0.0);
            for l in 0..d {
                let mut entry = 0.0;
                if active {
                    entry += gi * w[(l, jcol)];
                }
                // routing-score term: dg_i/dh_l · y_j
                let dg: f64 = (0..router.cols())
                    .map(|a| j_soft[(expert, a)] * router[(l, a)])
                    .sum();
                entry += dg * y;
                jac[(jcol, l)] += entry;
            }
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use confsmoe_core::fdiff::{finite_diff_grad, max_rel_error};
    use confsmoe_core::ops::softmax;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn load_balance_grad_vanishes_at_uniform() {
        for n in [2, 4, 8, 16] {
            let g = Simplex::uniform(n).unwrap();
            let grad = load_balance_grad(&g).unwrap();
            for v in grad {
                assert!(v.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn load_balance_grad_matches_finite_differences() {
        let g = Simplex::new(vec![0.98, 0.01, 0.01]).unwrap();
        let u: Vec<f64> = g.values().iter().map(|x| x.ln()).collect();
        let numeric = finite_diff_grad(
            |v| 1.0 / entropy(&softmax(v).unwrap()),
            &u,
            1e-6,
        )
        .unwrap();
        let analytic = load_balance_grad(&g).unwrap();
        assert!(max_rel_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn load_balance_grad_two_expert_hand_value() {
        // chain rule by hand at g = [0.9, 0.1] gives ±1.8712357706208142
        let g = Simplex::new(vec![0.9, 0.1]).unwrap();
        let grad = load_balance_grad(&g).unwrap();
        assert!((grad[0] - 1.8712357706208142).abs() < 1e-12);
        assert!((grad[1] + 1.8712357706208142).abs() < 1e-12);
        // oracle agreement
        let u = [0.9f64.ln(), 0.1f64.ln()];
        let numeric =
            finite_diff_grad(|v| 1.0 / entropy(&softmax(v).unwrap()), &u, 1e-6).unwrap();
        assert!(max_rel_error(&grad, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn load_balance_grad_rejects_boundary() {
        let g = Simplex::one_hot(3, 0).unwrap();
        assert!(load_balance_grad(&g).is_err());
    }

    #[test]
    fn conflict_probe_uniform_is_null() {
        let g = Simplex::uniform(6).unwrap();
        let report = conflict_probe(&g, ProbeDirection::DominantExpert, 0);
        assert!(report.conflict_score.is_none());
        assert!((report.h_entropy - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conflict_probe_sharp_is_negative() {
        let g = Simplex::new(vec![0.98, 0.01, 0.01]).unwrap();
        let report = conflict_probe(&g, ProbeDirection::DominantExpert, 0);
        assert!(report.conflict_score.unwrap() < 0.0);
        assert!((report.g_max - 0.98).abs() < 1e-15);

        // near-one-hot over N=8: strongly negative
        let mut vals = vec![1e-4; 8];
        vals[3] = 1.0 - 7e-4;
        let g = Simplex::new(vals).unwrap();
        let report = conflict_probe(&g, ProbeDirection::DominantExpert, 1);
        assert!(report.conflict_score.unwrap() < -0.5);
    }

    #[test]
    fn psd_audit_minimum_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let min_eig = psd_audit(300, 2..=16, &mut rng).unwrap();
        assert!(min_eig >= -1e-10, "{min_eig}");

        // closed forms: one-hot -> all-zero matrix; uniform N=2 -> {0, 1/2}
        let one_hot = Simplex::one_hot(4, 1).unwrap();
        let eigs = symmetric_eigenvalues(&softmax_jacobian(&one_hot)).unwrap();
        assert!(eigs.iter().all(|e| e.abs() < 1e-15));
        let uni = Simplex::uniform(2).unwrap();
        let eigs = symmetric_eigenvalues(&softmax_jacobian(&uni)).unwrap();
        assert!(eigs[0].abs() < 1e-14 && (eigs[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn moe_jacobian_zero_experts_is_identity() {
        let pool = ExpertPool {
            experts: (0..3)
                .map(|_| crate::moe::Expert {
                    weight: Mat::zeros(3, 3),
                    bias: Mat::zeros(1, 3),
                })
                .collect(),
        };
        let router = Mat::from_fn(3, 3, |i, j| ((i + j) as f64 * 0.3).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = moe_jacobian_check(&[0.3, -0.4, 0.8], &pool, &router, 2, &mut rng).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn moe_jacobian_random_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..10 {
            let d = 3 + (trial % 2);
            let n = 4;
            let pool = ExpertPool::init(n, d, &mut rng);
            let router = Mat::from_fn(d, n, |_, _| rng.random_range(-0.8..0.8));
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = moe_jacobian_check(&h, &pool, &router, 2, &mut rng).unwrap();
            assert!(err <= 1e-5, "trial {trial}: {err}");
        }
    }
}
