//! The gate zoo: six routing mechanisms behind one output type. Each gate
//! scores every token against every expert, selects Top-K (ties broken by
//! lower expert index), and reports any auxiliary loss.

use crate::error::{Error, Result};
use confsmoe_core::ops::{entropy_of_probs, sigmoid, softmax_rows};
use confsmoe_core::Mat;
use serde::{Deserialize, Serialize};

/// Router selector; serialized in configs as lowercase strings.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Softmax,
    #[serde(rename = "softmax_lb")]
    SoftmaxLoadBalanced,
    Mean,
    Gaussian,
    Laplacian,
    #[serde(rename = "confnet")]
    ConfNet,
}

impl GateKind {
    pub const ALL: [GateKind; 6] = [
        GateKind::Softmax,
        GateKind::SoftmaxLoadBalanced,
        GateKind::Mean,
        GateKind::Gaussian,
        GateKind::Laplacian,
        GateKind::ConfNet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GateKind::Softmax => "softmax",
            GateKind::SoftmaxLoadBalanced => "softmax_lb",
            GateKind::Mean => "mean",
            GateKind::Gaussian => "gaussian",
            GateKind::Laplacian => "laplacian",
            GateKind::ConfNet => "confnet",
        }
    }
}

/// Distance metric for the embedding-similarity gates.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DistanceMetric {
    /// Laplacian gate: L1 distance.
    L1,
    /// Gaussian gate: halved squared Euclidean distance.
    L2Sq,
}

/// Per-token routing scores, Top-K selection, and any auxiliary loss.
#[derive(Clone, Debug)]
pub struct GateOutput {
    pub kind: GateKind,
    /// tokens × N. Simplex rows for the softmax-family gates; independent
    /// (0,1) confidences for ConfNet.
    pub scores: Mat,
    /// Per token: K distinct expert indices in descending score order.
    pub topk: Vec<Vec<usize>>,
    pub aux_loss: Option<f64>,
}

impl GateOutput {
    pub fn num_tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.cols()
    }

    /// Combining weight of the expert at `slot` for `token`: the raw score
    /// for score-carrying gates, 1/K for the mean gate.
    pub fn combine_weight(&self, token: usize, slot: usize) -> f64 {
        let k = self.topk[token].len();
        match self.kind {
            GateKind::Mean => 1.0 / k as f64,
            _ => self.scores[(token, self.topk[token][slot])],
        }
    }
}

/// Per-expert confidence heads: one row of weights plus a bias per expert.
#[derive(Clone, Debug)]
pub struct ConfNetPool {
    /// N × d; row i is the weight vector of U_i.
    pub units: Mat,
    /// 1 × N biases.
    pub bias: Mat,
}

impl ConfNetPool {
    pub fn num_experts(&self) -> usize {
        self.units.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.units.cols()
    }

    /// sigmoid(U_i(h)) for one token row.
    pub fn confidence(&self, h: &[f64], expert: usize) -> f64 {
        let w = self.units.row(expert);
        let v: f64 = w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + self.bias[(0, expert)];
        sigmoid(v)
    }
}

/// Learnable per-expert embeddings for the distance gates.
#[derive(Clone, Debug)]
pub struct ExpertEmbeddingTable {
    /// N × d; row i is e_i.
    pub embeddings: Mat,
}

impl ExpertEmbeddingTable {
    pub fn num_experts(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Descending-score Top-K with lower-index tie-break.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "top-k must satisfy 1 <= K <= N, got K={k}, N={n}"
        )));
    }
    Ok(())
}

fn topk_per_row(scores: &Mat, k: usize) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|t| select_topk(scores.row(t), k))
        .collect()
}

/// Softmax router: scores = softmax(h · router) per token.
pub fn gate_softmax(h: &Mat, router: &Mat, k: usize) -> Result<GateOutput> {
    check_k(k, router.cols())?;
    if h.cols() != router.rows() {
        return Err(Error::Config(format!(
            "router expects {} features, tokens have {}",
            router.rows(),
            h.cols()
        )));
    }
    let scores = softmax_rows(&h.matmul(router));
    let topk = topk_per_row(&scores, k);
    Ok(GateOutput {
        kind: GateKind::Softmax,
        scores,
        topk,
        aux_loss: None,
    })
}

/// Softmax router plus the entropy-reciprocal load-balance loss, computed
/// over all N scores regardless of K.
pub fn gate_softmax_load_balanced(h: &Mat, router: &Mat, k: usize) -> Result<GateOutput> {
    let mut out = gate_softmax(h, router, k)?;
    out.kind = GateKind::SoftmaxLoadBalanced;
    let rows = out.scores.rows();
    let mut total = 0.0;
    for t in 0..rows {
        total += 1.0 / entropy_of_probs(out.scores.row(t));
    }
    out.aux_loss = Some(total / rows as f64);
    Ok(out)
}

/// Mean gate: selection by an auxiliary softmax router, combining weights
/// forced to 1/K.
pub fn gate_mean(h: &Mat, router: &Mat, k: usize) -> Result<GateOutput> {
    let mut out = gate_softmax(h, router, k)?;
    out.kind = GateKind::Mean;
    Ok(out)
}

/// Distance gate: scores = softmax_i(-dist(h, e_i) / τ); Laplacian uses L1,
/// Gaussian halved squared L2.
pub fn gate_distance(
    h: &Mat,
    table: &ExpertEmbeddingTable,
    k: usize,
    metric: DistanceMetric,
    temperature: f64,
) -> Result<GateOutput> {
    let n = table.num_experts();
    check_k(k, n)?;
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "distance gate temperature must be > 0, got {temperature}"
        )));
    }
    if h.cols() != table.embeddings.cols() {
        return Err(Error::Config(format!(
            "embedding dim {} does not match token dim {}",
            table.embeddings.cols(),
            h.cols()
        )));
    }
    let logits = Mat::from_fn(h.rows(), n, |t, i| {
        let tok = h.row(t);
        let e = table.embeddings.row(i);
        let d = match metric {
            DistanceMetric::L1 => tok.iter().zip(e).map(|(a, b)| (a - b).abs()).sum::<f64>(),
            DistanceMetric::L2Sq => {
                tok.iter()
                    .zip(e)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / 2.0
            }
        };
        -d / temperature
    });
    let scores = softmax_rows(&logits);
    let topk = topk_per_row(&scores, k);
    Ok(GateOutput {
        kind: match metric {
            DistanceMetric::L1 => GateKind::Laplacian,
            DistanceMetric::L2Sq => GateKind::Gaussian,
        },
        scores,
        topk,
        aux_loss: None,
    })
}

/// Confidence gate: c_i = sigmoid(U_i(h)) for every expert; Top-K by the
/// confidences themselves, which also serve as unnormalized combining
/// weights. The confidence loss needs p_t and is computed by the trainer.
pub fn gate_confnet(h: &Mat, pool: &ConfNetPool, k: usize) -> Result<GateOutput> {
    let n = pool.num_experts();
    check_k(k, n)?;
    if h.cols() != pool.input_dim() {
        return Err(Error::Config(format!(
            "confnet expects {} features, tokens have {}",
            pool.input_dim(),
            h.cols()
        )));
    }
    let logits = h.matmul_nt(&pool.units).add_row_broadcast(&pool.bias);
    let scores = logits.map(sigmoid);
    let topk = topk_per_row(&scores, k);
    Ok(GateOutput {
        kind: GateKind::ConfNet,
        scores,
        topk,
        aux_loss: None,
    })
}

/// Mean squared gap between selected confidences and the (detached)
/// true-class probability p_t, over all (token, selected-expert) pairs.
pub fn confidence_loss(confidences: &[Vec<f64>], p_t: &[f64], k: usize) -> Result<f64> {
    if confidences.len() != p_t.len() {
        return Err(Error::Config(format!(
            "{} confidence rows vs {} p_t entries",
            confidences.len(),
            p_t.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::Config("confidence_loss on empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &p) in confidences.iter().zip(p_t) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("p_t {p} outside [0, 1]")));
        }
        if row.len() != k {
            return Err(Error::Config(format!(
                "expected exactly {k} confidences per token, got {}",
                row.len()
            )));
        }
        for &c in row {
            total += (c - p) * (c - p);
        }
    }
    Ok(total / (confidences.len() * k) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_token(values: &[f64]) -> Mat {
        Mat::row_vector(values)
    }

    #[test]
    fn zero_router_gives_uniform_scores_and_tiebreak() {
        let h = Mat::from_fn(3, 5, |i, j| (i * j) as f64 * 0.3 - 0.5);
        let router = Mat::zeros(5, 4);
        let out = gate_softmax(&h, &router, 2).unwrap();
        for t in 0..3 {
            for &s in out.scores.row(t) {
                assert!((s - 0.25).abs() < 1e-15);
            }
            assert_eq!(out.topk[t], vec![0, 1]);
        }
        assert!(out.aux_loss.is_none());
    }

    #[test]
    fn topk_is_argsort_descending() {
        let scores = [0.1, 2.0, 0.5];
        assert_eq!(select_topk(&scores, 2), vec![1, 2]);
        assert_eq!(select_topk(&scores, 3), vec![1, 2, 0]);
    }

    #[test]
    fn softmax_gate_matches_oracle_scores() {
        // logits [1,2,3] via identity router
        let h = single_token(&[1.0, 2.0, 3.0]);
        let router = Mat::identity(3);
        let out = gate_softmax(&h, &router, 1).unwrap();
        let expected = [
            0.090030573170380458,
            0.24472847105479765,
            0.6652409557748219,
        ];
        for (a, e) in out.scores.row(0).iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(out.topk[0], vec![2]);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let h = single_token(&[0.0, 0.0]);
        let router = Mat::zeros(2, 4);
        assert!(gate_softmax(&h, &router, 5).is_err());
        assert!(gate_softmax(&h, &router, 0).is_err());
    }

    #[test]
    fn load_balanced_gate_matches_softmax_and_adds_loss() {
        let h = Mat::from_fn(4, 3, |i, j| ((i + 2) * (j + 1)) as f64 * 0.17);
        let router = Mat::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.13).sin());
        let a = gate_softmax(&h, &router, 2).unwrap();
        let b = gate_softmax_load_balanced(&h, &router, 2).unwrap();
        assert_eq!(a.scores.data(), b.scores.data());
        assert_eq!(a.topk, b.topk);
        assert!(b.aux_loss.is_some());
    }

    #[test]
    fn load_balance_loss_uniform_and_sharp_values() {
        // uniform rows over N=4: 1/H = 1/ln 4
        let h = Mat::zeros(2, 3);
        let router = Mat::zeros(3, 4);
        let out = gate_softmax_load_balanced(&h, &router, 2).unwrap();
        assert!((out.aux_loss.unwrap() - 0.7213475204444817).abs() < 1e-12);

        // near-one-hot row, N=8: max score >= 0.999 forces 1/H > 10
        let mut logits = vec![0.0; 8];
        logits[3] = 20.0;
        let h = single_token(&logits);
        let router = Mat::identity(8);
        let out = gate_softmax_load_balanced(&h, &router, 2).unwrap();
        assert!(out.scores[(0, 3)] >= 0.999);
        assert!(out.aux_loss.unwrap() > 10.0);
    }

    #[test]
    fn mean_gate_weights_are_one_over_k() {
        let h = Mat::from_fn(2, 3, |i, j| (i + j) as f64);
        let router = Mat::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.21);
        for k in 1..=4 {
            let out = gate_mean(&h, &router, k).unwrap();
            for t in 0..2 {
                for slot in 0..k {
                    assert_eq!(out.combine_weight(t, slot), 1.0 / k as f64);
                }
            }
        }
    }

    #[test]
    fn distance_gate_zero_distance_wins_and_symmetry() {
        let e = ExpertEmbeddingTable {
            embeddings: Mat::from_vec(3, 2, vec![5.0, 5.0, 1.0, 2.0, -4.0, 0.0]).unwrap(),
        };
        let h = single_token(&[1.0, 2.0]);
        for metric in [DistanceMetric::L1, DistanceMetric::L2Sq] {
            let out = gate_distance(&h, &e, 1, metric, 1.0).unwrap();
            assert_eq!(out.topk[0], vec![1]);
        }
        // equidistant embeddings -> uniform scores
        let e = ExpertEmbeddingTable {
            embeddings: Mat::from_vec(4, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0])
                .unwrap(),
        };
        let h = single_token(&[0.0, 0.0]);
        let out = gate_distance(&h, &e, 2, DistanceMetric::L2Sq, 1.0).unwrap();
        for &s in out.scores.row(0) {
            assert!((s - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn distance_gate_matches_high_precision_oracle() {
        let e = ExpertEmbeddingTable {
            embeddings: Mat::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5]).unwrap(),
        };
        let h = single_token(&[0.3, -0.2]);
        let out = gate_distance(&h, &e, 1, DistanceMetric::L1, 1.0).unwrap();
        let expected = [
            0.6803984111126328,
            0.16778418245106825,
            0.15181740643629895,
        ];
        for (a, ex) in out.scores.row(0).iter().zip(expected) {
            assert!((a - ex).abs() < 1e-15, "{a} vs {ex}");
        }
        let out = gate_distance(&h, &e, 1, DistanceMetric::L2Sq, 1.0).unwrap();
        let expected = [
            0.5664547346613359,
            0.23030330872971067,
            0.20324195660895348,
        ];
        for (a, ex) in out.scores.row(0).iter().zip(expected) {
            assert!((a - ex).abs() < 1e-15, "{a} vs {ex}");
        }
    }

    #[test]
    fn distance_gate_rejects_bad_temperature() {
        let e = ExpertEmbeddingTable {
            embeddings: Mat::zeros(2, 2),
        };
        let h = single_token(&[0.0, 0.0]);
        assert!(gate_distance(&h, &e, 1, DistanceMetric::L1, 0.0).is_err());
        assert!(gate_distance(&h, &e, 1, DistanceMetric::L1, -1.0).is_err());
    }

    #[test]
    fn confnet_zero_pool_and_monotonicity() {
        let pool = ConfNetPool {
            units: Mat::zeros(4, 3),
            bias: Mat::zeros(1, 4),
        };
        let h = single_token(&[0.4, -0.2, 0.9]);
        let out = gate_confnet(&h, &pool, 2).unwrap();
        for &c in out.scores.row(0) {
            assert_eq!(c, 0.5);
        }
        assert_eq!(out.topk[0], vec![0, 1]);

        // a unit aligned with h dominates
        let mut units = Mat::zeros(4, 3);
        for (j, &v) in [0.4, -0.2, 0.9].iter().enumerate() {
            units[(2, j)] = 10.0 * v;
        }
        let pool = ConfNetPool {
            units,
            bias: Mat::zeros(1, 4),
        };
        let out = gate_confnet(&h, &pool, 1).unwrap();
        assert_eq!(out.topk[0], vec![2]);
    }

    #[test]
    fn confnet_matches_sigmoid_oracle() {
        let units = Mat::from_vec(
            4,
            4,
            vec![
                0.2, -0.1, 0.05, 0.4, //
                -0.3, 0.25, 0.1, -0.05, //
                0.0, 0.0, 0.0, 0.0, //
                0.5, 0.5, -0.5, 0.5,
            ],
        )
        .unwrap();
        let bias = Mat::from_vec(1, 4, vec![0.1, -0.2, 0.0, 0.3]).unwrap();
        let pool = ConfNetPool { units, bias };
        let h = single_token(&[1.0, -0.5, 0.25, 2.0]);
        let out = gate_confnet(&h, &pool, 2).unwrap();
        let expected = [
            0.7617866810463009,
            0.3318122278318339,
            0.5,
            0.8061210621761401,
        ];
        for (i, e) in expected.iter().enumerate() {
            assert!((out.scores[(0, i)] - e).abs() < 1e-15);
            assert!((pool.confidence(&[1.0, -0.5, 0.25, 2.0], i) - e).abs() < 1e-15);
        }
        assert_eq!(out.topk[0], vec![3, 0]);
    }

    #[test]
    fn confnet_pool_size_mismatch_is_config_error() {
        let pool = ConfNetPool {
            units: Mat::zeros(4, 3),
            bias: Mat::zeros(1, 4),
        };
        let h = single_token(&[0.0, 0.0]); // wrong feature dim
        assert!(gate_confnet(&h, &pool, 2).is_err());
    }

    #[test]
    fn confidence_loss_examples() {
        // c == p_t everywhere -> 0
        let c = vec![vec![0.7, 0.7], vec![0.2, 0.2]];
        let p = vec![0.7, 0.2];
        assert_eq!(confidence_loss(&c, &p, 2).unwrap(), 0.0);
        // c = [1,1], p_t = 0, one token, K=2 -> 1.0
        let c = vec![vec![1.0, 1.0]];
        assert_eq!(confidence_loss(&c, &[0.0], 2).unwrap(), 1.0);
        // wrong K
        assert!(confidence_loss(&[vec![0.5]], &[0.5], 2).is_err());
        // p_t outside [0,1]
        assert!(confidence_loss(&[vec![0.5, 0.5]], &[1.5], 2).is_err());
    }
}
