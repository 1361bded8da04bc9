//! The expert pool and the sparse MoE layer: route each token through its
//! Top-K experts, combine with the gate's weights under the residual rule
//! `out = h + Σ g_i · E_i(h)`, and keep selection telemetry.

use crate::error::{Error, Result};
use crate::gating::GateOutput;
use confsmoe_core::ops::entropy_of_probs;
use confsmoe_core::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One expert: affine map followed by ReLU, so outputs are entrywise ≥ 0.
#[derive(Clone, Debug)]
pub struct Expert {
    /// d × d.
    pub weight: Mat,
    /// 1 × d.
    pub bias: Mat,
}

impl Expert {
    /// ReLU(h · W + b) over a batch of token rows.
    pub fn apply(&self, h: &Mat) -> Mat {
        h.matmul(&self.weight)
            .add_row_broadcast(&self.bias)
            .map(|x| x.max(0.0))
    }
}

/// N experts sharing input/output dimension d.
#[derive(Clone, Debug)]
pub struct ExpertPool {
    pub experts: Vec<Expert>,
}

impl ExpertPool {
    /// Fan-in uniform init in [-1/√d, 1/√d], zero bias.
    pub fn init(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let experts = (0..n)
            .map(|_| Expert {
                weight: Mat::from_fn(d, d, |_, _| rng.random_range(-bound..bound)),
                bias: Mat::zeros(1, d),
            })
            .collect();
        Self { experts }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.experts.first().map_or(0, |e| e.weight.rows())
    }
}

fn check_moe_shapes(h: &Mat, gate: &GateOutput, pool: &ExpertPool) -> Result<()> {
    if gate.num_tokens() != h.rows() {
        return Err(Error::Config(format!(
            "gate scored {} tokens, batch has {}",
            gate.num_tokens(),
            h.rows()
        )));
    }
    if gate.num_experts() != pool.num_experts() {
        return Err(Error::Config(format!(
            "gate over {} experts, pool has {}",
            gate.num_experts(),
            pool.num_experts()
        )));
    }
    if pool.dim() != h.cols() {
        return Err(Error::Config(format!(
            "experts expect dim {}, tokens have {}",
            pool.dim(),
            h.cols()
        )));
    }
    Ok(())
}

/// Residual MoE forward: per token t, `h_t + Σ_{slot} w_slot · E_{topk[t][slot]}(h_t)`.
pub fn moe_forward(h: &Mat, gate: &GateOutput, pool: &ExpertPool) -> Result<Mat> {
    check_moe_shapes(h, gate, pool)?;
    let slots = moe_expert_outputs(h, gate, pool)?;
    let mut out = h.clone();
    for (slot, mat) in slots.iter().enumerate() {
        for t in 0..h.rows() {
            let w = gate.combine_weight(t, slot);
            let src = mat.row(t);
            let dst = out.row_mut(t);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// The K un-combined expert outputs per token, ordered by selection rank;
/// slot k's matrix row t is `E_{topk[t][k]}(h_t)`.
pub fn moe_expert_outputs(h: &Mat, gate: &GateOutput, pool: &ExpertPool) -> Result<Vec<Mat>> {
    check_moe_shapes(h, gate, pool)?;
    let k = gate.topk.first().map_or(0, Vec::len);
    let mut slots = vec![Mat::zeros(h.rows(), h.cols()); k];
    for t in 0..h.rows() {
        let token = Mat::row_vector(h.row(t));
        for (slot, &expert) in gate.topk[t].iter().enumerate() {
            let y = pool.experts[expert].apply(&token);
            slots[slot].row_mut(t).copy_from_slice(y.row(0));
        }
    }
    Ok(slots)
}

/// Epoch × expert assignment counts, the raw material of collapse
/// diagnostics.
#[derive(Clone, Debug)]
pub struct SelectionTrace {
    num_experts: usize,
    counts: Vec<Vec<u64>>,
}

impl SelectionTrace {
    pub fn new(num_experts: usize) -> Self {
        Self {
            num_experts,
            counts: Vec::new(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_epochs(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self, epoch: usize) -> &[u64] {
        &self.counts[epoch]
    }

    /// Restores a trace from raw per-epoch counts.
    pub fn from_counts(counts: Vec<Vec<u64>>, num_experts: usize) -> Result<Self> {
        if counts.iter().any(|c| c.len() != num_experts) {
            return Err(Error::DataFormat(
                "selection counts rows must cover every expert".into(),
            ));
        }
        Ok(Self {
            num_experts,
            counts,
        })
    }

    /// Adds every (token, slot) assignment of `gate` to `epoch`'s counts.
    /// Epochs must be recorded in nondecreasing order.
    pub fn record(&mut self, gate: &GateOutput, epoch: usize) {
        assert!(
            epoch + 1 >= self.counts.len(),
            "epochs must be nondecreasing"
        );
        while self.counts.len() <= epoch {
            self.counts.push(vec![0; self.num_experts]);
        }
        for row in &gate.topk {
            for &e in row {
                self.counts[epoch][e] += 1;
            }
        }
    }

    fn distribution(&self, epoch: usize) -> Result<Vec<f64>> {
        let counts = self
            .counts
            .get(epoch)
            .ok_or_else(|| Error::Metric(format!("epoch {epoch} not recorded")))?;
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Metric(format!("epoch {epoch} has zero selections")));
        }
        Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Shannon entropy (nats) of the epoch's normalized usage distribution.
    pub fn usage_entropy(&self, epoch: usize) -> Result<f64> {
        Ok(entropy_of_probs(&self.distribution(epoch)?))
    }

    /// Mean total-variation distance between consecutive epochs' usage
    /// distributions; the quantitative form of selection instability.
    pub fn selection_oscillation(&self) -> Result<f64> {
        if self.counts.len() < 2 {
            return Err(Error::Metric(
                "oscillation needs at least 2 recorded epochs".into(),
            ));
        }
        let mut total = 0.0;
        for e in 1..self.counts.len() {
            let p = self.distribution(e - 1)?;
            let q = self.distribution(e)?;
            let tv: f64 = p
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            total += tv;
        }
        Ok(total / (self.counts.len() - 1) as f64)
    }

    /// `epoch,expert_id,count` rows; epochs are 1-based in the file to match
    /// metrics.csv numbering.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,expert_id,count\n");
        for (epoch, counts) in self.counts.iter().enumerate() {
            for (expert, &c) in counts.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", epoch + 1, expert, c));
            }
        }
        out
    }
}

/// Convenience wrapper matching the telemetry op name.
pub fn record_selection(trace: &mut SelectionTrace, gate: &GateOutput, epoch: usize) {
    trace.record(gate, epoch);
}

/// Hand-composed single-token oracle used by tests: explicit loop over the
/// selected experts, no shared code with `moe_forward`.
pub fn moe_forward_single_oracle(
    h: &[f64],
    gate: &GateOutput,
    pool: &ExpertPool,
    token: usize,
) -> Vec<f64> {
    let d = h.len();
    let mut out = h.to_vec();
    for (slot, &expert) in gate.topk[token].iter().enumerate() {
        let w = gate.combine_weight(token, slot);
        let ex = &pool.experts[expert];
        for j in 0..d {
            let mut z = ex.bias[(0, j)];
            for (l, &hv) in h.iter().enumerate() {
                z += hv * ex.weight[(l, j)];
            }
            out[j] += w * z.max(0.0);
        }
    }
    out
}
