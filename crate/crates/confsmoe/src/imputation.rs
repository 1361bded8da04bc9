//! Two-stage missing-modality pipeline: pre-imputation from the modality's
//! own training pool, and post-imputation refinement with Top-T sparse
//! cross-attention over concatenated expert outputs.

use crate::error::{Error, Result};
use confsmoe_core::ops::softmax_rows;
use confsmoe_core::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Training-instance embeddings of one modality, collected from instances
/// where that modality was observed.
#[derive(Clone, Debug, Default)]
pub struct ModalityPool {
    pub instances: Vec<Mat>,
}

impl ModalityPool {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Shared cross-attention parameters: the Q/K/V maps are shared between all
/// modalities, the divisor B sets Top-T sparsity.
#[derive(Clone, Debug)]
pub struct SparseAttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub ln_gain: Mat,
    pub ln_bias: Mat,
    pub b_sparsity: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Mean of `n` instances sampled uniformly from the pool — without
/// replacement when the pool is large enough, with replacement otherwise.
/// Fresh samples per call give the stochasticity that keeps imputed
/// representations from collapsing to a fixed point.
pub fn pre_impute(pool: &ModalityPool, n: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    if pool.is_empty() {
        return Err(Error::Imputation(
            "modality pool is empty; nothing to sample".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Imputation("sample count n must be >= 1".into()));
    }
    let picks: Vec<usize> = if pool.len() >= n {
        // partial Fisher-Yates for n distinct indices
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    } else {
        (0..n).map(|_| rng.random_range(0..pool.len())).collect()
    };

    let shape = pool.instances[0].shape();
    let mut acc = Mat::zeros(shape.0, shape.1);
    for &p in &picks {
        if pool.instances[p].shape() != shape {
            return Err(Error::Imputation("pool members differ in shape".into()));
        }
        acc.add_assign(&pool.instances[p]);
    }
    Ok(acc.scale(1.0 / n as f64))
}

/// Top-T budget: `floor(s(|M|-1)/B)`, at least 1. Callers clamp to the key
/// length where K is known.
pub fn top_t_count(s: usize, num_modalities: usize, b: usize) -> Result<usize> {
    if num_modalities < 2 {
        return Err(Error::Config(format!(
            "top-T needs at least 2 modalities for cross-modal context, got {num_modalities}"
        )));
    }
    if s == 0 || b == 0 {
        return Err(Error::Config(format!(
            "top-T needs s >= 1 and B >= 1, got s={s}, B={b}"
        )));
    }
    Ok((s * (num_modalities - 1) / b).max(1))
}

/// Indices of the `t` largest entries of a row, ties to the lower index.
fn top_t_indices(row: &[f64], t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("finite attention weights")
            .then(a.cmp(&b))
    });
    idx.truncate(t);
    idx
}

/// The sparse attention map A*: full row softmax of QKᵀ/√d, then keep
/// exactly min(T, keys) largest entries per row and zero the rest, with no
/// renormalization.
pub fn sparse_attention_map(
    m_query: &Mat,
    m_kv: &Mat,
    params: &SparseAttentionParams,
    t: usize,
) -> Result<Mat> {
    let d = params.w_q.rows();
    if m_query.cols() != d || m_kv.cols() != d {
        return Err(Error::Config(format!(
            "attention expects width {d}, got query {} and keys {}",
            m_query.cols(),
            m_kv.cols()
        )));
    }
    let q = m_query.matmul(&params.w_q);
    let k = m_kv.matmul(&params.w_k);
    let scale = 1.0 / (d as f64).sqrt();
    let full = softmax_rows(&q.matmul_nt(&k).scale(scale));
    let keep = t.min(m_kv.rows());
    let mut masked = Mat::zeros(full.rows(), full.cols());
    for r in 0..full.rows() {
        for &c in &top_t_indices(full.row(r), keep) {
            masked[(r, c)] = full[(r, c)];
        }
    }
    Ok(masked)
}

/// Sparse cross-attention output A*·V.
pub fn sparse_cross_attention(
    m_query: &Mat,
    m_kv: &Mat,
    params: &SparseAttentionParams,
    t: usize,
) -> Result<Mat> {
    let a = sparse_attention_map(m_query, m_kv, params, t)?;
    let v = m_kv.matmul(&params.w_v);
    Ok(a.matmul(&v))
}

/// Residual sum of per-available-modality sparse attentions, then LayerNorm.
/// With nothing available, just LayerNorm of the query representation.
pub fn post_impute(
    m_query: &Mat,
    available: &[&Mat],
    params: &SparseAttentionParams,
    t: usize,
) -> Result<Mat> {
    let mut acc = m_query.clone();
    for kv in available {
        acc.add_assign(&sparse_cross_attention(m_query, kv, params, t)?);
    }
    let mut out = Mat::zeros(acc.rows(), acc.cols());
    for r in 0..acc.rows() {
        let y = confsmoe_core::ops::layer_norm(
            acc.row(r),
            params.ln_gain.row(0),
            params.ln_bias.row(0),
            LAYER_NORM_EPS,
        )?;
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

/// `query_idx,key_idx,weight` rows for one attention map, zeros omitted.
pub fn attention_map_csv(a: &Mat) -> String {
    let mut out = String::from("query_idx,key_idx,weight\n");
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            if a[(r, c)] != 0.0 {
                out.push_str(&format!("{},{},{}\n", r, c, crate::runio::fmt_f64(a[(r, c)])));
            }
        }
    }
    out
}
