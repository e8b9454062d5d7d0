//! Ground-truth references: exact softmax attention and exact per-chunk
//! attention-mass ranking. Deliberately naive — O(s²) double loops with
//! 64-bit accumulation — and kept textually independent of the sparse path
//! it is used to validate.

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("query heads {heads_q} not divisible by kv heads {heads_kv}")]
    BadHeadMapping { heads_q: usize, heads_kv: usize },
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error("chunk size {chunk_size} does not divide key count {keys}")]
    ChunkMisaligned { chunk_size: usize, keys: usize },
}

fn check_heads(
    queries: &[Matrix],
    k_heads: &[Matrix],
) -> Result<usize, OracleError> {
    let heads_q = queries.len();
    let heads_kv = k_heads.len();
    if heads_kv == 0 || heads_q == 0 || heads_q % heads_kv != 0 {
        return Err(OracleError::BadHeadMapping { heads_q, heads_kv });
    }
    let d = k_heads[0].cols();
    for (i, q) in queries.iter().enumerate() {
        if q.cols() != d {
            return Err(OracleError::Shape { what: format!("query head {i} dim {} != {d}", q.cols()) });
        }
        if q.rows() != queries[0].rows() {
            return Err(OracleError::Shape { what: format!("query head {i} row count differs") });
        }
    }
    for (i, k) in k_heads.iter().enumerate() {
        if k.cols() != d || k.rows() != k_heads[0].rows() {
            return Err(OracleError::Shape { what: format!("key head {i} shape differs") });
        }
    }
    Ok(heads_q / heads_kv)
}

/// Softmax weights of one query row over `keys`, restricted to key positions
/// `≤ q_pos`. Returns one f64 weight per key row (zero where masked).
fn attention_row(
    q_row: &[f32],
    keys: &Matrix,
    q_pos: usize,
    k_positions: &[usize],
) -> Vec<f64> {
    let d = keys.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![f64::NEG_INFINITY; keys.rows()];
    for t in 0..keys.rows() {
        if k_positions[t] > q_pos {
            continue;
        }
        let mut acc = 0.0f64;
        let k_row = keys.row(t);
        for j in 0..d {
            acc += f64::from(q_row[j]) * f64::from(k_row[j]);
        }
        logits[t] = acc * scale;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0f64; keys.rows()];
    if max == f64::NEG_INFINITY {
        return weights;
    }
    let mut sum = 0.0f64;
    for (w, &l) in weights.iter_mut().zip(&logits) {
        if l != f64::NEG_INFINITY {
            *w = (l - max).exp();
            sum += *w;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// Exact attention `softmax(QKᵀ/√d)·V` with grouped-query head mapping and
/// causal masking by position. Query head `g` reads kv head
/// `g / (heads_q / heads_kv)`. Output is `s_q × (heads_q · d)` with head
/// outputs in column blocks.
pub fn full_attention(
    queries: &[Matrix],
    k_heads: &[Matrix],
    v_heads: &[Matrix],
    q_positions: &[usize],
    k_positions: &[usize],
) -> Result<Matrix, OracleError> {
    let group = check_heads(queries, k_heads)?;
    if v_heads.len() != k_heads.len() {
        return Err(OracleError::Shape {
            what: format!("{} value heads for {} key heads", v_heads.len(), k_heads.len()),
        });
    }
    for (k, v) in k_heads.iter().zip(v_heads) {
        if v.rows() != k.rows() || v.cols() != k.cols() {
            return Err(OracleError::Shape { what: "value head shape differs from key head".into() });
        }
    }
    let s_q = queries[0].rows();
    let d = k_heads[0].cols();
    if q_positions.len() != s_q {
        return Err(OracleError::Shape {
            what: format!("{} query positions for {s_q} query rows", q_positions.len()),
        });
    }
    if k_positions.len() != k_heads[0].rows() {
        return Err(OracleError::Shape {
            what: format!("{} key positions for {} key rows", k_positions.len(), k_heads[0].rows()),
        });
    }
    let mut out = Matrix::zeros(s_q, queries.len() * d);
    for (g, q) in queries.iter().enumerate() {
        let kv_head = g / group;
        let keys = &k_heads[kv_head];
        let values = &v_heads[kv_head];
        for row in 0..s_q {
            let weights = attention_row(q.row(row), keys, q_positions[row], k_positions);
            for j in 0..d {
                let mut acc = 0.0f64;
                for t in 0..keys.rows() {
                    if weights[t] != 0.0 {
                        acc += weights[t] * f64::from(values.get(t, j));
                    }
                }
                out.set(row, g * d + j, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Per-query-head softmax weight matrices (`s_q × s` each), same masking and
/// head mapping as [`full_attention`].
pub fn attention_weights(
    queries: &[Matrix],
    k_heads: &[Matrix],
    q_positions: &[usize],
    k_positions: &[usize],
) -> Result<Vec<Matrix>, OracleError> {
    let group = check_heads(queries, k_heads)?;
    let s_q = queries[0].rows();
    let mut out = Vec::with_capacity(queries.len());
    for (g, q) in queries.iter().enumerate() {
        let keys = &k_heads[g / group];
        let mut w = Matrix::zeros(s_q, keys.rows());
        for row in 0..s_q {
            let weights = attention_row(q.row(row), keys, q_positions[row], k_positions);
            for (t, &value) in weights.iter().enumerate() {
                w.set(row, t, value as f32);
            }
        }
        out.push(w);
    }
    Ok(out)
}

/// Exact attention mass landing on each chunk, per kv head: softmax weights
/// over all keys (no causal mask — callers score decode-style queries placed
/// after the context), summed within each chunk and averaged over the kv
/// head's query group and query rows. Masses per head sum to 1.
pub fn exact_chunk_masses(
    queries: &[Matrix],
    k_heads: &[Matrix],
    chunk_size: usize,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let group = check_heads(queries, k_heads)?;
    let s = k_heads[0].rows();
    if chunk_size == 0 || s % chunk_size != 0 {
        return Err(OracleError::ChunkMisaligned { chunk_size, keys: s });
    }
    let n_chunks = s / chunk_size;
    let s_q = queries[0].rows();
    let k_positions: Vec<usize> = (0..s).collect();
    let mut out = vec![vec![0.0f64; n_chunks]; k_heads.len()];
    for (g, q) in queries.iter().enumerate() {
        let kv_head = g / group;
        let keys = &k_heads[kv_head];
        for row in 0..s_q {
            // q_pos = s admits every key: mask-free scoring.
            let weights = attention_row(q.row(row), keys, s, &k_positions);
            for (t, &w) in weights.iter().enumerate() {
                out[kv_head][t / chunk_size] += w;
            }
        }
    }
    let normalizer = (group * s_q) as f64;
    for head in &mut out {
        for mass in head.iter_mut() {
            *mass /= normalizer;
        }
    }
    Ok(out)
}

/// Chunk indices ordered by descending mass, ascending index among ties.
pub fn rank_chunks(masses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| masses[b].partial_cmp(&masses[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Bundled reference output for one decode-style comparison.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub full_attn_out: Matrix,
    /// Per kv head: `(chunk, mass)` sorted by descending mass.
    pub chunk_mass_ranking: Vec<Vec<(usize, f64)>>,
    /// Max-abs elementwise error of the candidate against `full_attn_out`.
    pub max_abs_error: f64,
}

pub fn oracle_report(
    queries: &[Matrix],
    k_heads: &[Matrix],
    v_heads: &[Matrix],
    q_positions: &[usize],
    k_positions: &[usize],
    chunk_size: usize,
    candidate: &Matrix,
) -> Result<OracleReport, OracleError> {
    let full_attn_out = full_attention(queries, k_heads, v_heads, q_positions, k_positions)?;
    let masses = exact_chunk_masses(queries, k_heads, chunk_size)?;
    let chunk_mass_ranking = masses
        .iter()
        .map(|m| rank_chunks(m).into_iter().map(|c| (c, m[c])).collect())
        .collect();
    if candidate.rows() != full_attn_out.rows() || candidate.cols() != full_attn_out.cols() {
        return Err(OracleError::Shape { what: "candidate shape differs from reference output".into() });
    }
    let max_abs_error = full_attn_out.max_abs_diff(candidate);
    Ok(OracleReport { full_attn_out, chunk_mass_ranking, max_abs_error })
}
