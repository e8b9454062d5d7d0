//! Deterministic synthetic workloads: every generator is a pure function of
//! its [`GeneratorSpec`], so any run can be replayed bit-for-bit from the
//! seed. See [`rng`] for the documented counter-based generator.

pub mod rng;
pub mod tensorfile;

pub use rng::CounterRng;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, RopeParams};
use crate::oracle;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid generator spec: {0}")]
    BadSpec(String),
    #[error("needle self-check failed after {retries} retries (best mass {best_mass:.4})")]
    NeedleSelfCheck { retries: usize, best_mass: f64 },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    SharedSubspace,
    Needle,
    IidGaussian,
    MultiTurnNeedle,
}

/// Fully describes a synthetic workload; the seed determines every byte of
/// the output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub seed: u64,
    pub seq_len: usize,
    pub head_dim: usize,
    pub heads_kv: usize,
    pub heads_q: usize,
    /// Hidden subspace rank for `shared-subspace`.
    #[serde(default = "default_intrinsic_rank")]
    pub intrinsic_rank: usize,
    /// Additive noise level σ.
    #[serde(default)]
    pub noise: f64,
    /// Token index of the planted needle for `needle`.
    #[serde(default)]
    pub needle_position: usize,
    /// Target logit of the planted needle(s).
    #[serde(default = "default_needle_strength")]
    pub needle_strength: f64,
    /// Number of planted needle chunks / query turns for `multi-turn-needle`.
    #[serde(default = "default_turns")]
    pub turns: usize,
    /// Continuation length for `shared-subspace`.
    #[serde(default = "default_extension_len")]
    pub extension_len: usize,
}

fn default_intrinsic_rank() -> usize {
    16
}

fn default_needle_strength() -> f64 {
    16.0
}

fn default_turns() -> usize {
    4
}

fn default_extension_len() -> usize {
    64
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.seq_len == 0 || self.head_dim == 0 || self.heads_kv == 0 || self.heads_q == 0 {
            return Err(WorkloadError::BadSpec("seq_len, head_dim and head counts must be positive".into()));
        }
        if self.heads_q % self.heads_kv != 0 {
            return Err(WorkloadError::BadSpec(format!(
                "heads_q {} not divisible by heads_kv {}",
                self.heads_q, self.heads_kv
            )));
        }
        if self.noise < 0.0 {
            return Err(WorkloadError::BadSpec("noise must be non-negative".into()));
        }
        match self.kind {
            GeneratorKind::SharedSubspace => {
                if self.intrinsic_rank == 0 || self.intrinsic_rank > self.head_dim {
                    return Err(WorkloadError::BadSpec(format!(
                        "intrinsic rank {} out of range for dim {}",
                        self.intrinsic_rank, self.head_dim
                    )));
                }
            }
            GeneratorKind::Needle => {
                if self.needle_position >= self.seq_len {
                    return Err(WorkloadError::BadSpec(format!(
                        "needle position {} outside sequence of length {}",
                        self.needle_position, self.seq_len
                    )));
                }
            }
            GeneratorKind::MultiTurnNeedle => {
                if self.turns == 0 {
                    return Err(WorkloadError::BadSpec("turns must be positive".into()));
                }
            }
            GeneratorKind::IidGaussian => {}
        }
        Ok(())
    }
}

// Substream tags; fixed so streams never alias across uses.
const TAG_KEYS: u64 = 1;
const TAG_VALUES: u64 = 2;
const TAG_QUERIES: u64 = 3;
const TAG_BASIS: u64 = 4;
const TAG_COEFF: u64 = 5;
const TAG_NOISE: u64 = 6;
const TAG_RETRY: u64 = 7;
const TAG_PLACEMENT: u64 = 8;

/// Per-head key/value tensors for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceKv {
    /// Per kv_head, `s × d`, before rotary embedding.
    pub k_pre: Vec<Matrix>,
    /// Per kv_head, `s × d`, after rotary embedding at positions `0..s`.
    pub k_rope: Vec<Matrix>,
    /// Per kv_head, `s × d`.
    pub values: Vec<Matrix>,
}

fn gaussian_matrix(rng: &mut CounterRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| (rng.next_gaussian() * scale) as f32).collect();
    Matrix::new(rows, cols, data).expect("sized data")
}

fn unit_vector(rng: &mut CounterRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Query row of typical Gaussian norm `√d`, pointed at `direction` with a
/// small per-head perturbation.
fn aligned_query(rng: &mut CounterRng, direction: &[f64], dim: usize) -> Vec<f32> {
    let mut v: Vec<f64> = direction.to_vec();
    for x in &mut v {
        *x += 0.1 * rng.next_gaussian();
    }
    let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = (dim as f64).sqrt() / norm;
    v.into_iter().map(|a| (a * scale) as f32).collect()
}

// ── iid-gaussian ────────────────────────────────────────────────────────────

/// Unstructured baseline: i.i.d. standard normal keys, values, and queries.
pub fn gen_iid_gaussian(
    spec: &GeneratorSpec,
    rope: &RopeParams,
) -> Result<(SequenceKv, Vec<Matrix>), WorkloadError> {
    spec.validate()?;
    let positions: Vec<usize> = (0..spec.seq_len).collect();
    let mut key_rng = CounterRng::derive(spec.seed, TAG_KEYS);
    let mut value_rng = CounterRng::derive(spec.seed, TAG_VALUES);
    let mut query_rng = CounterRng::derive(spec.seed, TAG_QUERIES);
    let mut k_pre = Vec::with_capacity(spec.heads_kv);
    let mut k_rope = Vec::with_capacity(spec.heads_kv);
    let mut values = Vec::with_capacity(spec.heads_kv);
    for _ in 0..spec.heads_kv {
        let pre = gaussian_matrix(&mut key_rng, spec.seq_len, spec.head_dim, 1.0);
        k_rope.push(linalg::rope_apply(&pre, &positions, rope)?);
        k_pre.push(pre);
        values.push(gaussian_matrix(&mut value_rng, spec.seq_len, spec.head_dim, 1.0));
    }
    let queries = (0..spec.heads_q).map(|_| gaussian_matrix(&mut query_rng, 1, spec.head_dim, 1.0)).collect();
    Ok((SequenceKv { k_pre, k_rope, values }, queries))
}

// ── needle ──────────────────────────────────────────────────────────────────

/// Sequence with one planted high-affinity key per kv head.
#[derive(Debug, Clone)]
pub struct NeedleData {
    pub kv: SequenceKv,
    /// Per q_head, `1 × d`.
    pub queries: Vec<Matrix>,
    pub needle_position: usize,
    /// Chunk index of the needle under the given chunk size.
    pub needle_chunk: usize,
    /// Exact attention mass of the needle's chunk per kv head, from the
    /// generator's oracle self-check.
    pub needle_chunk_mass: Vec<f64>,
}

const NEEDLE_MAX_RETRIES: usize = 16;
const NEEDLE_MIN_MASS: f64 = 0.5;

/// Plant a single needle token at `spec.needle_position` whose logit against
/// the (group-aligned) queries is `spec.needle_strength`, on a background of
/// unit Gaussian keys. The generator verifies, with exact attention, that
/// the needle's chunk holds more than half the attention mass, retrying with
/// fresh noise up to 16 times.
pub fn gen_needle(
    spec: &GeneratorSpec,
    rope: &RopeParams,
    chunk_size: usize,
) -> Result<NeedleData, WorkloadError> {
    spec.validate()?;
    if chunk_size == 0 || spec.seq_len % chunk_size != 0 {
        return Err(WorkloadError::BadSpec(format!(
            "chunk size {chunk_size} must divide seq_len {}",
            spec.seq_len
        )));
    }
    let group = spec.heads_q / spec.heads_kv;
    let positions: Vec<usize> = (0..spec.seq_len).collect();
    let mut best_mass = 0.0f64;
    for retry in 0..NEEDLE_MAX_RETRIES {
        let retry_seed = CounterRng::derive(spec.seed, TAG_RETRY).state_for_retry(retry);
        let mut dir_rng = CounterRng::derive(retry_seed, TAG_PLACEMENT);
        let mut key_rng = CounterRng::derive(retry_seed, TAG_KEYS);
        let mut value_rng = CounterRng::derive(retry_seed, TAG_VALUES);
        let mut query_rng = CounterRng::derive(retry_seed, TAG_QUERIES);

        let mut k_pre = Vec::with_capacity(spec.heads_kv);
        let mut k_rope = Vec::with_capacity(spec.heads_kv);
        let mut values = Vec::with_capacity(spec.heads_kv);
        let mut queries = vec![Matrix::zeros(0, 0); spec.heads_q];
        for head in 0..spec.heads_kv {
            let direction = unit_vector(&mut dir_rng, spec.head_dim);
            let mut rope_keys = gaussian_matrix(&mut key_rng, spec.seq_len, spec.head_dim, 1.0);
            for (j, &dir) in direction.iter().enumerate() {
                rope_keys.set(spec.needle_position, j, (spec.needle_strength * dir) as f32);
            }
            for g in 0..group {
                queries[head * group + g] =
                    Matrix::new(1, spec.head_dim, aligned_query(&mut query_rng, &direction, spec.head_dim))
                        .expect("query shape");
            }
            k_pre.push(linalg::rope_unapply(&rope_keys, &positions, rope)?);
            k_rope.push(rope_keys);
            values.push(gaussian_matrix(&mut value_rng, spec.seq_len, spec.head_dim, 1.0));
        }

        let masses = oracle::exact_chunk_masses(&queries, &k_rope, chunk_size).expect("self-check shapes");
        let needle_chunk = spec.needle_position / chunk_size;
        let per_head: Vec<f64> = masses.iter().map(|m| m[needle_chunk]).collect();
        let min_mass = per_head.iter().copied().fold(f64::INFINITY, f64::min);
        best_mass = best_mass.max(min_mass);
        if min_mass > NEEDLE_MIN_MASS {
            return Ok(NeedleData {
                kv: SequenceKv { k_pre, k_rope, values },
                queries,
                needle_position: spec.needle_position,
                needle_chunk,
                needle_chunk_mass: per_head,
            });
        }
        log::debug!("needle self-check retry {retry}: min chunk mass {min_mass:.4}");
    }
    Err(WorkloadError::NeedleSelfCheck { retries: NEEDLE_MAX_RETRIES, best_mass })
}

// ── multi-turn needle ───────────────────────────────────────────────────────

/// Several coherent needle chunks probed by one query turn each.
#[derive(Debug, Clone)]
pub struct MultiTurnData {
    pub kv: SequenceKv,
    /// `turns` entries; each entry holds one `1 × d` query per q_head.
    pub turn_queries: Vec<Vec<Matrix>>,
    /// Chunk index planted for each turn.
    pub needle_chunks: Vec<usize>,
}

impl MultiTurnData {
    /// All turn queries stacked into one `turns × d` matrix per q_head,
    /// giving a workload whose attention mass concentrates on the planted
    /// chunks.
    pub fn stacked_queries(&self) -> Vec<Matrix> {
        let heads_q = self.turn_queries[0].len();
        (0..heads_q)
            .map(|h| {
                let rows: Vec<Vec<f32>> =
                    self.turn_queries.iter().map(|turn| turn[h].row(0).to_vec()).collect();
                Matrix::from_rows(&rows).expect("uniform query dims")
            })
            .collect()
    }
}

/// Plant `spec.turns` distinct chunks whose tokens all share a hidden
/// direction (scaled by `needle_strength`), and one aligned query turn per
/// chunk. Verified per turn by the exact-attention self-check.
pub fn gen_multi_turn_needle(
    spec: &GeneratorSpec,
    rope: &RopeParams,
    chunk_size: usize,
) -> Result<MultiTurnData, WorkloadError> {
    spec.validate()?;
    if chunk_size == 0 || spec.seq_len % chunk_size != 0 {
        return Err(WorkloadError::BadSpec(format!(
            "chunk size {chunk_size} must divide seq_len {}",
            spec.seq_len
        )));
    }
    let n_chunks = spec.seq_len / chunk_size;
    if spec.turns > n_chunks {
        return Err(WorkloadError::BadSpec(format!(
            "{} turns exceed {} chunks",
            spec.turns, n_chunks
        )));
    }
    let group = spec.heads_q / spec.heads_kv;
    let positions: Vec<usize> = (0..spec.seq_len).collect();
    let mut best_mass = 0.0f64;
    for retry in 0..NEEDLE_MAX_RETRIES {
        let retry_seed = CounterRng::derive(spec.seed, TAG_RETRY).state_for_retry(retry);
        let mut place_rng = CounterRng::derive(retry_seed, TAG_PLACEMENT);
        let mut key_rng = CounterRng::derive(retry_seed, TAG_KEYS);
        let mut value_rng = CounterRng::derive(retry_seed, TAG_VALUES);
        let mut query_rng = CounterRng::derive(retry_seed, TAG_QUERIES);

        // Distinct needle chunks, order fixed by the draw sequence.
        let mut needle_chunks: Vec<usize> = Vec::with_capacity(spec.turns);
        while needle_chunks.len() < spec.turns {
            let c = place_rng.next_below(n_chunks as u64) as usize;
            if !needle_chunks.contains(&c) {
                needle_chunks.push(c);
            }
        }
        let strengths: Vec<f64> = (0..spec.turns)
            .map(|_| spec.needle_strength * (0.8 + 0.4 * place_rng.next_f64()))
            .collect();

        let mut k_pre = Vec::with_capacity(spec.heads_kv);
        let mut k_rope = Vec::with_capacity(spec.heads_kv);
        let mut values = Vec::with_capacity(spec.heads_kv);
        let mut turn_queries: Vec<Vec<Matrix>> =
            vec![vec![Matrix::zeros(0, 0); spec.heads_q]; spec.turns];
        for head in 0..spec.heads_kv {
            let mut rope_keys = gaussian_matrix(&mut key_rng, spec.seq_len, spec.head_dim, 1.0);
            for (turn, &chunk) in needle_chunks.iter().enumerate() {
                let direction = unit_vector(&mut place_rng, spec.head_dim);
                for t in 0..chunk_size {
                    let row = chunk * chunk_size + t;
                    let wobble = 1.0 + 0.05 * place_rng.next_gaussian();
                    for (j, &dir) in direction.iter().enumerate() {
                        let noise = 0.2 * place_rng.next_gaussian();
                        rope_keys.set(row, j, (strengths[turn] * wobble * dir + noise) as f32);
                    }
                }
                for g in 0..group {
                    turn_queries[turn][head * group + g] = Matrix::new(
                        1,
                        spec.head_dim,
                        aligned_query(&mut query_rng, &direction, spec.head_dim),
                    )
                    .expect("query shape");
                }
            }
            k_pre.push(linalg::rope_unapply(&rope_keys, &positions, rope)?);
            k_rope.push(rope_keys);
            values.push(gaussian_matrix(&mut value_rng, spec.seq_len, spec.head_dim, 1.0));
        }

        let mut min_mass = f64::INFINITY;
        for (turn, &chunk) in needle_chunks.iter().enumerate() {
            let masses =
                oracle::exact_chunk_masses(&turn_queries[turn], &k_rope, chunk_size).expect("shapes");
            for per_head in &masses {
                min_mass = min_mass.min(per_head[chunk]);
            }
        }
        best_mass = best_mass.max(min_mass);
        if min_mass > NEEDLE_MIN_MASS {
            return Ok(MultiTurnData {
                kv: SequenceKv { k_pre, k_rope, values },
                turn_queries,
                needle_chunks,
            });
        }
        log::debug!("multi-turn self-check retry {retry}: min turn mass {min_mass:.4}");
    }
    Err(WorkloadError::NeedleSelfCheck { retries: NEEDLE_MAX_RETRIES, best_mass })
}

// ── shared subspace ─────────────────────────────────────────────────────────

/// Rows drawn from a hidden low-rank subspace, plus an independent control.
#[derive(Debug, Clone)]
pub struct SharedSubspaceData {
    /// `seq_len × head_dim` from the hidden subspace.
    pub context: Matrix,
    /// `extension_len × head_dim` from the same subspace.
    pub extension: Matrix,
    /// `seq_len × head_dim` from a freshly drawn subspace.
    pub independent: Matrix,
}

/// Context and continuation share one hidden rank-`intrinsic_rank` subspace;
/// the independent sequence gets its own. Noise `σ` is added per coordinate.
pub fn gen_shared_subspace(spec: &GeneratorSpec) -> Result<SharedSubspaceData, WorkloadError> {
    spec.validate()?;
    let d = spec.head_dim;
    let r = spec.intrinsic_rank;
    let mut basis_rng = CounterRng::derive(spec.seed, TAG_BASIS);
    let mut coeff_rng = CounterRng::derive(spec.seed, TAG_COEFF);
    let mut noise_rng = CounterRng::derive(spec.seed, TAG_NOISE);

    let shared_basis = random_orthonormal_rows(&mut basis_rng, r, d);
    let fresh_basis = random_orthonormal_rows(&mut basis_rng, r, d);

    let mut sample = |basis: &Matrix, rows: usize, coeff_rng: &mut CounterRng, noise_rng: &mut CounterRng| {
        let mut out = Matrix::zeros(rows, d);
        for i in 0..rows {
            let coeff: Vec<f64> = (0..r).map(|_| coeff_rng.next_gaussian()).collect();
            for j in 0..d {
                let mut acc = 0.0f64;
                for (k, &c) in coeff.iter().enumerate() {
                    acc += c * f64::from(basis.get(k, j));
                }
                acc += spec.noise * noise_rng.next_gaussian();
                out.set(i, j, acc as f32);
            }
        }
        out
    };

    let context = sample(&shared_basis, spec.seq_len, &mut coeff_rng, &mut noise_rng);
    let extension = sample(&shared_basis, spec.extension_len, &mut coeff_rng, &mut noise_rng);
    let independent = sample(&fresh_basis, spec.seq_len, &mut coeff_rng, &mut noise_rng);
    Ok(SharedSubspaceData { context, extension, independent })
}

/// `r × d` matrix with orthonormal rows drawn uniformly at random.
pub fn random_orthonormal_rows(rng: &mut CounterRng, r: usize, d: usize) -> Matrix {
    assert!(r <= d);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    while rows.len() < r {
        let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        for prev in &rows {
            let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(prev) {
                *a -= proj * b;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    Matrix::new(r, d, data).expect("sized data")
}

impl CounterRng {
    /// Stable per-retry reseed without consuming the parent stream.
    fn state_for_retry(&self, retry: usize) -> u64 {
        let mut probe = self.clone();
        let mut last = 0;
        for _ in 0..=retry {
            last = probe.next_u64();
        }
        last
    }
}
