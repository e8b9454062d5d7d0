//! Two-tier value storage: a slow tier holding every offloaded chunk and a
//! fixed-capacity fast-tier resident set in front of it, with byte-level
//! transfer accounting.
//!
//! The resident set is maintained per (layer, kv_head) group with a
//! least-recently-selected replacement policy; capacity is expressed in
//! chunks per group. `fetch` is the only mutating operation, so a store
//! confined to one decode worker replays a selection trace deterministically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("duplicate chunk id {0:?} during offload")]
    DuplicateChunk(ChunkId),
    #[error("chunk block at {0:?} has shape {1}x{2}, expected {3}x{4}")]
    InconsistentBlockShape(ChunkId, usize, usize, usize, usize),
    #[error("unknown chunk id {0:?}")]
    UnknownChunk(ChunkId),
}

/// Address of one value chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId {
    pub layer: usize,
    pub kv_head: usize,
    pub chunk: usize,
}

impl ChunkId {
    pub fn new(layer: usize, kv_head: usize, chunk: usize) -> Self {
        Self { layer, kv_head, chunk }
    }

    fn group(&self) -> (usize, usize) {
        (self.layer, self.kv_head)
    }
}

/// Point-in-time transfer and residency counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierStats {
    pub slow_tier_bytes: u64,
    pub fast_tier_bytes: u64,
    pub bytes_fetched_total: u64,
    pub chunks_requested: u64,
    pub chunks_hit: u64,
}

impl TierStats {
    pub fn hit_rate(&self) -> f64 {
        if self.chunks_requested == 0 {
            0.0
        } else {
            self.chunks_hit as f64 / self.chunks_requested as f64
        }
    }

    /// Counters accumulated between `before` and `after`; tier byte gauges
    /// carry the `after` values.
    pub fn delta(before: &TierStats, after: &TierStats) -> TierStats {
        TierStats {
            slow_tier_bytes: after.slow_tier_bytes,
            fast_tier_bytes: after.fast_tier_bytes,
            bytes_fetched_total: after.bytes_fetched_total - before.bytes_fetched_total,
            chunks_requested: after.chunks_requested - before.chunks_requested,
            chunks_hit: after.chunks_hit - before.chunks_hit,
        }
    }
}

/// One fetched chunk plus whether it was already resident.
#[derive(Debug, Clone)]
pub struct FetchedChunk {
    pub id: ChunkId,
    pub block: Matrix,
    pub hit: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ResidentSet {
    /// chunk index → last selection tick.
    last_used: BTreeMap<usize, u64>,
}

/// Chunk-granular two-tier value store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TieredValueStore {
    slow_tier: BTreeMap<ChunkId, Matrix>,
    residents: BTreeMap<(usize, usize), ResidentSet>,
    capacity_per_group: usize,
    chunk_bytes: u64,
    clock: u64,
    bytes_fetched_total: u64,
    chunks_requested: u64,
    chunks_hit: u64,
}

impl TieredValueStore {
    /// Move uniformly-shaped value blocks into the slow tier. The fast tier
    /// starts empty and all counters start at zero.
    pub fn offload(blocks: Vec<(ChunkId, Matrix)>, capacity_per_group: usize) -> Result<Self, StoreError> {
        let mut slow_tier = BTreeMap::new();
        let mut shape: Option<(usize, usize)> = None;
        let mut chunk_bytes = 0u64;
        for (id, block) in blocks {
            match shape {
                None => {
                    shape = Some((block.rows(), block.cols()));
                    chunk_bytes = (block.rows() * block.cols() * 4) as u64;
                }
                Some((r, c)) if (block.rows(), block.cols()) != (r, c) => {
                    return Err(StoreError::InconsistentBlockShape(id, block.rows(), block.cols(), r, c));
                }
                _ => {}
            }
            if slow_tier.insert(id, block).is_some() {
                return Err(StoreError::DuplicateChunk(id));
            }
        }
        Ok(Self {
            slow_tier,
            residents: BTreeMap::new(),
            capacity_per_group,
            chunk_bytes,
            clock: 0,
            bytes_fetched_total: 0,
            chunks_requested: 0,
            chunks_hit: 0,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.slow_tier.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slow_tier.len()
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.chunk_bytes
    }

    pub fn capacity_per_group(&self) -> usize {
        self.capacity_per_group
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.slow_tier.contains_key(id)
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = &ChunkId> {
        self.slow_tier.keys()
    }

    pub fn resident_chunks(&self) -> usize {
        self.residents.values().map(|set| set.last_used.len()).sum()
    }

    /// Whether `id` is currently fast-tier resident.
    pub fn is_resident(&self, id: &ChunkId) -> bool {
        self.residents
            .get(&id.group())
            .is_some_and(|set| set.last_used.contains_key(&id.chunk))
    }

    /// Retrieve blocks for `ids`, processed in order. Each id counts as one
    /// request; a request is a hit when the chunk is resident at the moment
    /// it is processed (for the usual case of distinct ids, exactly the
    /// chunks resident before the call). Misses transfer `chunk_bytes` from
    /// the slow tier and are inserted into the resident set, evicting the
    /// least-recently-selected chunk of the same group when over capacity.
    pub fn fetch(&mut self, ids: &[ChunkId]) -> Result<Vec<FetchedChunk>, StoreError> {
        // Validate up front so a failed call leaves stats untouched.
        for id in ids {
            if !self.slow_tier.contains_key(id) {
                return Err(StoreError::UnknownChunk(*id));
            }
        }
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            self.clock += 1;
            self.chunks_requested += 1;
            let set = self.residents.entry(id.group()).or_default();
            let hit = set.last_used.contains_key(&id.chunk);
            if hit {
                self.chunks_hit += 1;
                set.last_used.insert(id.chunk, self.clock);
            } else {
                self.bytes_fetched_total += self.chunk_bytes;
                if self.capacity_per_group > 0 {
                    if set.last_used.len() >= self.capacity_per_group {
                        let oldest = set
                            .last_used
                            .iter()
                            .min_by_key(|&(chunk, tick)| (*tick, *chunk))
                            .map(|(chunk, _)| *chunk)
                            .expect("non-empty resident set");
                        set.last_used.remove(&oldest);
                    }
                    set.last_used.insert(id.chunk, self.clock);
                }
            }
            out.push(FetchedChunk { id: *id, block: self.slow_tier[id].clone(), hit });
        }
        Ok(out)
    }

    pub fn stats_snapshot(&self) -> TierStats {
        TierStats {
            slow_tier_bytes: self.chunk_bytes * self.slow_tier.len() as u64,
            fast_tier_bytes: self.chunk_bytes * self.resident_chunks() as u64,
            bytes_fetched_total: self.bytes_fetched_total,
            chunks_requested: self.chunks_requested,
            chunks_hit: self.chunks_hit,
        }
    }
}
