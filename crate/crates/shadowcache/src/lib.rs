//! Long-context attention cache built around three ideas:
//!
//! * keys before rotary embedding are close to low-rank, so the full key
//!   cache can be replaced by a truncated SVD factorization held in fast
//!   memory;
//! * values do not compress, so they are offloaded chunk-by-chunk to a
//!   simulated slow tier and fetched on demand through an LRU resident set;
//! * the mean of each post-rotary key chunk is a cheap landmark that ranks
//!   chunks by attention relevance, with poorly-approximated outlier chunks
//!   pinned exactly in fast memory.
//!
//! [`prefill`] builds the compressed state for a context, [`decode`] runs
//! sparse decode steps over it, and [`oracle`] provides the exact
//! full-attention reference the sparse path is validated against.
//! [`analytics`] turns the accounting into bandwidth and footprint numbers,
//! and [`workload`] supplies deterministic synthetic inputs plus the binary
//! tensor file format used for checkpointing.

pub mod analytics;
pub mod cli;
pub mod decode;
pub mod kvstore;
pub mod linalg;
pub mod oracle;
pub mod prefill;
pub mod workload;

pub use analytics::{equivalent_bandwidth, footprint, selection_recall, BandwidthParams, FootprintReport};
pub use decode::{decode_step, select_chunks, DecodeOutput, LocalWindow};
pub use kvstore::{ChunkId, TierStats, TieredValueStore};
pub use linalg::{Matrix, RopeParams, TruncatedSvd};
pub use prefill::{prefill, reconstruct_chunk_keys, PrefillState, ShadowConfig};
pub use workload::tensorfile::TensorFile;
pub use workload::{CounterRng, GeneratorSpec};
