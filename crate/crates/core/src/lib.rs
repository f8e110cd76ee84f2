//! Tiered-memory embedding store.
//!
//! Quantized embedding tables live on a slow block device (storage class
//! memory) and are served through a fast-memory hierarchy: a unified row
//! cache split by row size, a cache of fully pooled vectors keyed by an
//! order-invariant hash of the index sequence, and tables pinned directly
//! in fast memory by a placement policy.
//!
//! The crate also carries the analysis side: a synthetic trace generator
//! with temporal/spatial locality analyzers and a closed-form planner for
//! bandwidth, IOPS, endurance, warmup and fleet power.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod device;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod harness;
pub mod lru;
pub mod planner;
pub mod pooled_cache;
pub mod row_cache;
pub mod stats;
pub mod workload;

pub use device::{
    endurance_report, BlockDevice, DeviceProfile, DeviceStats, IoCompletion, IoRequest, SimDevice,
};
pub use embedding::{
    dequantize_row, pool_rows, quantize_row, EmbeddingTable, PooledVector, PruningMap,
    QuantizedRow, Role, TableMeta,
};
pub use engine::{
    Engine, EngineOptions, ExecMode, LoadOptions, LookupResult, ModelManifest, Placement,
    PlacementPlan, PlacementPolicy, QueryBatch, WarmupReport,
};
pub use error::{Error, Result};
pub use pooled_cache::{sequence_key, PooledCache, PooledConfig, PooledKey};
pub use row_cache::{CacheConfig, CacheKey, RowCache, SubCache};
