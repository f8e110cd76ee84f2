//! Serving pipeline over the tiered store.
//!
//! Every table is written to the block device at load. Fast-memory tables
//! also keep a copy in memory and never touch the device or caches. Slow
//! memory lookups go through the pooled cache, then the row cache, and
//! the remaining misses become one device read each.
//!
//! Rows are pooled in ascending index order. The pooled cache key ignores
//! order, so a canonical summation order is what keeps cached and
//! recomputed vectors bit-identical.
//!
//! Time is virtual. Each lookup is charged a fixed CPU cost per probe and
//! per pooled element; device latency comes from the device's completion
//! times.

mod manifest;
mod placement;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use parking_lot::RwLock;

pub use manifest::{ModelManifest, SyntheticModel, TableGroup};
pub use placement::{plan_placement, Placement, PlacementInput, PlacementPlan, PlacementPolicy};

use crate::device::{BlockDevice, IoCompletion, IoRequest};
use crate::embedding::{
    accumulate_row, encode_row, EmbeddingTable, PooledVector, PruningMap, QuantizedRow, Role,
    RowFormat, TableMeta,
};
use crate::error::{Error, Result};
use crate::pooled_cache::{sequence_key, PooledCache, PooledConfig, PooledKey, PooledStats};
use crate::row_cache::{CacheConfig, CacheKey, CacheStats, RowCache};
use crate::workload::{TableLookup, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    pub deprune: bool,
    pub dequantize_at_load: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Overlapped,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::Sequential => "seq",
            ExecMode::Overlapped => "overlap",
        })
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Self::Sequential),
            "overlap" | "overlapped" => Ok(Self::Overlapped),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (expected seq or overlap)"
            ))),
        }
    }
}

/// CPU-side costs in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub fm_row_read_us: f64,
    pub cache_probe_us: f64,
    pub pooled_probe_us: f64,
    pub pool_per_elem_us: f64,
    pub dequant_per_elem_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            fm_row_read_us: 0.015,
            cache_probe_us: 0.05,
            pooled_probe_us: 0.1,
            pool_per_elem_us: 0.0005,
            dequant_per_elem_us: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOptions {
    pub load: LoadOptions,
    pub policy: PlacementPolicy,
    pub fm_budget_bytes: u64,
    /// `None` disables the row cache.
    pub row_cache: Option<CacheConfig>,
    /// `None` disables the pooled cache.
    pub pooled: Option<PooledConfig>,
    pub pooled_audit: bool,
    pub mode: ExecMode,
    /// Outstanding reads per table and tables in flight.
    pub throttle: Option<(usize, usize)>,
    pub cost: CostModel,
    /// Use sub-block reads when the device supports them.
    pub subblock: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            load: LoadOptions::default(),
            policy: PlacementPolicy::SmOnly,
            fm_budget_bytes: 1 << 40,
            row_cache: Some(CacheConfig::default()),
            pooled: Some(PooledConfig::default()),
            pooled_audit: false,
            mode: ExecMode::Overlapped,
            throttle: None,
            cost: CostModel::default(),
            subblock: true,
        }
    }
}

/// One query: per-table index lists. User tables carry one list, item
/// tables one list per ranked item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryBatch {
    pub query_id: u64,
    pub lookups: Vec<TableLookup>,
}

impl QueryBatch {
    pub fn batch_items(&self, roles: impl Fn(u32) -> Option<Role>) -> usize {
        self.lookups
            .iter()
            .filter(|l| roles(l.table_id) == Some(Role::Item))
            .map(|l| l.lists.len())
            .max()
            .unwrap_or(0)
    }
}

impl From<&TraceRecord> for QueryBatch {
    fn from(r: &TraceRecord) -> Self {
        Self {
            query_id: r.query_id,
            lookups: r.lookups.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableOutput {
    pub table_id: u32,
    pub vectors: Vec<PooledVector>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LookupResult {
    pub query_id: u64,
    pub outputs: Vec<TableOutput>,
    pub user_us: f64,
    pub item_us: f64,
    pub end_to_end_us: f64,
    pub row_hits: u64,
    pub row_misses: u64,
    pub pooled_hits: u64,
    pub device_reads: u64,
    /// Reads held back on the host by the outstanding-IO caps.
    pub deferred_reads: u64,
}

/// Where a table lives once loaded; enough to read it back independently.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLayout {
    pub meta: TableMeta,
    pub format: RowFormat,
    pub row_bytes: usize,
    pub base_offset: u64,
    pub rows: u64,
    /// Map still applied at lookup time (pruned table, not de-pruned).
    pub mapping: Option<PruningMap>,
    pub placement: Placement,
}

impl TableLayout {
    pub fn index_space(&self) -> u64 {
        self.mapping
            .as_ref()
            .map_or(self.rows, PruningMap::unpruned_rows)
    }

    pub fn size_bytes(&self) -> u64 {
        self.rows * self.row_bytes as u64
    }

    /// Device offset of physical row `row`.
    pub fn row_offset(&self, row: u64) -> u64 {
        self.base_offset + row * self.row_bytes as u64
    }
}

#[derive(Debug)]
struct LoadedTable {
    layout: TableLayout,
    fm_data: Option<Vec<u8>>,
}

#[derive(Debug, Default)]
struct Counters {
    queries: AtomicU64,
    lookups: AtomicU64,
    indices: AtomicU64,
    sm_indices: AtomicU64,
    sm_row_lookups: AtomicU64,
    device_reads: AtomicU64,
    bytes_requested: AtomicU64,
    pruned_skips: AtomicU64,
    fm_rows: AtomicU64,
    errors: AtomicU64,
    deferred_reads: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineStats {
    pub queries: u64,
    pub lookups: u64,
    /// Index occurrences over all tables.
    pub indices: u64,
    /// Index occurrences on slow-memory tables, before the pooled cache,
    /// pruned sentinels excluded.
    pub sm_indices: u64,
    /// Row lookups that reached the row cache or the device.
    pub sm_row_lookups: u64,
    pub device_reads: u64,
    /// Row bytes asked of the device, before dword alignment.
    pub bytes_requested: u64,
    pub pruned_skips: u64,
    pub fm_rows: u64,
    pub errors: u64,
    pub deferred_reads: u64,
    pub row_cache: CacheStats,
    pub pooled: PooledStats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub applied: usize,
    pub rejected: Vec<(u32, u64, Error)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupReport {
    pub window: usize,
    /// Fast-tier hit rate per window: share of slow-memory index
    /// occurrences served without a device read.
    pub hit_rates: Vec<f64>,
    pub mean_latency_us: Vec<f64>,
    pub steady_hit_rate: f64,
    /// Queries until a window first reaches 90% of the steady hit rate.
    pub queries_to_steady: Option<u64>,
    /// Throughput during warmup relative to steady state.
    pub qps_ratio: f64,
}

impl WarmupReport {
    /// Summarizes per-window hit rates and mean latencies. The last fifth
    /// of the windows is taken as steady state.
    pub fn from_windows(
        window: usize,
        hit_rates: Vec<f64>,
        mean_latency_us: Vec<f64>,
        total_queries: usize,
    ) -> Self {
        let n = hit_rates.len();
        if n == 0 {
            return Self {
                window,
                hit_rates,
                mean_latency_us,
                steady_hit_rate: 0.0,
                queries_to_steady: None,
                qps_ratio: 1.0,
            };
        }
        let tail = (n / 5).max(1);
        let steady = hit_rates[n - tail..].iter().sum::<f64>() / tail as f64;
        let reach = hit_rates.iter().position(|&h| h >= 0.9 * steady);
        let queries_to_steady = reach.map(|w| ((w + 1) * window).min(total_queries) as u64);
        let steady_lat = mean_latency_us[n - tail..].iter().sum::<f64>() / tail as f64;
        let warm = reach.unwrap_or(n);
        let qps_ratio = if warm == 0 {
            1.0
        } else {
            let warm_lat = mean_latency_us[..warm].iter().sum::<f64>() / warm as f64;
            if warm_lat > 0.0 {
                steady_lat / warm_lat
            } else {
                1.0
            }
        };
        Self {
            window,
            hit_rates,
            mean_latency_us,
            steady_hit_rate: steady,
            queries_to_steady,
            qps_ratio,
        }
    }
}

enum Slot {
    Zero,
    Ready(Vec<u8>),
    Pending,
}

struct Prepared {
    table: usize,
    row_bytes: usize,
    key: Option<PooledKey>,
    sorted: Vec<u64>,
    done: Option<PooledVector>,
    slots: Vec<Slot>,
    /// (slot, physical row, request, skip)
    ios: Vec<(usize, u64, IoRequest, usize)>,
    probe_us: f64,
    pool_us: f64,
    row_hits: u64,
    row_misses: u64,
    pooled_hit: bool,
}

struct Timed {
    vector: PooledVector,
    io_done: f64,
    pool_us: f64,
    reads: u64,
    deferred: u64,
    row_hits: u64,
    row_misses: u64,
    pooled_hit: bool,
}

pub struct Engine {
    device: Arc<dyn BlockDevice>,
    options: EngineOptions,
    plan: PlacementPlan,
    tables: RwLock<Vec<LoadedTable>>,
    index: HashMap<u32, usize>,
    row_cache: Option<RowCache>,
    pooled: Option<PooledCache>,
    counters: Counters,
    subblock: bool,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("tables", &self.index.len())
            .field("plan", &self.plan)
            .finish_non_exhaustive()
    }
}

fn align_up(x: u64, a: u64) -> u64 {
    x.div_ceil(a) * a
}

impl Engine {
    /// Device bytes needed to load `manifest` with `load`, each table
    /// starting on a block boundary.
    pub fn device_footprint(manifest: &ModelManifest, load: LoadOptions, block_bytes: u64) -> u64 {
        manifest
            .tables
            .iter()
            .map(|m| {
                let rows = match manifest.pruning.get(&m.table_id) {
                    Some(map) if load.deprune => map.unpruned_rows(),
                    _ => m.num_rows,
                };
                let format = if load.dequantize_at_load {
                    RowFormat::Raw
                } else {
                    RowFormat::Quantized
                };
                align_up(rows * format.row_bytes(m.elem_count) as u64, block_bytes)
            })
            .sum::<u64>()
            .max(block_bytes)
    }

    pub fn load_model(
        manifest: &ModelManifest,
        tables: Vec<EmbeddingTable>,
        device: Arc<dyn BlockDevice>,
        options: EngineOptions,
    ) -> Result<Self> {
        manifest.validate()?;
        if tables.len() != manifest.tables.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tables supplied, manifest lists {}",
                tables.len(),
                manifest.tables.len()
            )));
        }
        let mut loaded = Vec::with_capacity(tables.len());
        for (meta, t) in manifest.tables.iter().zip(tables) {
            if t.meta.table_id != meta.table_id
                || t.meta.num_rows != meta.num_rows
                || t.meta.elem_count != meta.elem_count
                || t.pruning.as_ref() != manifest.pruning.get(&meta.table_id)
            {
                return Err(Error::InvalidArgument(format!(
                    "table {} does not match its manifest entry",
                    meta.table_id
                )));
            }
            let t = if options.load.deprune { t.deprune() } else { t };
            let t = if options.load.dequantize_at_load {
                t.dequantize_at_load()
            } else {
                t
            };
            loaded.push(t);
        }

        let block = device.profile().block_bytes;
        let needed = Self::device_footprint(manifest, options.load, block);
        if needed > device.capacity() {
            let mut report = format!(
                "model needs {needed} B on the device, capacity is {} B;",
                device.capacity()
            );
            for t in &loaded {
                report.push_str(&format!(" t{}={}B", t.meta.table_id, t.serialized_size()));
            }
            return Err(Error::Capacity(report));
        }

        let reserved: u64 = loaded
            .iter()
            .filter_map(|t| t.pruning.as_ref())
            .map(PruningMap::mapping_bytes)
            .sum();
        let inputs: Vec<PlacementInput> = loaded
            .iter()
            .map(|t| PlacementInput {
                table_id: t.meta.table_id,
                size_bytes: t.serialized_size(),
                pooling_factor: t.meta.avg_pooling_factor,
                row_bytes: t.row_bytes(),
            })
            .collect();
        let plan = plan_placement(
            &inputs,
            options.policy,
            options.fm_budget_bytes,
            reserved,
            &manifest.deny_list,
            &manifest.uncached,
        )?;

        let row_cache = options.row_cache.clone().map(RowCache::new);
        let pooled = options.pooled.clone().map(|c| {
            let p = PooledCache::new(c);
            if options.pooled_audit {
                p.with_audit()
            } else {
                p
            }
        });
        if let Some((per_table, max_tables)) = options.throttle {
            device.throttle_config(per_table, max_tables)?;
        }

        let mut out = Vec::with_capacity(loaded.len());
        let mut index = HashMap::new();
        let mut base = 0u64;
        for t in loaded {
            let placement = plan.get(t.meta.table_id).expect("every table placed");
            device.write_region(base, t.bytes())?;
            if let Some(rc) = &row_cache {
                rc.register_table(t.meta.table_id, t.row_bytes());
                rc.set_table_enabled(t.meta.table_id, placement == Placement::SmCached);
            }
            let layout = TableLayout {
                meta: t.meta.clone(),
                format: t.format,
                row_bytes: t.row_bytes(),
                base_offset: base,
                rows: t.meta.num_rows,
                mapping: t.pruning.clone(),
                placement,
            };
            base += align_up(t.serialized_size(), block);
            let fm_data = (placement == Placement::FmDirect).then(|| t.bytes().to_vec());
            index.insert(t.meta.table_id, out.len());
            out.push(LoadedTable { layout, fm_data });
        }
        log::info!(
            "loaded {} tables: {} fm_direct, {} sm_cached, {} sm_uncached; fm {} B of {} B",
            out.len(),
            plan.count(Placement::FmDirect),
            plan.count(Placement::SmCached),
            plan.count(Placement::SmUncached),
            plan.fm_bytes_used,
            plan.fm_budget_bytes
        );
        let subblock = options.subblock && device.profile().supports_subblock;
        Ok(Self {
            device,
            options,
            plan,
            tables: RwLock::new(out),
            index,
            row_cache,
            pooled,
            counters: Counters::default(),
            subblock,
        })
    }

    pub fn device(&self) -> &Arc<dyn BlockDevice> {
        &self.device
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn plan(&self) -> &PlacementPlan {
        &self.plan
    }

    pub fn table_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.index.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn layout(&self, table_id: u32) -> Option<TableLayout> {
        let i = *self.index.get(&table_id)?;
        Some(self.tables.read()[i].layout.clone())
    }

    pub fn role(&self, table_id: u32) -> Option<Role> {
        let i = *self.index.get(&table_id)?;
        Some(self.tables.read()[i].layout.meta.role)
    }

    /// Fast-memory bytes held: direct tables plus pruning maps.
    pub fn fm_bytes_resident(&self) -> u64 {
        self.tables
            .read()
            .iter()
            .map(|t| {
                t.fm_data.as_ref().map_or(0, |d| d.len() as u64)
                    + t.layout
                        .mapping
                        .as_ref()
                        .map_or(0, PruningMap::mapping_bytes)
            })
            .sum()
    }

    pub fn row_cache(&self) -> Option<&RowCache> {
        self.row_cache.as_ref()
    }

    pub fn pooled_cache(&self) -> Option<&PooledCache> {
        self.pooled.as_ref()
    }

    pub fn stats(&self) -> EngineStats {
        let c = &self.counters;
        EngineStats {
            queries: c.queries.load(Relaxed),
            lookups: c.lookups.load(Relaxed),
            indices: c.indices.load(Relaxed),
            sm_indices: c.sm_indices.load(Relaxed),
            sm_row_lookups: c.sm_row_lookups.load(Relaxed),
            device_reads: c.device_reads.load(Relaxed),
            bytes_requested: c.bytes_requested.load(Relaxed),
            pruned_skips: c.pruned_skips.load(Relaxed),
            fm_rows: c.fm_rows.load(Relaxed),
            errors: c.errors.load(Relaxed),
            deferred_reads: c.deferred_reads.load(Relaxed),
            row_cache: self
                .row_cache
                .as_ref()
                .map(RowCache::stats)
                .unwrap_or_default(),
            pooled: self
                .pooled
                .as_ref()
                .map(PooledCache::stats)
                .unwrap_or_default(),
        }
    }

    /// Zeroes engine, cache and device counters; cache contents stay.
    pub fn reset_stats(&self) {
        let c = &self.counters;
        for a in [
            &c.queries,
            &c.lookups,
            &c.indices,
            &c.sm_indices,
            &c.sm_row_lookups,
            &c.device_reads,
            &c.bytes_requested,
            &c.pruned_skips,
            &c.fm_rows,
            &c.errors,
            &c.deferred_reads,
        ] {
            a.store(0, Relaxed);
        }
        if let Some(rc) = &self.row_cache {
            rc.reset_stats();
        }
        if let Some(p) = &self.pooled {
            p.reset_stats();
        }
        self.device.reset_stats();
    }

    /// Empties both caches.
    pub fn clear_caches(&self) {
        if let Some(rc) = &self.row_cache {
            rc.clear();
        }
        if let Some(p) = &self.pooled {
            p.clear();
        }
    }

    fn pool_cost(&self, layout: &TableLayout, rows: usize) -> f64 {
        let c = &self.options.cost;
        let per = match layout.format {
            RowFormat::Quantized => c.pool_per_elem_us + c.dequant_per_elem_us,
            RowFormat::Raw => c.pool_per_elem_us,
        };
        rows as f64 * layout.meta.elem_count as f64 * per
    }

    fn pool_slots(layout: &TableLayout, slots: &[Slot]) -> PooledVector {
        let mut acc = PooledVector::zeros(layout.meta.elem_count);
        for s in slots {
            match s {
                Slot::Ready(bytes) => accumulate_row(layout.format, bytes, &mut acc.values),
                // a zero row adds +0.0, exactly as a de-pruned zero row would
                Slot::Zero => acc.values.iter_mut().for_each(|v| *v += 0.0),
                Slot::Pending => unreachable!("pending slot at pooling time"),
            }
        }
        acc
    }

    /// Probes caches and plans device reads for one lookup.
    fn prepare(&self, tables: &[LoadedTable], table_id: u32, indices: &[u64]) -> Result<Prepared> {
        let ti = *self
            .index
            .get(&table_id)
            .ok_or(Error::UnknownTable(table_id))?;
        let t = &tables[ti];
        let layout = &t.layout;
        let c = &self.counters;
        c.lookups.fetch_add(1, Relaxed);
        c.indices.fetch_add(indices.len() as u64, Relaxed);

        let space = layout.index_space();
        if let Some(&bad) = indices.iter().find(|&&i| i >= space) {
            c.errors.fetch_add(1, Relaxed);
            return Err(Error::OutOfRange(format!(
                "table {table_id}: index {bad} >= {space}"
            )));
        }
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let cost = &self.options.cost;
        let mut p = Prepared {
            table: ti,
            row_bytes: layout.row_bytes,
            key: None,
            sorted,
            done: None,
            slots: Vec::new(),
            ios: Vec::new(),
            probe_us: 0.0,
            pool_us: 0.0,
            row_hits: 0,
            row_misses: 0,
            pooled_hit: false,
        };

        let physical = |i: u64| match &layout.mapping {
            Some(m) => m.get(i),
            None => Some(i),
        };

        if let Some(fm) = &t.fm_data {
            let rb = layout.row_bytes;
            p.slots = p
                .sorted
                .iter()
                .map(|&i| match physical(i) {
                    Some(r) => Slot::Ready(fm[r as usize * rb..(r as usize + 1) * rb].to_vec()),
                    None => Slot::Zero,
                })
                .collect();
            c.fm_rows.fetch_add(p.sorted.len() as u64, Relaxed);
            p.probe_us = p.sorted.len() as f64 * cost.fm_row_read_us;
            p.pool_us = self.pool_cost(layout, p.sorted.len());
            p.done = Some(Self::pool_slots(layout, &p.slots));
            return Ok(p);
        }

        let live = p.sorted.iter().filter(|&&i| physical(i).is_some()).count() as u64;
        c.sm_indices.fetch_add(live, Relaxed);

        if let Some(pc) = &self.pooled {
            if pc.config().eligible(indices.len()) {
                let key = sequence_key(table_id, indices);
                p.probe_us += cost.pooled_probe_us;
                if let Some(v) = pc.lookup(&key) {
                    p.pooled_hit = true;
                    p.done = Some(v);
                    return Ok(p);
                }
                p.key = Some(key);
            }
        }

        let cached = layout.placement == Placement::SmCached && self.row_cache.is_some();
        let mut slots = Vec::with_capacity(p.sorted.len());
        for (pos, &i) in p.sorted.iter().enumerate() {
            let Some(row) = physical(i) else {
                c.pruned_skips.fetch_add(1, Relaxed);
                slots.push(Slot::Zero);
                continue;
            };
            c.sm_row_lookups.fetch_add(1, Relaxed);
            if cached {
                p.probe_us += cost.cache_probe_us;
                let rc = self.row_cache.as_ref().unwrap();
                if let Some(bytes) = rc.get(&CacheKey::new(table_id, row)) {
                    p.row_hits += 1;
                    slots.push(Slot::Ready(bytes));
                    continue;
                }
                p.row_misses += 1;
            }
            let off = layout.row_offset(row);
            let (req, skip) = if self.subblock {
                IoRequest::subblock_covering(table_id, off, layout.row_bytes as u64)
            } else {
                (
                    IoRequest::new(table_id, off, layout.row_bytes as u64, false),
                    0,
                )
            };
            p.ios.push((pos, row, req, skip));
            slots.push(Slot::Pending);
        }
        p.slots = slots;
        let rows = p.slots.iter().filter(|s| !matches!(s, Slot::Zero)).count();
        p.pool_us = self.pool_cost(layout, rows);
        Ok(p)
    }

    /// Issues the planned reads at `at_us`.
    fn submit(&self, p: &Prepared, at_us: f64) -> Result<Vec<IoCompletion>> {
        if p.ios.is_empty() {
            return Ok(Vec::new());
        }
        let reqs: Vec<IoRequest> = p.ios.iter().map(|(_, _, r, _)| r.clone()).collect();
        let done = self.device.submit_reads(&reqs, at_us)?.wait();
        let c = &self.counters;
        c.device_reads.fetch_add(reqs.len() as u64, Relaxed);
        c.bytes_requested
            .fetch_add((reqs.len() * p.row_bytes) as u64, Relaxed);
        let deferred = done.iter().filter(|d| d.queued_us > 0.0).count() as u64;
        c.deferred_reads.fetch_add(deferred, Relaxed);
        Ok(done)
    }

    /// Fills pending rows, refreshes caches and pools.
    fn finish(
        &self,
        tables: &[LoadedTable],
        mut p: Prepared,
        done: Vec<IoCompletion>,
    ) -> Result<Timed> {
        let io_done = done
            .iter()
            .map(|d| d.complete_at_us)
            .fold(f64::NEG_INFINITY, f64::max);
        let deferred = done.iter().filter(|d| d.queued_us > 0.0).count() as u64;
        let reads = done.len() as u64;
        let layout = &tables[p.table].layout;
        let tid = layout.meta.table_id;
        if let Some(v) = p.done.take() {
            return Ok(Timed {
                vector: v,
                io_done,
                pool_us: if p.pooled_hit { 0.0 } else { p.pool_us },
                reads,
                deferred,
                row_hits: p.row_hits,
                row_misses: p.row_misses,
                pooled_hit: p.pooled_hit,
            });
        }
        let cache = self
            .row_cache
            .as_ref()
            .filter(|_| layout.placement == Placement::SmCached);
        for ((pos, row, _, skip), d) in p.ios.iter().zip(done) {
            if let Some(e) = d.error {
                self.counters.errors.fetch_add(1, Relaxed);
                return Err(e);
            }
            let bytes = d.data[*skip..*skip + layout.row_bytes].to_vec();
            if let Some(rc) = cache {
                rc.insert(CacheKey::new(tid, *row), &bytes);
            }
            p.slots[*pos] = Slot::Ready(bytes);
        }
        let v = Self::pool_slots(layout, &p.slots);
        if let (Some(pc), Some(key)) = (&self.pooled, p.key) {
            pc.audit_sequence(&key, &p.sorted);
            pc.store(key, v.clone());
        }
        Ok(Timed {
            vector: v,
            io_done,
            pool_us: p.pool_us,
            reads,
            deferred,
            row_hits: p.row_hits,
            row_misses: p.row_misses,
            pooled_hit: false,
        })
    }

    /// One table lookup starting at virtual time `at_us`; returns the
    /// vector and the time it is ready.
    pub fn lookup_timed(
        &self,
        table_id: u32,
        indices: &[u64],
        at_us: f64,
    ) -> Result<(PooledVector, f64)> {
        let tables = self.tables.read();
        let p = self.prepare(&tables, table_id, indices)?;
        let t = at_us + p.probe_us;
        let done = self.submit(&p, t)?;
        let r = self.finish(&tables, p, done)?;
        Ok((r.vector, r.io_done.max(t) + r.pool_us))
    }

    pub fn lookup_pooled(&self, table_id: u32, indices: &[u64]) -> Result<PooledVector> {
        self.lookup_timed(table_id, indices, self.device.clock_us())
            .map(|(v, _)| v)
    }

    pub fn execute_query(&self, batch: &QueryBatch, start_us: f64) -> Result<LookupResult> {
        self.execute_query_mode(batch, self.options.mode, start_us)
    }

    pub fn execute_query_mode(
        &self,
        batch: &QueryBatch,
        mode: ExecMode,
        start_us: f64,
    ) -> Result<LookupResult> {
        let tables = self.tables.read();
        self.counters.queries.fetch_add(1, Relaxed);
        // (output slot, list slot, table, indices) per group
        let mut groups: [Vec<(usize, usize, u32, &[u64])>; 2] = [Vec::new(), Vec::new()];
        let mut outputs = Vec::with_capacity(batch.lookups.len());
        for (oi, l) in batch.lookups.iter().enumerate() {
            let ti = *self
                .index
                .get(&l.table_id)
                .ok_or(Error::UnknownTable(l.table_id))?;
            let g = match tables[ti].layout.meta.role {
                Role::User => 0,
                Role::Item => 1,
            };
            for (li, list) in l.lists.iter().enumerate() {
                groups[g].push((oi, li, l.table_id, list));
            }
            outputs.push(TableOutput {
                table_id: l.table_id,
                vectors: vec![PooledVector::default(); l.lists.len()],
            });
        }

        let mut res = LookupResult {
            query_id: batch.query_id,
            ..LookupResult::default()
        };
        let mut group_us = [0.0f64; 2];
        match mode {
            ExecMode::Sequential => {
                let mut t = start_us;
                for (g, lookups) in groups.iter().enumerate() {
                    let begin = t;
                    for &(oi, li, tid, idx) in lookups {
                        let p = self.prepare(&tables, tid, idx)?;
                        t += p.probe_us;
                        let done = self.submit(&p, t)?;
                        let r = self.finish(&tables, p, done)?;
                        t = r.io_done.max(t) + r.pool_us;
                        Self::tally(&mut res, &r);
                        outputs[oi].vectors[li] = r.vector;
                    }
                    group_us[g] = t - begin;
                }
                res.end_to_end_us = t - start_us;
            }
            ExecMode::Overlapped => {
                for (g, lookups) in groups.iter().enumerate() {
                    let mut t = start_us;
                    let mut ready = Vec::with_capacity(lookups.len());
                    for &(oi, li, tid, idx) in lookups {
                        let p = self.prepare(&tables, tid, idx)?;
                        t += p.probe_us;
                        let done = self.submit(&p, t)?;
                        let r = self.finish(&tables, p, done)?;
                        ready.push((r.io_done.max(t), r.pool_us));
                        Self::tally(&mut res, &r);
                        outputs[oi].vectors[li] = r.vector;
                    }
                    // pooling runs on one core, in completion order
                    ready.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let mut cur = t;
                    for (at, pool) in ready {
                        cur = cur.max(at) + pool;
                    }
                    group_us[g] = cur - start_us;
                }
                res.end_to_end_us = group_us[0].max(group_us[1]);
            }
        }
        res.user_us = group_us[0];
        res.item_us = group_us[1];
        res.outputs = outputs;
        Ok(res)
    }

    fn tally(res: &mut LookupResult, r: &Timed) {
        res.row_hits += r.row_hits;
        res.row_misses += r.row_misses;
        res.pooled_hits += r.pooled_hit as u64;
        res.device_reads += r.reads;
        res.deferred_reads += r.deferred;
    }

    /// Rewrites rows (physical row ids of the loaded tables) on the device
    /// and in fast memory, then invalidates cached copies.
    pub fn apply_update(&self, updates: &[(u32, u64, QuantizedRow)]) -> Result<UpdateReport> {
        let mut tables = self.tables.write();
        let mut report = UpdateReport::default();
        let mut touched = BTreeSet::new();
        for (tid, row, q) in updates {
            let Some(&ti) = self.index.get(tid) else {
                report
                    .rejected
                    .push((*tid, *row, Error::UnknownTable(*tid)));
                continue;
            };
            let t = &mut tables[ti];
            let layout = &t.layout;
            if *row >= layout.rows {
                report.rejected.push((
                    *tid,
                    *row,
                    Error::OutOfRange(format!("table {tid}: row {row} >= {}", layout.rows)),
                ));
                continue;
            }
            if q.elem_count() != layout.meta.elem_count {
                report.rejected.push((
                    *tid,
                    *row,
                    Error::ElemMismatch {
                        expected: layout.meta.elem_count,
                        actual: q.elem_count(),
                    },
                ));
                continue;
            }
            let bytes = encode_row(layout.format, q);
            let off = layout.row_offset(*row);
            self.device.write_region(off, &bytes)?;
            let rb = layout.row_bytes;
            if let Some(fm) = &mut t.fm_data {
                fm[*row as usize * rb..(*row as usize + 1) * rb].copy_from_slice(&bytes);
            }
            if let Some(rc) = &self.row_cache {
                rc.invalidate(&CacheKey::new(*tid, *row));
            }
            touched.insert(*tid);
            report.applied += 1;
        }
        if let Some(pc) = &self.pooled {
            for tid in touched {
                pc.invalidate_table(tid);
            }
        }
        Ok(report)
    }

    /// Runs `queries` back to back from fresh counters and reports how
    /// the fast-tier hit rate develops per `window` queries.
    pub fn warmup_stats(&self, queries: &[QueryBatch], window: usize) -> Result<WarmupReport> {
        if window == 0 {
            return Err(Error::InvalidArgument("window must be >= 1".into()));
        }
        self.reset_stats();
        let mut hit_rates = Vec::new();
        let mut lat = Vec::new();
        let mut t = self.device.clock_us();
        for chunk in queries.chunks(window) {
            let before = self.stats();
            let mut sum = 0.0;
            for q in chunk {
                let r = self.execute_query(q, t)?;
                t += r.end_to_end_us;
                sum += r.end_to_end_us;
            }
            let after = self.stats();
            let idx = after.sm_indices - before.sm_indices;
            let reads = after.device_reads - before.device_reads;
            hit_rates.push(if idx == 0 {
                1.0
            } else {
                1.0 - reads as f64 / idx as f64
            });
            lat.push(sum / chunk.len() as f64);
        }
        Ok(WarmupReport::from_windows(
            window,
            hit_rates,
            lat,
            queries.len(),
        ))
    }
}

#[cfg(test)]
mod tests;
