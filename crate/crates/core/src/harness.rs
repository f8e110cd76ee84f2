//! Closed-loop benchmark driver and report assembly.
//!
//! `streams` virtual clients each keep one query in flight. The stream
//! that frees up first issues the next query of the input sequence, so a
//! run is a deterministic function of the engine state and the queries.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::device::DeviceStats;
use crate::embedding::Role;
use crate::engine::{
    Engine, EngineStats, ExecMode, ModelManifest, Placement, QueryBatch, SyntheticModel,
    TableGroup, WarmupReport,
};
use crate::error::{Error, Result};
use crate::planner::Preset;
use crate::stats::{LatencyRecorder, LatencySummary};
use crate::workload::{PoolingDist, TableWorkload, ZipfSpec};

pub const CSV_HEADER: &str = "# sdm-embstore report v1";

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub streams: usize,
    /// Queries per warmup window.
    pub warmup_window: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            streams: 4,
            warmup_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub streams: usize,
    pub mode: ExecMode,
    pub profile: String,
    pub queries: u64,
    pub failed_queries: u64,
    pub first_error: Option<String>,
    pub duration_us: f64,
    pub qps: f64,
    pub e2e: LatencySummary,
    pub user: LatencySummary,
    pub item: LatencySummary,
    pub row_hit_rate: f64,
    pub pooled_hit_rate: f64,
    pub offered_iops: f64,
    pub sustained_iops: f64,
    pub bytes_requested: u64,
    pub bytes_transferred: u64,
    pub read_amplification: f64,
    pub fm_bytes_resident: u64,
    /// Queries whose end-to-end time equals the item path.
    pub item_bound_queries: u64,
    /// Queries with at least one throttled read.
    pub deferred_queries: u64,
    pub rejected_for_queue_full: u64,
    pub engine: EngineStats,
    pub device: DeviceStats,
    pub warmup: WarmupReport,
    pub checks: Vec<Check>,
}

impl BenchReport {
    pub fn reconciled(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn item_bound_fraction(&self) -> f64 {
        let done = self.queries - self.failed_queries;
        if done == 0 {
            0.0
        } else {
            self.item_bound_queries as f64 / done as f64
        }
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:.6}");
        let mut r = vec![
            ("profile", self.profile.clone()),
            ("mode", self.mode.to_string()),
            ("streams", self.streams.to_string()),
            ("queries", self.queries.to_string()),
            ("failed_queries", self.failed_queries.to_string()),
            ("duration_us", f(self.duration_us)),
            ("qps", f(self.qps)),
        ];
        for (name, s) in [
            ("e2e", &self.e2e),
            ("user", &self.user),
            ("item", &self.item),
        ] {
            let keys: [&'static str; 4] = match name {
                "e2e" => ["e2e_mean_us", "e2e_p50_us", "e2e_p95_us", "e2e_p99_us"],
                "user" => ["user_mean_us", "user_p50_us", "user_p95_us", "user_p99_us"],
                _ => ["item_mean_us", "item_p50_us", "item_p95_us", "item_p99_us"],
            };
            for (k, v) in keys.into_iter().zip([s.mean, s.p50, s.p95, s.p99]) {
                r.push((k, f(v)));
            }
        }
        r.extend([
            ("row_hit_rate", f(self.row_hit_rate)),
            ("pooled_hit_rate", f(self.pooled_hit_rate)),
            ("offered_iops", f(self.offered_iops)),
            ("sustained_iops", f(self.sustained_iops)),
            ("sm_row_lookups", self.engine.sm_row_lookups.to_string()),
            ("device_reads", self.engine.device_reads.to_string()),
            ("bytes_requested", self.bytes_requested.to_string()),
            ("bytes_transferred", self.bytes_transferred.to_string()),
            ("read_amplification", f(self.read_amplification)),
            ("fm_bytes_resident", self.fm_bytes_resident.to_string()),
            ("item_bound_fraction", f(self.item_bound_fraction())),
            ("deferred_queries", self.deferred_queries.to_string()),
            ("deferred_reads", self.engine.deferred_reads.to_string()),
            (
                "rejected_for_queue_full",
                self.rejected_for_queue_full.to_string(),
            ),
            ("warmup_window", self.warmup.window.to_string()),
            ("warmup_steady_hit_rate", f(self.warmup.steady_hit_rate)),
            (
                "warmup_queries_to_steady",
                self.warmup
                    .queries_to_steady
                    .map_or_else(|| "none".to_string(), |q| q.to_string()),
            ),
            ("warmup_qps_ratio", f(self.warmup.qps_ratio)),
            ("reconciled", self.reconciled().to_string()),
        ]);
        r
    }

    /// `metric,value` rows under the versioned header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\nmetric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        if let Some(e) = &self.first_error {
            let _ = writeln!(out, "first error: {e}");
        }
        for c in self.checks.iter().filter(|c| !c.ok) {
            let _ = writeln!(out, "reconciliation failed: {} ({})", c.name, c.detail);
        }
        out
    }
}

/// Runs `queries` to completion. Counters are reset first; cache contents
/// are left as they are.
pub fn run(engine: &Engine, queries: &[QueryBatch], cfg: &HarnessConfig) -> Result<BenchReport> {
    if cfg.streams == 0 || cfg.warmup_window == 0 {
        return Err(Error::InvalidArgument(
            "streams and warmup window must be >= 1".into(),
        ));
    }
    engine.reset_stats();
    let start = engine.device().clock_us();
    let mut free = vec![start; cfg.streams];
    let (mut e2e, mut user, mut item) = (
        LatencyRecorder::new(),
        LatencyRecorder::new(),
        LatencyRecorder::new(),
    );
    let mut failed = 0u64;
    let mut first_error = None;
    let mut item_bound = 0u64;
    let mut deferred_q = 0u64;
    let (mut row_hits, mut row_lookups) = (0u64, 0u64);
    let mut hit_rates = Vec::new();
    let mut window_lat = Vec::new();
    let mut window_start = engine.stats();
    let mut window_sum = 0.0;
    let mut window_n = 0usize;

    for q in queries {
        let s = (0..free.len())
            .min_by(|&a, &b| free[a].total_cmp(&free[b]))
            .expect("at least one stream");
        match engine.execute_query(q, free[s]) {
            Ok(r) => {
                free[s] += r.end_to_end_us;
                e2e.record(r.end_to_end_us);
                user.record(r.user_us);
                item.record(r.item_us);
                if r.end_to_end_us == r.item_us {
                    item_bound += 1;
                }
                if r.deferred_reads > 0 {
                    deferred_q += 1;
                }
                row_hits += r.row_hits;
                row_lookups += r.row_hits + r.row_misses;
                window_sum += r.end_to_end_us;
            }
            Err(e) => {
                log::warn!("query {} failed: {e}", q.query_id);
                failed += 1;
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
        window_n += 1;
        if window_n == cfg.warmup_window {
            let now = engine.stats();
            hit_rates.push(fast_tier_hit_rate(&window_start, &now));
            window_lat.push(window_sum / window_n as f64);
            window_start = now;
            window_sum = 0.0;
            window_n = 0;
        }
    }
    if window_n > 0 {
        let now = engine.stats();
        hit_rates.push(fast_tier_hit_rate(&window_start, &now));
        window_lat.push(window_sum / window_n as f64);
    }

    let stats = engine.stats();
    let device = engine.device().stats();
    let end = free.iter().copied().fold(start, f64::max);
    let duration_us = end - start;
    let per_sec = |n: u64| {
        if duration_us > 0.0 {
            n as f64 * 1e6 / duration_us
        } else {
            0.0
        }
    };
    let mut checks = reconcile(engine, &stats, &device);
    checks.push(Check {
        name: "row hits + misses = row lookups",
        ok: row_lookups == stats.row_cache.lookups() && row_hits == stats.row_cache.hits,
        detail: format!(
            "per query {row_hits}/{row_lookups}, cache {}/{}",
            stats.row_cache.hits,
            stats.row_cache.lookups()
        ),
    });

    Ok(BenchReport {
        streams: cfg.streams,
        mode: engine.options().mode,
        profile: engine.device().profile().name.clone(),
        queries: queries.len() as u64,
        failed_queries: failed,
        first_error,
        duration_us,
        qps: per_sec(queries.len() as u64 - failed),
        e2e: e2e.summary(),
        user: user.summary(),
        item: item.summary(),
        row_hit_rate: stats.row_cache.hit_rate(),
        pooled_hit_rate: stats.pooled.hit_rate(),
        offered_iops: per_sec(stats.sm_row_lookups),
        sustained_iops: per_sec(stats.device_reads),
        bytes_requested: stats.bytes_requested,
        bytes_transferred: device.bytes_transferred,
        read_amplification: if stats.bytes_requested == 0 {
            1.0
        } else {
            device.bytes_transferred as f64 / stats.bytes_requested as f64
        },
        fm_bytes_resident: engine.fm_bytes_resident(),
        item_bound_queries: item_bound,
        deferred_queries: deferred_q,
        rejected_for_queue_full: device.rejected_for_queue_full,
        warmup: WarmupReport::from_windows(cfg.warmup_window, hit_rates, window_lat, queries.len()),
        engine: stats,
        device,
        checks,
    })
}

fn fast_tier_hit_rate(before: &EngineStats, after: &EngineStats) -> f64 {
    let idx = after.sm_indices - before.sm_indices;
    let reads = after.device_reads - before.device_reads;
    if idx == 0 {
        1.0
    } else {
        1.0 - reads as f64 / idx as f64
    }
}

fn reconcile(engine: &Engine, stats: &EngineStats, device: &DeviceStats) -> Vec<Check> {
    let mut checks = vec![
        Check {
            name: "device reads = engine reads",
            ok: device.reads == stats.device_reads,
            detail: format!("device {}, engine {}", device.reads, stats.device_reads),
        },
        Check {
            name: "device reads = row lookups - row hits",
            ok: stats.device_reads + stats.row_cache.hits == stats.sm_row_lookups,
            detail: format!(
                "{} + {} vs {}",
                stats.device_reads, stats.row_cache.hits, stats.sm_row_lookups
            ),
        },
    ];
    let ids = engine.table_ids();
    let layouts: Vec<_> = ids.iter().filter_map(|&t| engine.layout(t)).collect();
    let all_cached = engine.row_cache().is_some()
        && layouts.iter().all(|l| l.placement != Placement::SmUncached);
    if all_cached {
        let misses: u64 = stats.row_cache.per_table.iter().map(|&(_, _, m)| m).sum();
        let bytes: u64 = stats
            .row_cache
            .per_table
            .iter()
            .map(|&(t, _, m)| {
                m * layouts
                    .iter()
                    .find(|l| l.meta.table_id == t)
                    .map_or(0, |l| l.row_bytes as u64)
            })
            .sum();
        checks.push(Check {
            name: "device reads = sum of per-table misses",
            ok: misses == stats.device_reads,
            detail: format!("misses {misses}, reads {}", stats.device_reads),
        });
        checks.push(Check {
            name: "requested bytes = sum of miss row sizes",
            ok: bytes == stats.bytes_requested,
            detail: format!("misses {bytes} B, requested {} B", stats.bytes_requested),
        });
    }
    checks.push(Check {
        name: "transferred >= requested",
        ok: device.bytes_transferred >= stats.bytes_requested,
        detail: format!(
            "transferred {} B, requested {} B",
            device.bytes_transferred, stats.bytes_requested
        ),
    });
    checks
}

/// Desk-scale stand-in for a planner preset.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskScale {
    pub rows_per_table: u64,
    pub prune_fraction: f64,
    pub idx_type_bytes: u8,
    /// Overrides the preset's item batch.
    pub batch_items: Option<usize>,
    pub seed: u64,
}

impl Default for DeskScale {
    fn default() -> Self {
        Self {
            rows_per_table: 10_000,
            prune_fraction: 0.0,
            idx_type_bytes: 4,
            batch_items: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetModel {
    pub synthetic: SyntheticModel,
    /// Tables the preset keeps in fast memory.
    pub fast_tables: BTreeSet<u32>,
    pub batch_items: usize,
}

/// Same table mix as the preset, quantized rows sized to its dims, rows
/// scaled down. Fast-memory tables are returned for the deny list.
pub fn preset_model(preset: &Preset, scale: &DeskScale) -> Result<PresetModel> {
    let mut groups: Vec<(TableGroup, bool)> = Vec::new();
    for t in &preset.model.tables {
        let elem = (t.dim_bytes.round() as usize).saturating_sub(8).max(1);
        match groups.last_mut() {
            Some((g, sm))
                if *sm == t.on_sm
                    && g.role == t.role
                    && g.elem_count == elem
                    && g.pooling == t.pooling =>
            {
                g.count += 1
            }
            _ => groups.push((
                TableGroup {
                    count: 1,
                    role: t.role,
                    rows: scale.rows_per_table,
                    elem_count: elem,
                    pooling: t.pooling,
                    prune_fraction: scale.prune_fraction,
                },
                t.on_sm,
            )),
        }
    }
    let mut fast_tables = BTreeSet::new();
    let mut id = 0u32;
    for (g, sm) in &groups {
        if !sm {
            fast_tables.extend(id..id + g.count as u32);
        }
        id += g.count as u32;
    }
    Ok(PresetModel {
        synthetic: SyntheticModel {
            groups: groups.into_iter().map(|(g, _)| g).collect(),
            idx_type_bytes: scale.idx_type_bytes,
            seed: scale.seed,
        },
        fast_tables,
        batch_items: scale
            .batch_items
            .unwrap_or(preset.model.batch_items.round() as usize),
    })
}

/// Zipf workload over every table of `manifest`, Poisson pooling at each
/// table's average pooling factor.
pub fn manifest_workload(
    manifest: &ModelManifest,
    s: f64,
    repeat_rate: f64,
    batch_items: usize,
    seed: u64,
) -> ZipfSpec {
    ZipfSpec {
        tables: manifest
            .tables
            .iter()
            .map(|t| TableWorkload {
                table_id: t.table_id,
                num_rows: manifest
                    .pruning
                    .get(&t.table_id)
                    .map_or(t.num_rows, |m| m.unpruned_rows()),
                role: t.role,
                s,
                pooling: PoolingDist::Poisson(t.avg_pooling_factor),
            })
            .collect(),
        repeat_rate,
        batch_items: if manifest.tables.iter().any(|t| t.role == Role::Item) {
            batch_items
        } else {
            1
        },
        seed,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::device::{DeviceProfile, SimDevice};
    use crate::engine::{EngineOptions, LoadOptions};
    use crate::planner::preset_m1;
    use crate::row_cache::CacheConfig;
    use crate::workload::generate_trace;
    use crate::PooledConfig;

    fn setup(
        cache: Option<CacheConfig>,
        streams: usize,
        seed: u64,
    ) -> (Engine, Vec<QueryBatch>, HarnessConfig) {
        let scale = DeskScale {
            rows_per_table: 2_000,
            batch_items: Some(4),
            seed,
            ..DeskScale::default()
        };
        let pm = preset_model(&preset_m1(), &scale).unwrap();
        let (mut manifest, tables) = pm.synthetic.build().unwrap();
        manifest.deny_list = pm.fast_tables.clone();
        let profile = DeviceProfile::nand();
        let cap = Engine::device_footprint(&manifest, LoadOptions::default(), profile.block_bytes);
        let dev = Arc::new(SimDevice::new(profile, cap, seed).unwrap());
        let opts = EngineOptions {
            row_cache: cache,
            pooled: Some(PooledConfig::default()),
            ..EngineOptions::default()
        };
        let engine = Engine::load_model(&manifest, tables, dev, opts).unwrap();
        let spec = manifest_workload(&manifest, 1.05, 0.05, pm.batch_items, seed);
        let trace = generate_trace(&spec, 300).unwrap();
        let queries = trace.records.iter().map(QueryBatch::from).collect();
        (
            engine,
            queries,
            HarnessConfig {
                streams,
                warmup_window: 50,
            },
        )
    }

    fn cache() -> Option<CacheConfig> {
        Some(CacheConfig::with_capacity(4 << 20, 0, 4))
    }

    #[test]
    fn preset_groups_and_fast_tables() {
        let pm = preset_model(&preset_m1(), &DeskScale::default()).unwrap();
        let counts: Vec<usize> = pm.synthetic.groups.iter().map(|g| g.count).collect();
        assert_eq!(counts, vec![50, 11, 30]);
        assert_eq!(pm.synthetic.groups[0].elem_count, 43);
        assert_eq!(pm.synthetic.groups[2].elem_count, 61);
        assert_eq!(pm.fast_tables, (50..91).collect());
        assert_eq!(pm.batch_items, 50);
    }

    #[test]
    fn report_reconciles_and_orders_iops() {
        let (engine, queries, cfg) = setup(cache(), 4, 3);
        let r = run(&engine, &queries, &cfg).unwrap();
        assert!(r.reconciled(), "{}", r.to_text());
        assert_eq!(r.failed_queries, 0);
        assert!(r.row_hit_rate > 0.0 && r.pooled_hit_rate > 0.0);
        assert!(r.sustained_iops < r.offered_iops);
        assert!(r.qps > 0.0);
        assert!(r.e2e.p50 <= r.e2e.p95 && r.e2e.p95 <= r.e2e.p99);
        assert_eq!(r.warmup.hit_rates.len(), 6);
    }

    #[test]
    fn no_row_cache_reads_every_row() {
        let (engine, queries, cfg) = setup(None, 2, 3);
        let r = run(&engine, &queries, &cfg).unwrap();
        assert!(r.reconciled());
        assert_eq!(r.engine.device_reads, r.engine.sm_row_lookups);
        assert_eq!(r.offered_iops, r.sustained_iops);
    }

    #[test]
    fn same_seed_same_csv() {
        let a = {
            let (e, q, c) = setup(cache(), 3, 9);
            run(&e, &q, &c).unwrap().to_csv()
        };
        let b = {
            let (e, q, c) = setup(cache(), 3, 9);
            run(&e, &q, &c).unwrap().to_csv()
        };
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
    }

    #[test]
    fn more_streams_more_throughput() {
        let (e1, q1, c1) = setup(cache(), 1, 5);
        let one = run(&e1, &q1, &c1).unwrap();
        let (e8, q8, c8) = setup(cache(), 8, 5);
        let eight = run(&e8, &q8, &c8).unwrap();
        assert!(eight.qps > one.qps);
    }

    #[test]
    fn zero_streams_refused() {
        let (e, q, _) = setup(None, 1, 1);
        let cfg = HarnessConfig {
            streams: 0,
            warmup_window: 1,
        };
        assert!(run(&e, &q, &cfg).is_err());
    }
}
