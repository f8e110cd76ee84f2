//! Typed run configuration assembled from a config file and overrides.

use std::path::PathBuf;
use std::str::FromStr;

use sdm_core::harness::DeskScale;
use sdm_core::{
    CacheConfig, DeviceProfile, EngineOptions, ExecMode, PlacementPolicy, PooledConfig,
};

use crate::config::{Config, ConfigError, Section};
use crate::Overrides;

pub const DEFAULT_QUERIES: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Manifest(PathBuf),
    Preset { name: String, scale: DeskScale },
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Trace(PathBuf),
    Zipf { s: f64, repeat_rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Sim,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub window: usize,
    pub cdf_points: usize,
    pub tables: Option<Vec<u32>>,
    /// Used when no model is configured.
    pub dim_bytes: u64,
    pub num_rows: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub queries: Option<u64>,
    pub model: Option<ModelSource>,
    pub batch_items: Option<usize>,
    pub workload: WorkloadSource,
    pub profile: DeviceProfile,
    pub backend: Backend,
    pub engine: EngineOptions,
    pub deny_list: Vec<u32>,
    pub uncached: Vec<u32>,
    pub streams: usize,
    pub warmup_window: usize,
    pub analyze: AnalyzeOptions,
    pub out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn parsed<T: FromStr>(flag: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| invalid(format!("--{flag} `{v}`: {e}")))
}

const TOP_KEYS: &[&str] = &["seed", "queries", "out"];
const MODEL_KEYS: &[&str] = &[
    "preset",
    "manifest",
    "rows_per_table",
    "prune_fraction",
    "idx_type_bytes",
    "batch_items",
];
const WORKLOAD_KEYS: &[&str] = &["trace", "zipf_s", "repeat_rate", "batch_items"];
const DEVICE_KEYS: &[&str] = &[
    "profile",
    "backend",
    "path",
    "saturation_iops",
    "base_latency_us",
    "write_latency_us",
    "block_bytes",
    "supports_subblock",
    "link_bytes_per_us",
    "pdwpd",
    "max_outstanding",
    "channels",
    "sigma",
    "subblock_service_factor",
];
const ENGINE_KEYS: &[&str] = &[
    "policy",
    "fm_budget_bytes",
    "mode",
    "deprune",
    "dequantize_at_load",
    "subblock",
    "throttle_per_table",
    "throttle_tables",
    "row_cache",
    "row_cache_mem_opt_bytes",
    "row_cache_cpu_opt_bytes",
    "row_cache_partitions",
    "dim_route_threshold_bytes",
    "pooled_cache",
    "pooled_capacity_bytes",
    "pooled_partitions",
    "len_threshold",
    "pooled_audit",
    "deny_list",
    "uncached",
];
const BENCH_KEYS: &[&str] = &["streams", "warmup_window"];
const ANALYZE_KEYS: &[&str] = &["window", "cdf_points", "tables", "dim_bytes", "num_rows"];

impl RunConfig {
    pub fn from_config(cfg: &Config, ov: &Overrides) -> Result<Self, ConfigError> {
        let top = cfg.section("");
        top.check_keys(TOP_KEYS)?;
        let seed = match ov.seed {
            Some(s) => s,
            None => top.get_or("seed", 1u64)?,
        };
        let queries = ov.queries.or(top.get("queries")?);
        if queries == Some(0) {
            return Err(invalid("queries must be >= 1"));
        }

        let m = cfg.section("model");
        m.check_keys(MODEL_KEYS)?;
        let model = model_source(cfg, &m, seed)?;

        let w = cfg.section("workload");
        w.check_keys(WORKLOAD_KEYS)?;
        let batch_items = w.get("batch_items")?.or(m.get("batch_items")?);
        if batch_items == Some(0) {
            return Err(invalid("batch_items must be >= 1"));
        }
        let workload = match w.raw("trace") {
            Some(p) => {
                let path = cfg.resolve(p);
                if !path.is_file() {
                    return Err(invalid(format!("trace file {} not found", path.display())));
                }
                WorkloadSource::Trace(path)
            }
            None => {
                let s: f64 = w.get_or("zipf_s", 1.05)?;
                let repeat_rate: f64 = w.get_or("repeat_rate", 0.05)?;
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(invalid("zipf_s must be >= 0"));
                }
                if !(0.0..=1.0).contains(&repeat_rate) {
                    return Err(invalid("repeat_rate must be in [0, 1]"));
                }
                WorkloadSource::Zipf { s, repeat_rate }
            }
        };

        let d = cfg.section("device");
        d.check_keys(DEVICE_KEYS)?;
        let profile = device_profile(&d, ov.profile.as_deref())?;
        let backend = match d.raw("backend").unwrap_or("sim") {
            "sim" => Backend::Sim,
            "file" => Backend::File(
                cfg.resolve(
                    d.raw("path")
                        .ok_or_else(|| invalid("[device] backend = file needs a path"))?,
                ),
            ),
            other => {
                return Err(invalid(format!(
                    "unknown backend `{other}` (expected sim or file)"
                )))
            }
        };

        let e = cfg.section("engine");
        e.check_keys(ENGINE_KEYS)?;
        let engine = engine_options(&e, ov)?;
        let deny_list = e.list("deny_list")?.unwrap_or_default();
        let uncached = e.list("uncached")?.unwrap_or_default();

        let b = cfg.section("bench");
        b.check_keys(BENCH_KEYS)?;
        let streams: usize = b.get_or("streams", 4)?;
        let warmup_window: usize = b.get_or("warmup_window", 100)?;
        if streams == 0 || warmup_window == 0 {
            return Err(invalid("streams and warmup_window must be >= 1"));
        }

        let a = cfg.section("analyze");
        a.check_keys(ANALYZE_KEYS)?;
        let analyze = AnalyzeOptions {
            window: a.get_or("window", sdm_core::workload::DEFAULT_WINDOW)?,
            cdf_points: a.get_or("cdf_points", 100)?,
            tables: a.list("tables")?,
            dim_bytes: a.get_or("dim_bytes", 72)?,
            num_rows: a.get("num_rows")?,
        };
        if analyze.window == 0 || analyze.cdf_points == 0 || analyze.dim_bytes == 0 {
            return Err(invalid(
                "[analyze] window, cdf_points and dim_bytes must be >= 1",
            ));
        }

        let out = match &ov.out {
            Some(p) => Some(p.clone()),
            None => top.raw("out").map(|p| cfg.resolve(p)),
        };

        Ok(RunConfig {
            seed,
            queries,
            model,
            batch_items,
            workload,
            profile,
            backend,
            engine,
            deny_list,
            uncached,
            streams,
            warmup_window,
            analyze,
            out,
        })
    }
}

fn model_source(cfg: &Config, m: &Section, seed: u64) -> Result<Option<ModelSource>, ConfigError> {
    match (m.raw("preset"), m.raw("manifest")) {
        (Some(_), Some(_)) => Err(invalid("[model] takes either preset or manifest, not both")),
        (None, Some(p)) => {
            let path = cfg.resolve(p);
            if !path.is_file() {
                return Err(invalid(format!("manifest {} not found", path.display())));
            }
            Ok(Some(ModelSource::Manifest(path)))
        }
        (Some(name), None) => {
            sdm_core::planner::preset(name).map_err(|e| invalid(e.to_string()))?;
            let def = DeskScale::default();
            let scale = DeskScale {
                rows_per_table: m.get_or("rows_per_table", def.rows_per_table)?,
                prune_fraction: m.get_or("prune_fraction", def.prune_fraction)?,
                idx_type_bytes: m.get_or("idx_type_bytes", def.idx_type_bytes)?,
                batch_items: m.get("batch_items")?,
                seed,
            };
            if scale.rows_per_table == 0 {
                return Err(invalid("rows_per_table must be >= 1"));
            }
            if !(0.0..1.0).contains(&scale.prune_fraction) {
                return Err(invalid("prune_fraction must be in [0, 1)"));
            }
            if scale.idx_type_bytes != 4 && scale.idx_type_bytes != 8 {
                return Err(invalid("idx_type_bytes must be 4 or 8"));
            }
            Ok(Some(ModelSource::Preset {
                name: name.to_string(),
                scale,
            }))
        }
        (None, None) => Ok(None),
    }
}

fn device_profile(d: &Section, name: Option<&str>) -> Result<DeviceProfile, ConfigError> {
    let name = name.or(d.raw("profile")).unwrap_or("nand");
    let mut p = DeviceProfile::by_name(name).map_err(|e| invalid(e.to_string()))?;
    let mut rate_changed = false;
    if let Some(v) = d.get("saturation_iops")? {
        p.saturation_iops = v;
        rate_changed = true;
    }
    if let Some(v) = d.get("base_latency_us")? {
        p.base_latency_us = v;
        rate_changed = true;
    }
    if let Some(v) = d.get("write_latency_us")? {
        p.write_latency_us = v;
    }
    if let Some(v) = d.get("block_bytes")? {
        p.block_bytes = v;
    }
    if let Some(v) = d.flag("supports_subblock")? {
        p.supports_subblock = v;
    }
    if let Some(v) = d.get("link_bytes_per_us")? {
        p.link_bytes_per_us = v;
    }
    if let Some(v) = d.get("pdwpd")? {
        p.pdwpd = v;
    }
    if let Some(v) = d.get("sigma")? {
        p.sigma = v;
    }
    if let Some(v) = d.get("subblock_service_factor")? {
        p.subblock_service_factor = v;
    }
    match d.get("channels")? {
        Some(v) => p.channels = v,
        None if rate_changed => p.channels = p.calibrated_channels(),
        None => {}
    }
    if let Some(v) = d.get("max_outstanding")? {
        p.max_outstanding = v;
    }
    p.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(p)
}

fn engine_options(e: &Section, ov: &Overrides) -> Result<EngineOptions, ConfigError> {
    let def = EngineOptions::default();
    let policy = match ov.policy.as_deref().or(e.raw("policy")) {
        Some(s) => PlacementPolicy::from_str(s).map_err(|err| invalid(err.to_string()))?,
        None => def.policy,
    };
    let mode = match &ov.mode {
        Some(s) => parsed::<ExecMode>("mode", s)?,
        None => e.get_or("mode", def.mode)?,
    };
    let fm_budget_bytes = match ov.fm_budget_bytes {
        Some(b) => b,
        None => e.get_or(
            "fm_budget_bytes",
            if policy == PlacementPolicy::SmOnly {
                def.fm_budget_bytes
            } else {
                0
            },
        )?,
    };
    let deprune = match ov.deprune {
        Some(b) => b,
        None => e.flag("deprune")?.unwrap_or(false),
    };
    let throttle = match (
        e.get::<usize>("throttle_per_table")?,
        e.get::<usize>("throttle_tables")?,
    ) {
        (None, None) => None,
        (a, b) => {
            let t = (a.unwrap_or(usize::MAX), b.unwrap_or(usize::MAX));
            if t.0 == 0 || t.1 == 0 {
                return Err(invalid("throttle caps must be >= 1"));
            }
            Some(t)
        }
    };

    let row_cache = if e.flag("row_cache")?.unwrap_or(true) {
        let cd = CacheConfig::default();
        let cfg = CacheConfig {
            mem_opt_capacity_bytes: e
                .get_or("row_cache_mem_opt_bytes", cd.mem_opt_capacity_bytes)?,
            cpu_opt_capacity_bytes: e
                .get_or("row_cache_cpu_opt_bytes", cd.cpu_opt_capacity_bytes)?,
            partitions: e.get_or("row_cache_partitions", cd.partitions)?,
            dim_route_threshold_bytes: e
                .get_or("dim_route_threshold_bytes", cd.dim_route_threshold_bytes)?,
            ..cd
        };
        if cfg.partitions == 0 {
            return Err(invalid("row_cache_partitions must be >= 1"));
        }
        Some(cfg)
    } else {
        None
    };

    let pooled = if e.flag("pooled_cache")?.unwrap_or(true) {
        let pd = PooledConfig::default();
        let cfg = PooledConfig {
            capacity_bytes: e.get_or("pooled_capacity_bytes", pd.capacity_bytes)?,
            len_threshold: match ov.len_threshold {
                Some(t) => t,
                None => e.get_or("len_threshold", pd.len_threshold)?,
            },
            partitions: e.get_or("pooled_partitions", pd.partitions)?,
        };
        if cfg.partitions == 0 {
            return Err(invalid("pooled_partitions must be >= 1"));
        }
        Some(cfg)
    } else {
        None
    };

    Ok(EngineOptions {
        load: sdm_core::LoadOptions {
            deprune,
            dequantize_at_load: e.flag("dequantize_at_load")?.unwrap_or(false),
        },
        policy,
        fm_budget_bytes,
        row_cache,
        pooled,
        pooled_audit: e.flag("pooled_audit")?.unwrap_or(false),
        mode,
        throttle,
        subblock: e.flag("subblock")?.unwrap_or(def.subblock),
        ..def
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc(text: &str, ov: &Overrides) -> Result<RunConfig, ConfigError> {
        RunConfig::from_config(&Config::parse(text).unwrap(), ov)
    }

    #[test]
    fn defaults() {
        let r = rc("[model]\npreset = M1\n", &Overrides::default()).unwrap();
        assert_eq!(r.seed, 1);
        assert_eq!(r.profile.name, "nand");
        assert_eq!(r.engine.mode, ExecMode::Overlapped);
        assert_eq!(r.engine.policy, PlacementPolicy::SmOnly);
        assert!(matches!(r.workload, WorkloadSource::Zipf { .. }));
        assert!(matches!(r.model, Some(ModelSource::Preset { .. })));
    }

    #[test]
    fn overrides_win() {
        let text = "seed = 3\n[engine]\nmode = seq\npolicy = sm_only\nlen_threshold = 4\n[device]\nprofile = nand\n";
        let ov = Overrides {
            seed: Some(9),
            queries: Some(50),
            profile: Some("optane".into()),
            policy: Some("fixed_fm".into()),
            fm_budget_bytes: Some(1234),
            len_threshold: Some(8),
            deprune: Some(true),
            mode: Some("overlap".into()),
            out: Some("x.csv".into()),
        };
        let r = rc(text, &ov).unwrap();
        assert_eq!(r.seed, 9);
        assert_eq!(r.queries, Some(50));
        assert_eq!(r.profile.name, "optane");
        assert_eq!(r.engine.policy, PlacementPolicy::FixedFm);
        assert_eq!(r.engine.fm_budget_bytes, 1234);
        assert_eq!(r.engine.pooled.as_ref().unwrap().len_threshold, 8);
        assert!(r.engine.load.deprune);
        assert_eq!(r.engine.mode, ExecMode::Overlapped);
        assert_eq!(r.out, Some(PathBuf::from("x.csv")));
    }

    #[test]
    fn inline_profile_recalibrates_channels() {
        let r = rc(
            "[device]\nprofile = optane\nsaturation_iops = 2000000\n",
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(r.profile.channels, 20);
    }

    #[test]
    fn caches_can_be_disabled() {
        let r = rc(
            "[engine]\nrow_cache = off\npooled_cache = no\n",
            &Overrides::default(),
        )
        .unwrap();
        assert!(r.engine.row_cache.is_none() && r.engine.pooled.is_none());
    }

    #[test]
    fn rejects_bad_knobs() {
        let d = Overrides::default();
        for text in [
            "[model]\npreset = M9\n",
            "[model]\npreset = M1\nmanifest = x\n",
            "[model]\nmanifest = /does/not/exist\n",
            "[workload]\nrepeat_rate = 1.5\n",
            "[workload]\ntrace = /does/not/exist\n",
            "[device]\nprofile = tape\n",
            "[engine]\nmode = async\n",
            "[engine]\nrow_cache_partitions = 0\n",
            "[bench]\nstreams = 0\n",
            "[engine]\ncolour = blue\n",
            "queries = 0\n",
        ] {
            assert!(rc(text, &d).is_err(), "{text}");
        }
        let bad = Overrides {
            mode: Some("fast".into()),
            ..Overrides::default()
        };
        assert!(rc("", &bad).is_err());
    }
}
