use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use sdm_core::device::FileDevice;
use sdm_core::harness::{self, BenchReport, HarnessConfig, CSV_HEADER};
use sdm_core::planner::{
    self, fleet_power, iops_required, scenario_avoid_scale_out, scenario_multi_tenancy,
    scenario_simpler_hw, warmup_overprovision, HostOption, IopsRequirement, OptionResult,
    ScenarioSpec, Warmup,
};
use sdm_core::workload::{
    self, generate_trace, read_trace_file, share_at, write_trace_file, Trace,
};
use sdm_core::{BlockDevice, EmbeddingTable, Engine, ModelManifest, QueryBatch, SimDevice};

use crate::config::{Config, ConfigError};
use crate::run::{Backend, ModelSource, RunConfig, WorkloadSource, DEFAULT_QUERIES};
use crate::{CliError, Overrides};

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(ConfigError::Invalid(msg.into()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(sdm_core::Error::from)?;
    }
    fs::write(path, text).map_err(sdm_core::Error::from)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub struct Model {
    pub manifest: ModelManifest,
    pub tables: Vec<EmbeddingTable>,
    pub batch_items: usize,
}

pub fn build_model(rc: &RunConfig) -> Result<Model> {
    let source = rc
        .model
        .as_ref()
        .ok_or_else(|| invalid("[model] needs a preset or a manifest"))?;
    let (mut manifest, tables, preset_batch) = match source {
        ModelSource::Preset { name, scale } => {
            let preset = planner::preset(name)?;
            let pm = harness::preset_model(&preset, scale)?;
            let (mut manifest, tables) = pm.synthetic.build()?;
            manifest.deny_list = pm.fast_tables;
            (manifest, tables, Some(pm.batch_items))
        }
        ModelSource::Manifest(path) => {
            let manifest = ModelManifest::read(path)?;
            let tables = manifest.synthesize_tables(rc.seed)?;
            (manifest, tables, None)
        }
    };
    manifest.deny_list.extend(rc.deny_list.iter().copied());
    manifest.uncached.extend(rc.uncached.iter().copied());
    manifest.validate()?;
    Ok(Model {
        manifest,
        tables,
        batch_items: rc.batch_items.or(preset_batch).unwrap_or(1),
    })
}

fn load_trace(rc: &RunConfig, model: Option<&Model>) -> Result<Trace> {
    let mut trace = match &rc.workload {
        WorkloadSource::Trace(path) => read_trace_file(path)?,
        WorkloadSource::Zipf { s, repeat_rate } => {
            let m = model.ok_or_else(|| invalid("generating a trace needs [model]"))?;
            let spec =
                harness::manifest_workload(&m.manifest, *s, *repeat_rate, m.batch_items, rc.seed);
            generate_trace(&spec, rc.queries.unwrap_or(DEFAULT_QUERIES))?
        }
    };
    if let Some(n) = rc.queries {
        trace.records.truncate(n as usize);
    }
    Ok(trace)
}

pub fn cmd_bench(rc: &RunConfig) -> Result<BenchReport> {
    let model = build_model(rc)?;
    let trace = load_trace(rc, Some(&model))?;
    let queries: Vec<QueryBatch> = trace.records.iter().map(QueryBatch::from).collect();
    let cap = Engine::device_footprint(&model.manifest, rc.engine.load, rc.profile.block_bytes);
    let device: Arc<dyn BlockDevice> = match &rc.backend {
        Backend::Sim => Arc::new(SimDevice::new(rc.profile.clone(), cap, rc.seed)?),
        Backend::File(path) => Arc::new(FileDevice::open(path, rc.profile.clone(), cap)?),
    };
    info!(
        "loading {} tables ({} B on device) onto {}",
        model.manifest.tables.len(),
        cap,
        rc.profile.name
    );
    let engine = Engine::load_model(&model.manifest, model.tables, device, rc.engine.clone())?;
    info!(
        "running {} queries on {} streams",
        queries.len(),
        rc.streams
    );
    let report = harness::run(
        &engine,
        &queries,
        &HarnessConfig {
            streams: rc.streams,
            warmup_window: rc.warmup_window,
        },
    )?;
    if report.failed_queries > 0 {
        log::warn!(
            "{} of {} queries failed; first: {}",
            report.failed_queries,
            report.queries,
            report.first_error.as_deref().unwrap_or("?")
        );
    }
    for c in report.checks.iter().filter(|c| !c.ok) {
        log::error!("reconciliation failed: {} ({})", c.name, c.detail);
    }
    if let Some(out) = &rc.out {
        write_file(out, &report.to_csv())?;
    }
    Ok(report)
}

pub fn cmd_gen_trace(rc: &RunConfig) -> Result<Trace> {
    if matches!(rc.workload, WorkloadSource::Trace(_)) {
        return Err(invalid(
            "gen-trace generates a workload; drop [workload] trace",
        ));
    }
    let out = rc
        .out
        .as_ref()
        .ok_or_else(|| invalid("gen-trace needs --out"))?;
    let model = build_model(rc)?;
    let trace = load_trace(rc, Some(&model))?;
    write_trace_file(&trace, out)?;
    info!(
        "wrote {} queries ({} lookups) to {}",
        trace.records.len(),
        trace.total_lookups(),
        out.display()
    );
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableLocality {
    pub table_id: u32,
    pub accesses: u64,
    pub num_rows: Option<u64>,
    pub dim_bytes: u64,
    /// `(row_fraction, access_share)` at evenly spaced fractions.
    pub cdf: Vec<(f64, f64)>,
    pub top10_share: f64,
    pub diagonal_deviation: f64,
    pub spatial: Vec<f64>,
    pub mean_spatial: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutput {
    pub tables: Vec<TableLocality>,
    pub temporal_csv: String,
    pub spatial_csv: String,
}

impl AnalyzeOutput {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>6}  {:>10}  {:>10}  {:>9}  {:>9}  {:>8}\n",
            "table", "accesses", "rows", "top10%", "max|dev|", "spatial"
        );
        for t in &self.tables {
            let _ = writeln!(
                out,
                "{:>6}  {:>10}  {:>10}  {:>9.4}  {:>9.4}  {:>8.4}",
                t.table_id,
                t.accesses,
                t.num_rows.map_or_else(|| "-".into(), |n| n.to_string()),
                t.top10_share,
                t.diagonal_deviation,
                t.mean_spatial
            );
        }
        out
    }
}

/// `<out>` minus a `.csv` extension, plus `.temporal.csv` / `.spatial.csv`.
pub fn analyze_paths(out: &Path) -> (PathBuf, PathBuf) {
    let stem = if out.extension().is_some_and(|e| e == "csv") {
        out.with_extension("")
    } else {
        out.to_path_buf()
    };
    let with = |suffix: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".temporal.csv"), with(".spatial.csv"))
}

pub fn cmd_analyze(rc: &RunConfig) -> Result<AnalyzeOutput> {
    if !matches!(rc.workload, WorkloadSource::Trace(_)) {
        return Err(invalid("analyze needs [workload] trace"));
    }
    let model = match &rc.model {
        Some(_) => Some(build_model(rc)?),
        None => None,
    };
    let trace = load_trace(rc, model.as_ref())?;
    let a = &rc.analyze;
    let ids = a.tables.clone().unwrap_or_else(|| trace.tables.clone());
    let mut temporal_csv = format!("{CSV_HEADER}\ntable_id,row_fraction,access_share\n");
    let mut spatial_csv = format!("{CSV_HEADER}\ntable_id,window_index,metric\n");
    let mut tables = Vec::with_capacity(ids.len());
    for tid in ids {
        if !trace.tables.contains(&tid) {
            return Err(invalid(format!("table {tid} is not in the trace")));
        }
        let (num_rows, dim_bytes) = match &model {
            Some(m) => {
                let meta = m
                    .manifest
                    .table(tid)
                    .ok_or(sdm_core::Error::UnknownTable(tid))?;
                let rows = m
                    .manifest
                    .pruning
                    .get(&tid)
                    .map_or(meta.num_rows, |p| p.unpruned_rows());
                (Some(rows), meta.dim_bytes as u64)
            }
            None => (a.num_rows, a.dim_bytes),
        };
        let rep = workload::analyze(&trace, tid, num_rows, dim_bytes, a.window)?;
        let cdf: Vec<(f64, f64)> = if rep.cdf.is_empty() {
            Vec::new()
        } else {
            (1..=a.cdf_points)
                .map(|k| {
                    let f = k as f64 / a.cdf_points as f64;
                    (f, share_at(&rep.cdf, f))
                })
                .collect()
        };
        for (f, s) in &cdf {
            let _ = writeln!(temporal_csv, "{tid},{f:.6},{s:.6}");
        }
        for (i, m) in rep.spatial.iter().enumerate() {
            let _ = writeln!(spatial_csv, "{tid},{i},{m:.6}");
        }
        tables.push(TableLocality {
            table_id: tid,
            accesses: trace.accesses(tid).count() as u64,
            num_rows,
            dim_bytes,
            top10_share: share_at(&rep.cdf, 0.1),
            diagonal_deviation: workload::diagonal_deviation(&rep.cdf),
            mean_spatial: rep.mean_spatial(),
            spatial: rep.spatial,
            cdf,
        });
    }
    let out = AnalyzeOutput {
        tables,
        temporal_csv,
        spatial_csv,
    };
    if let Some(path) = &rc.out {
        let (t, s) = analyze_paths(path);
        write_file(&t, &out.temporal_csv)?;
        write_file(&s, &out.spatial_csv)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub scenario: Option<(String, Vec<OptionResult>)>,
    /// Over-provisioning fraction for rolling updates.
    pub warmup: Option<f64>,
    pub iops: Vec<(String, f64, f64, IopsRequirement)>,
    /// `(model_gb, capacity_gb, pdwpd, interval)`
    pub endurance: Option<(f64, f64, f64, f64)>,
}

impl PlanReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        if let Some((name, rows)) = &self.scenario {
            out.push_str("scenario,option,hosts,aux_hosts,power,fleet_power,savings_pct\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{name},{},{:.0},{:.0},{:.2},{:.3},{:.1}",
                    r.name, r.hosts, r.aux_hosts, r.power, r.fleet_power, r.savings_pct
                );
            }
        }
        if let Some(w) = self.warmup {
            out.push_str("\nmetric,value\n");
            let _ = writeln!(out, "warmup_overprovision_pct,{:.2}", w * 100.0);
        }
        if !self.iops.is_empty() {
            out.push_str("\npreset,qps,hit_rate,offered_iops,sustained_iops,ssds_needed\n");
            for (name, qps, hit, r) in &self.iops {
                let _ = writeln!(
                    out,
                    "{name},{qps},{hit},{:.0},{:.0},{}",
                    r.offered_iops, r.sustained_iops, r.ssds_needed
                );
            }
        }
        if let Some((m, c, p, i)) = self.endurance {
            out.push_str("\nmodel_gb,capacity_gb,pdwpd,update_interval_days\n");
            let _ = writeln!(out, "{m},{c},{p},{i:.3}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some((name, rows)) = &self.scenario {
            let _ = writeln!(out, "scenario {name}");
            let _ = writeln!(
                out,
                "{:<16} {:>10} {:>9} {:>12} {:>12} {:>8}",
                "option", "hosts", "aux", "power", "fleet", "saving"
            );
            for r in rows {
                let _ = writeln!(
                    out,
                    "{:<16} {:>10.0} {:>9.0} {:>12.2} {:>12.3} {:>7.1}%",
                    r.name, r.hosts, r.aux_hosts, r.power, r.fleet_power, r.savings_pct
                );
            }
        }
        if let Some(w) = self.warmup {
            let _ = writeln!(out, "warmup over-provisioning {:.2}%", w * 100.0);
        }
        if !self.iops.is_empty() {
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>6} {:>14} {:>14} {:>5}",
                "preset", "qps", "hit", "offered", "sustained", "ssds"
            );
            for (name, qps, hit, r) in &self.iops {
                let _ = writeln!(
                    out,
                    "{:<8} {:>8} {:>6} {:>14.0} {:>14.0} {:>5}",
                    name, qps, hit, r.offered_iops, r.sustained_iops, r.ssds_needed
                );
            }
        }
        if let Some((m, c, p, i)) = self.endurance {
            let _ = writeln!(
                out,
                "update interval {i:.3} days ({m} GB model, {c} GB capacity, pDWPD {p})"
            );
        }
        out
    }
}

const SCENARIO_KEYS: &[&str] = &["name", "builtin", "demand_qps"];
const OPTION_KEYS: &[&str] = &[
    "qps_per_host",
    "power",
    "aux_ratio",
    "aux_power",
    "utilization",
];

fn scenario_from(cfg: &Config) -> std::result::Result<Option<ScenarioSpec>, ConfigError> {
    let s = cfg.section("scenario");
    s.check_keys(SCENARIO_KEYS)?;
    let mut spec = match s.raw("builtin") {
        Some("simpler-hw") => Some(scenario_simpler_hw()),
        Some("avoid-scale-out") => Some(scenario_avoid_scale_out()),
        Some("multi-tenancy") => Some(scenario_multi_tenancy()),
        Some(other) => {
            return Err(ConfigError::Invalid(format!(
                "unknown builtin scenario `{other}` (simpler-hw, avoid-scale-out, multi-tenancy)"
            )))
        }
        None => None,
    };
    let mut options = Vec::new();
    for (name, sec) in cfg.with_prefix("option") {
        sec.check_keys(OPTION_KEYS)?;
        let mut o = HostOption::new(name, sec.get("qps_per_host")?, sec.require("power")?);
        o.aux_ratio = sec.get_or("aux_ratio", 0.0)?;
        o.aux_power = sec.get_or("aux_power", 0.0)?;
        o.utilization = sec.get_or("utilization", 1.0)?;
        options.push(o);
    }
    if !options.is_empty() {
        if spec.is_some() {
            return Err(ConfigError::Invalid(
                "a builtin scenario cannot be combined with [option.*] sections".into(),
            ));
        }
        spec = Some(ScenarioSpec {
            name: s.raw("name").unwrap_or("scenario").to_string(),
            demand_qps: s.get("demand_qps")?,
            options,
            warmup: None,
        });
    } else if let Some(sp) = &mut spec {
        if let Some(n) = s.raw("name") {
            sp.name = n.to_string();
        }
        if let Some(d) = s.get("demand_qps")? {
            sp.demand_qps = Some(d);
        }
    } else if cfg.has_section("scenario") {
        return Err(ConfigError::Invalid(
            "[scenario] needs builtin or at least one [option.<name>] section".into(),
        ));
    }
    let w = cfg.section("warmup");
    w.check_keys(&["r", "w", "p", "t"])?;
    if cfg.has_section("warmup") {
        let warm = Warmup {
            r: w.require("r")?,
            w: w.require("w")?,
            p: w.require("p")?,
            t: w.require("t")?,
        };
        match &mut spec {
            Some(sp) => sp.warmup = Some(warm),
            None => {
                spec = Some(ScenarioSpec {
                    name: "warmup".into(),
                    demand_qps: None,
                    options: Vec::new(),
                    warmup: Some(warm),
                })
            }
        }
    }
    Ok(spec)
}

pub fn cmd_plan(cfg: &Config, ov: &Overrides) -> Result<PlanReport> {
    for name in cfg.section_names() {
        let known = matches!(name, "" | "scenario" | "warmup" | "iops" | "endurance")
            || name.starts_with("option.");
        if !known {
            return Err(invalid(format!("unknown section [{name}] in a plan file")));
        }
    }
    cfg.section("").check_keys(&["out"])?;
    let spec = scenario_from(cfg)?;
    let scenario = match &spec {
        Some(s) if !s.options.is_empty() => Some((s.name.clone(), fleet_power(s)?)),
        _ => None,
    };
    let warmup = match spec.as_ref().and_then(|s| s.warmup.as_ref()) {
        Some(w) => Some(warmup_overprovision(w.r, w.w, w.p, w.t)?),
        None => None,
    };

    let i = cfg.section("iops");
    i.check_keys(&["presets", "hit_rate", "qps"])?;
    let mut iops = Vec::new();
    for name in i.list::<String>("presets")?.unwrap_or_default() {
        let p = planner::preset(&name).map_err(|e| invalid(e.to_string()))?;
        let hit = i.get_or("hit_rate", p.hit_rate)?;
        let qps = i.get_or("qps", p.qps)?;
        let r = iops_required(&p.model, qps, hit, &p.profile)?;
        iops.push((p.name.to_string(), qps, hit, r));
    }

    let e = cfg.section("endurance");
    e.check_keys(&["model_gb", "capacity_gb", "pdwpd", "profile"])?;
    let endurance = if cfg.has_section("endurance") {
        let m: f64 = e.require("model_gb")?;
        let c: f64 = e.require("capacity_gb")?;
        let p: f64 = match (e.get("pdwpd")?, e.raw("profile")) {
            (Some(p), _) => p,
            (None, Some(name)) => {
                sdm_core::DeviceProfile::by_name(name)
                    .map_err(|err| invalid(err.to_string()))?
                    .pdwpd
            }
            (None, None) => return Err(invalid("[endurance] needs pdwpd or profile")),
        };
        Some((m, c, p, planner::update_interval(m, c, p)?))
    } else {
        None
    };

    if scenario.is_none() && warmup.is_none() && iops.is_empty() && endurance.is_none() {
        return Err(invalid(
            "plan file has nothing to evaluate ([scenario], [warmup], [iops] or [endurance])",
        ));
    }
    let report = PlanReport {
        scenario,
        warmup,
        iops,
        endurance,
    };
    let out = ov
        .out
        .clone()
        .or_else(|| cfg.section("").raw("out").map(|p| cfg.resolve(p)));
    if let Some(path) = out {
        write_file(&path, &report.to_csv())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(text: &str) -> Result<PlanReport> {
        cmd_plan(&Config::parse(text).unwrap(), &Overrides::default())
    }

    #[test]
    fn simpler_hw_from_options() {
        let r = plan(
            "[scenario]\nname = simpler-hw\ndemand_qps = 288000\n\
             [option.HW-L]\nqps_per_host = 240\npower = 1.0\n\
             [option.HW-SS+SDM]\nqps_per_host = 120\npower = 0.4\n",
        )
        .unwrap();
        let csv = r.to_csv();
        assert!(
            csv.contains("simpler-hw,HW-SS+SDM,2400,0,960.00,960.000,20.0"),
            "{csv}"
        );
        assert!(csv.starts_with(CSV_HEADER));
    }

    #[test]
    fn builtin_and_extras() {
        let r = plan(
            "[scenario]\nbuiltin = multi-tenancy\n[warmup]\nr = 0.1\nw = 5\np = 0.5\nt = 30\n\
             [iops]\npresets = M1, M3\n[endurance]\nmodel_gb = 1000\ncapacity_gb = 4000\npdwpd = 5\n",
        )
        .unwrap();
        let (_, rows) = r.scenario.as_ref().unwrap();
        assert!((rows[1].fleet_power - 0.707).abs() < 1e-3);
        assert!((r.warmup.unwrap() - 1.0 / 30.0).abs() < 1e-12);
        assert_eq!(r.iops[0].3.offered_iops, 252_000.0);
        assert_eq!(r.iops[1].3.ssds_needed, 10);
        assert!((r.endurance.unwrap().3 - 18.25).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.contains("M1,120,0.96,252000,10080,"));
        assert!(csv.contains("warmup_overprovision_pct,3.33"));
    }

    #[test]
    fn plan_errors_are_config_errors() {
        for text in [
            "",
            "[scenario]\nbuiltin = nope\n",
            "[scenario]\nname = x\n",
            "[option.A]\nqps_per_host = 1\n",
            "[iops]\npresets = M7\n",
            "[model]\npreset = M1\n",
            "[endurance]\nmodel_gb = 1\ncapacity_gb = 1\n",
        ] {
            let e = plan(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }

    #[test]
    fn analyze_path_naming() {
        let (t, s) = analyze_paths(Path::new("out/run1.csv"));
        assert_eq!(t, PathBuf::from("out/run1.temporal.csv"));
        assert_eq!(s, PathBuf::from("out/run1.spatial.csv"));
        let (t, _) = analyze_paths(Path::new("run2"));
        assert_eq!(t, PathBuf::from("run2.temporal.csv"));
    }
}
