//! Closed-form capacity planning: bandwidth split, slow-memory latency
//! budget, host counts, IOPS, fleet power, warmup and update interval.
//!
//! Proportionality constants are fixed to 1, so QPS and latency outputs of
//! [`qps_latency_hosts`] are relative units.

use crate::device::{endurance_report, DeviceProfile};
use crate::embedding::Role;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlanTable {
    pub pooling: f64,
    pub dim_bytes: f64,
    pub role: Role,
    pub on_sm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub tables: Vec<PlanTable>,
    pub batch_user: f64,
    pub batch_items: f64,
    pub comp_q: f64,
}

impl ModelSpec {
    /// `count` identical tables appended to the model.
    pub fn push_group(
        &mut self,
        count: usize,
        role: Role,
        pooling: f64,
        dim_bytes: f64,
        on_sm: bool,
    ) -> &mut Self {
        self.tables.extend((0..count).map(|_| PlanTable {
            pooling,
            dim_bytes,
            role,
            on_sm,
        }));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.batch_user > 0.0) || !(self.batch_items > 0.0) {
            return bad("batch sizes must be positive");
        }
        if self
            .tables
            .iter()
            .any(|t| !(t.pooling > 0.0) || !(t.dim_bytes > 0.0))
        {
            return bad("pooling factors and dims must be positive");
        }
        Ok(())
    }

    fn batch(&self, role: Role) -> f64 {
        match role {
            Role::User => self.batch_user,
            Role::Item => self.batch_items,
        }
    }

    /// Σ p·d over tables of one role, unbatched.
    pub fn bytes_per_lookup_set(&self, role: Role) -> f64 {
        self.tables
            .iter()
            .filter(|t| t.role == role)
            .map(|t| t.pooling * t.dim_bytes)
            .sum()
    }

    /// Per-query bytes of one role, batched.
    pub fn bw_q(&self, role: Role) -> f64 {
        self.batch(role) * self.bytes_per_lookup_set(role)
    }

    /// Row lookups per query against slow-memory tables.
    pub fn sm_lookups_per_query(&self) -> f64 {
        self.tables
            .iter()
            .filter(|t| t.on_sm)
            .map(|t| self.batch(t.role) * t.pooling)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwSpec {
    /// Bytes per second.
    pub bw_fast: f64,
    pub bw_slow: f64,
    /// Compute units per second; may be infinite.
    pub comp: f64,
    pub per_host_power: f64,
    pub sm_iops_capacity: f64,
    pub sm_capacity_gb: f64,
    pub pdwpd: f64,
}

impl HwSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.bw_fast,
            self.bw_slow,
            self.comp,
            self.per_host_power,
            self.sm_iops_capacity,
            self.sm_capacity_gb,
            self.pdwpd,
        ]
        .iter()
        .all(|v| *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "hardware rates must be positive".into(),
            ))
        }
    }
}

/// Bandwidth the slow tier can serve at a given row size when only misses
/// reach the devices.
pub fn effective_slow_bw(
    profile: &DeviceProfile,
    devices: usize,
    row_bytes: f64,
    hit_rate: f64,
) -> f64 {
    let raw = devices as f64 * profile.saturation_iops * row_bytes;
    if hit_rate >= 1.0 {
        f64::INFINITY
    } else {
        raw / (1.0 - hit_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BwRequirement {
    /// qps × Σ p·d over all tables, batch ignored.
    pub bw_total: f64,
    pub bw_user: f64,
    pub bw_item: f64,
}

impl BwRequirement {
    pub fn split_total(&self) -> f64 {
        self.bw_user + self.bw_item
    }
}

pub fn bw_required(model: &ModelSpec, qps: f64) -> BwRequirement {
    let user = model.bytes_per_lookup_set(Role::User);
    let item = model.bytes_per_lookup_set(Role::Item);
    BwRequirement {
        bw_total: qps * (user + item),
        bw_user: qps * model.batch_user * user,
        bw_item: qps * model.batch_items * item,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBudget {
    pub slow_mem_bw_needed: f64,
    pub exposed: bool,
    /// No item bandwidth: the budget is unbounded.
    pub degenerate: bool,
}

/// Slow-memory bandwidth at which user lookups take as long as item
/// lookups served from fast memory.
pub fn latency_budget(model: &ModelSpec, hw: &HwSpec) -> Result<LatencyBudget> {
    if !(hw.bw_fast > 0.0) {
        return Err(Error::InvalidArgument("bw_fast must be positive".into()));
    }
    let user = model.bw_q(Role::User);
    let item = model.bw_q(Role::Item);
    if item <= 0.0 {
        return Ok(LatencyBudget {
            slow_mem_bw_needed: f64::INFINITY,
            exposed: false,
            degenerate: true,
        });
    }
    let needed = user * hw.bw_fast / item;
    Ok(LatencyBudget {
        slow_mem_bw_needed: needed,
        exposed: hw.bw_slow < needed,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostEstimate {
    pub qps_host: f64,
    pub latency_rel: f64,
    pub hosts: f64,
}

pub fn hosts_for(total_qps: f64, qps_host: f64) -> f64 {
    (total_qps / qps_host).ceil()
}

pub fn qps_latency_hosts(model: &ModelSpec, hw: &HwSpec, total_qps: f64) -> Result<HostEstimate> {
    if !(hw.bw_fast > 0.0) || !(hw.comp > 0.0) {
        return Err(Error::InvalidArgument(
            "hardware rates must be positive".into(),
        ));
    }
    let bw_q = model.bw_q(Role::User) + model.bw_q(Role::Item);
    let qps_host = (hw.bw_fast / bw_q).min(hw.comp / model.comp_q);
    Ok(HostEstimate {
        qps_host,
        latency_rel: bw_q / hw.bw_fast + model.comp_q / hw.comp,
        hosts: hosts_for(total_qps, qps_host),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IopsRequirement {
    pub offered_iops: f64,
    pub sustained_iops: f64,
    pub ssds_needed: u64,
}

pub fn iops_required(
    model: &ModelSpec,
    qps: f64,
    hit_rate: f64,
    profile: &DeviceProfile,
) -> Result<IopsRequirement> {
    if !(0.0..=1.0).contains(&hit_rate) {
        return Err(Error::InvalidArgument(format!(
            "hit rate {hit_rate} outside [0, 1]"
        )));
    }
    let offered = qps * model.sm_lookups_per_query();
    let sustained = offered * (1.0 - hit_rate);
    // guard against 9.0000000001 style ceilings
    let ratio = sustained / profile.saturation_iops;
    let ssds = if (ratio - ratio.round()).abs() < 1e-9 {
        ratio.round()
    } else {
        ratio.ceil()
    };
    Ok(IopsRequirement {
        offered_iops: offered,
        sustained_iops: sustained,
        ssds_needed: ssds as u64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostOption {
    pub name: String,
    /// None for utilization-only scenarios, where hosts are normalized to 1.
    pub qps_per_host: Option<f64>,
    pub power_per_host: f64,
    /// Auxiliary hosts per serving host (scale-out).
    pub aux_ratio: f64,
    pub aux_power: f64,
    pub utilization: f64,
}

impl HostOption {
    pub fn new(name: &str, qps_per_host: Option<f64>, power_per_host: f64) -> Self {
        Self {
            name: name.into(),
            qps_per_host,
            power_per_host,
            aux_ratio: 0.0,
            aux_power: 0.0,
            utilization: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Warmup {
    pub r: f64,
    pub w: f64,
    pub p: f64,
    pub t: f64,
}

/// First option is the baseline savings are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub demand_qps: Option<f64>,
    pub options: Vec<HostOption>,
    pub warmup: Option<Warmup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionResult {
    pub name: String,
    pub hosts: f64,
    pub aux_hosts: f64,
    pub power: f64,
    pub fleet_power: f64,
    pub savings_pct: f64,
}

pub fn fleet_power(scenario: &ScenarioSpec) -> Result<Vec<OptionResult>> {
    let base_util = scenario
        .options
        .first()
        .ok_or(Error::Empty("scenario options"))?
        .utilization;
    let mut out: Vec<OptionResult> = Vec::with_capacity(scenario.options.len());
    for o in &scenario.options {
        if !(o.utilization > 0.0 && o.utilization <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: utilization must be in (0, 1]",
                o.name
            )));
        }
        if !(o.power_per_host > 0.0) || o.aux_ratio < 0.0 || o.aux_power < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{}: bad power inputs",
                o.name
            )));
        }
        let hosts = match (scenario.demand_qps, o.qps_per_host) {
            (Some(d), Some(q)) if q > 0.0 => hosts_for(d, q),
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: qps must be positive",
                    o.name
                )))
            }
            _ => 1.0,
        };
        let aux_hosts = (hosts * o.aux_ratio).ceil();
        let power = hosts * o.power_per_host + aux_hosts * o.aux_power;
        let fleet = power * base_util / o.utilization;
        out.push(OptionResult {
            name: o.name.clone(),
            hosts,
            aux_hosts,
            power,
            fleet_power: fleet,
            savings_pct: 0.0,
        });
    }
    let base = out[0].fleet_power;
    for r in &mut out {
        r.savings_pct = 100.0 * (1.0 - r.fleet_power / base);
    }
    Ok(out)
}

/// Extra capacity, as a fraction, to absorb rolling-update warmup:
/// `(r * w) / (p * t)`.
pub fn warmup_overprovision(r: f64, w: f64, p: f64, t: f64) -> Result<f64> {
    if p == 0.0 || t == 0.0 {
        return Err(Error::InvalidArgument("p and t must be non-zero".into()));
    }
    if !(r > 0.0 && r <= 1.0) || !(p > 0.0 && p <= 1.0) || !(w > 0.0) || !(t > 0.0) {
        return Err(Error::InvalidArgument(
            "r, p must be in (0, 1]; w, t must be positive".into(),
        ));
    }
    Ok((r * w) / (p * t))
}

pub fn update_interval(model_size: f64, sm_capacity: f64, pdwpd: f64) -> Result<f64> {
    endurance_report(model_size, sm_capacity, pdwpd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelSpec,
    pub qps: f64,
    pub hit_rate: f64,
    pub size_gb: f64,
    pub profile: DeviceProfile,
}

fn empty_model(batch_items: f64) -> ModelSpec {
    ModelSpec {
        tables: Vec::new(),
        batch_user: 1.0,
        batch_items,
        comp_q: 1.0,
    }
}

/// 61 user tables, 50 of them on Nand; items stay in fast memory.
pub fn preset_m1() -> Preset {
    let mut m = empty_model(50.0);
    m.push_group(50, Role::User, 42.0, 51.0, true)
        .push_group(11, Role::User, 42.0, 51.0, false)
        .push_group(30, Role::Item, 9.0, 69.0, false);
    Preset {
        name: "M1",
        model: m,
        qps: 120.0,
        hit_rate: 0.96,
        size_gb: 143.0,
        profile: DeviceProfile::nand(),
    }
}

pub fn preset_m2() -> Preset {
    let mut m = empty_model(150.0);
    m.push_group(450, Role::User, 25.0, 64.0, true)
        .push_group(280, Role::Item, 14.0, 38.0, false);
    Preset {
        name: "M2",
        model: m,
        qps: 450.0,
        hit_rate: 0.90,
        size_gb: 150.0,
        profile: DeviceProfile::optane(),
    }
}

/// User-table configuration used for SSD sizing of the future model.
pub fn preset_m3() -> Preset {
    let mut m = empty_model(1000.0);
    m.push_group(2000, Role::User, 30.0, 512.0, true);
    Preset {
        name: "M3",
        model: m,
        qps: 3150.0,
        hit_rate: 0.80,
        size_gb: 1000.0,
        profile: DeviceProfile::optane(),
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    match name.to_ascii_uppercase().as_str() {
        "M1" => Ok(preset_m1()),
        "M2" => Ok(preset_m2()),
        "M3" => Ok(preset_m3()),
        _ => Err(Error::InvalidArgument(format!("unknown preset `{name}`"))),
    }
}

pub fn scenario_simpler_hw() -> ScenarioSpec {
    ScenarioSpec {
        name: "simpler-hw".into(),
        demand_qps: Some(288_000.0),
        options: vec![
            HostOption::new("HW-L", Some(240.0), 1.0),
            HostOption::new("HW-SS+SDM", Some(120.0), 0.4),
        ],
        warmup: None,
    }
}

pub fn scenario_avoid_scale_out() -> ScenarioSpec {
    ScenarioSpec {
        name: "avoid-scale-out".into(),
        demand_qps: Some(675_000.0),
        options: vec![
            HostOption {
                aux_ratio: 0.2,
                aux_power: 0.25,
                ..HostOption::new("HW-AN+ScaleOut", Some(450.0), 1.0)
            },
            HostOption::new("HW-AN+SDM", Some(230.0), 1.4),
            HostOption::new("HW-AO+SDM", Some(450.0), 1.0),
        ],
        warmup: None,
    }
}

pub fn scenario_multi_tenancy() -> ScenarioSpec {
    ScenarioSpec {
        name: "multi-tenancy".into(),
        demand_qps: None,
        options: vec![
            HostOption {
                utilization: 0.63,
                ..HostOption::new("HW-FA", None, 1.0)
            },
            HostOption {
                utilization: 0.90,
                ..HostOption::new("HW-FAO+SDM", None, 1.01)
            },
        ],
        warmup: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    fn single_user(p: f64, d: f64) -> ModelSpec {
        let mut m = empty_model(50.0);
        m.push_group(1, Role::User, p, d, true);
        m
    }

    #[test]
    fn bw_zero_qps() {
        let r = bw_required(&preset_m1().model, 0.0);
        assert_eq!((r.bw_total, r.bw_user, r.bw_item), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bw_single_user_table() {
        assert_eq!(
            bw_required(&single_user(42.0, 51.0), 120.0).bw_user,
            257_040.0
        );
    }

    #[test]
    fn bw_item_linear_in_batch() {
        let mut m = preset_m1().model;
        let a = bw_required(&m, 120.0);
        m.batch_items *= 2.0;
        let b = bw_required(&m, 120.0);
        assert_eq!(b.bw_item, 2.0 * a.bw_item);
        assert_eq!(b.bw_user, a.bw_user);
    }

    #[test]
    fn equal_batches_reduce_to_total() {
        let mut m = preset_m2().model;
        m.batch_user = 7.0;
        m.batch_items = 7.0;
        let r = bw_required(&m, 3.0);
        assert!(close(r.split_total(), 7.0 * r.bw_total, 1e-12));
    }

    fn hw(bw_fast: f64, bw_slow: f64) -> HwSpec {
        HwSpec {
            bw_fast,
            bw_slow,
            comp: f64::INFINITY,
            per_host_power: 1.0,
            sm_iops_capacity: 1e6,
            sm_capacity_gb: 2000.0,
            pdwpd: 5.0,
        }
    }

    #[test]
    fn budget_symmetry_and_proportionality() {
        let mut m = empty_model(1.0);
        m.push_group(1, Role::User, 10.0, 64.0, true)
            .push_group(1, Role::Item, 10.0, 64.0, false);
        let b = latency_budget(&m, &hw(1e9, 1e9)).unwrap();
        assert_eq!(b.slow_mem_bw_needed, 1e9);
        assert!(!b.exposed);
        m.batch_items = 2.0;
        assert_eq!(
            latency_budget(&m, &hw(1e9, 1e9))
                .unwrap()
                .slow_mem_bw_needed,
            5e8
        );
    }

    #[test]
    fn budget_without_items_is_degenerate() {
        let b = latency_budget(&single_user(1.0, 8.0), &hw(1e9, 1.0)).unwrap();
        assert!(b.degenerate && !b.exposed);
    }

    #[test]
    fn m2_budget_optane_passes_nand_fails() {
        let p = preset_m2();
        let need = latency_budget(&p.model, &hw(100e9, 1.0))
            .unwrap()
            .slow_mem_bw_needed;
        assert!(close(need, 720_000.0 * 100e9 / 22_344_000.0, 1e-12));
        let optane = effective_slow_bw(&DeviceProfile::optane(), 2, 64.0, p.hit_rate);
        let nand = effective_slow_bw(&DeviceProfile::nand(), 2, 64.0, p.hit_rate);
        assert!(
            !latency_budget(&p.model, &hw(100e9, optane))
                .unwrap()
                .exposed
        );
        assert!(latency_budget(&p.model, &hw(100e9, nand)).unwrap().exposed);
    }

    #[test]
    fn hosts_and_latency() {
        assert_eq!(hosts_for(288_000.0, 240.0), 1200.0);
        let m = preset_m1().model;
        let a = qps_latency_hosts(&m, &hw(1e9, 1.0), 1000.0).unwrap();
        let bw_q = m.bw_q(Role::User) + m.bw_q(Role::Item);
        assert_eq!(a.qps_host, 1e9 / bw_q);
        let mut h = hw(2e9, 1.0);
        h.comp = 2e9;
        let mut h1 = hw(1e9, 1.0);
        h1.comp = 1e9;
        let l2 = qps_latency_hosts(&m, &h, 1.0).unwrap().latency_rel;
        let l1 = qps_latency_hosts(&m, &h1, 1.0).unwrap().latency_rel;
        assert!(close(l2, l1 / 2.0, 1e-12));
    }

    #[test]
    fn iops_goldens() {
        let p1 = preset_m1();
        let r1 = iops_required(&p1.model, p1.qps, p1.hit_rate, &p1.profile).unwrap();
        assert_eq!(r1.offered_iops, 252_000.0);
        assert!(close(r1.sustained_iops, 10_080.0, 1e-9));
        let p2 = preset_m2();
        let r2 = iops_required(&p2.model, p2.qps, p2.hit_rate, &p2.profile).unwrap();
        assert_eq!(r2.offered_iops, 5_062_500.0);
        assert!(close(r2.sustained_iops, 506_250.0, 1e-9));
        let p3 = preset_m3();
        let r3 = iops_required(&p3.model, p3.qps, p3.hit_rate, &p3.profile).unwrap();
        assert!(close(r3.sustained_iops, 37.8e6, 1e-9));
        assert_eq!(r3.ssds_needed, 10);
        assert!(iops_required(&p3.model, 1.0, 1.5, &p3.profile).is_err());
    }

    #[test]
    fn fleet_goldens() {
        let t6 = fleet_power(&scenario_simpler_hw()).unwrap();
        assert_eq!((t6[0].hosts, t6[0].power), (1200.0, 1200.0));
        assert_eq!((t6[1].hosts, t6[1].power), (2400.0, 960.0));
        assert!(close(t6[1].savings_pct, 20.0, 1e-9));

        let t7 = fleet_power(&scenario_avoid_scale_out()).unwrap();
        assert_eq!(
            (t7[0].hosts, t7[0].aux_hosts, t7[0].power),
            (1500.0, 300.0, 1575.0)
        );
        assert_eq!(t7[2].power, 1500.0);
        assert!((t7[2].savings_pct - 4.7619).abs() < 1e-3);

        let t9 = fleet_power(&scenario_multi_tenancy()).unwrap();
        assert!((t9[1].fleet_power - 0.707).abs() < 1e-3);
        assert!((t9[1].savings_pct - 29.3).abs() < 0.1);
    }

    #[test]
    fn fleet_scale_homogeneous() {
        let mut s = scenario_simpler_hw();
        s.demand_qps = Some(288_000.0 * 3.0);
        let r = fleet_power(&s).unwrap();
        assert_eq!(r[0].hosts, 3600.0);
        assert!(close(r[1].savings_pct, 20.0, 1e-9));
    }

    #[test]
    fn warmup_formula() {
        assert_eq!(warmup_overprovision(0.5, 10.0, 0.5, 10.0).unwrap(), 1.0);
        let x = warmup_overprovision(0.1, 5.0, 0.5, 30.0).unwrap();
        assert!((x - 1.0 / 30.0).abs() < 1e-12);
        let half = warmup_overprovision(0.1, 2.5, 0.5, 30.0).unwrap();
        assert!((half - x / 2.0).abs() < 1e-15);
        assert!(warmup_overprovision(0.1, 5.0, 0.0, 30.0).is_err());
        assert!(warmup_overprovision(0.1, 5.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn update_interval_cases() {
        assert!((update_interval(143.0, 4000.0, 5.0).unwrap() - 2.60975).abs() < 1e-4);
        let n = update_interval(143.0, 4000.0, 5.0).unwrap();
        let o = update_interval(143.0, 4000.0, 100.0).unwrap();
        assert!((n / o - 20.0).abs() < 1e-12);
    }
}
