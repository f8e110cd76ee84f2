use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_sdm-embstore");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn sdm-embstore")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) {
    fs::write(dir.path().join(name), text).unwrap();
}

fn metrics(csv: &str) -> HashMap<String, String> {
    csv.lines()
        .skip_while(|l| *l != "metric,value")
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn metric(m: &HashMap<String, String>, key: &str) -> f64 {
    m.get(key)
        .unwrap_or_else(|| panic!("no {key} in report"))
        .parse()
        .unwrap()
}

const SMALL_M1: &str = "\
seed = 11
queries = 80

[model]
preset = M1
rows_per_table = 400
batch_items = 4

[device]
profile = nand

[engine]
policy = sm_only
len_threshold = 1

[bench]
streams = 2
warmup_window = 20
";

#[test]
fn plan_reproduces_simpler_hw_saving() {
    let dir = TempDir::new().unwrap();
    write(
        &dir,
        "simpler_hw.conf",
        "[scenario]\nname = simpler-hw\ndemand_qps = 288000\n\
         [option.HW-L]\nqps_per_host = 240\npower = 1.0\n\
         [option.HW-SS+SDM]\nqps_per_host = 120\npower = 0.4\n",
    );
    let text = ok(
        dir.path(),
        &["plan", "--config", "simpler_hw.conf", "--out", "simpler_hw.csv"],
    );
    assert!(text.contains("20.0%"), "{text}");
    let csv = fs::read_to_string(dir.path().join("simpler_hw.csv")).unwrap();
    assert!(csv.starts_with("# sdm-embstore report v1\n"));
    let row = csv
        .lines()
        .find(|l| l.starts_with("simpler-hw,HW-SS+SDM,"))
        .expect("option row");
    assert!(row.ends_with(",20.0"), "{row}");
}

#[test]
fn uniform_trace_round_trips_to_a_diagonal_cdf() {
    let dir = TempDir::new().unwrap();
    write(&dir, "flat.manifest", "0 user 100 16 100 0 4\n");
    write(
        &dir,
        "gen.conf",
        "seed = 5\nqueries = 10000\nout = flat.trace\n\
         [model]\nmanifest = flat.manifest\n\
         [workload]\nzipf_s = 0\nrepeat_rate = 0\n",
    );
    ok(dir.path(), &["gen-trace", "--config", "gen.conf"]);
    write(
        &dir,
        "an.conf",
        "out = flat.csv\n[model]\nmanifest = flat.manifest\n\
         [workload]\ntrace = flat.trace\n[analyze]\nwindow = 1000\n",
    );
    let text = ok(dir.path(), &["analyze", "--config", "an.conf"]);
    assert!(text.contains("max|dev|"), "{text}");

    let temporal = fs::read_to_string(dir.path().join("flat.temporal.csv")).unwrap();
    let mut points = 0;
    for line in temporal.lines().skip(2) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0], 0.0);
        assert!((f[2] - f[1]).abs() <= 0.01, "{line}");
        points += 1;
    }
    assert_eq!(points, 100);
    let spatial = fs::read_to_string(dir.path().join("flat.spatial.csv")).unwrap();
    assert_eq!(spatial.lines().nth(1), Some("table_id,window_index,metric"));
    assert!(spatial.lines().count() > 2);
}

#[test]
fn bench_is_deterministic() {
    let dir = TempDir::new().unwrap();
    write(&dir, "m1.conf", SMALL_M1);
    ok(dir.path(), &["bench", "-c", "m1.conf", "--out", "a.csv"]);
    ok(dir.path(), &["bench", "-c", "m1.conf", "--out", "b.csv"]);
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    let b = fs::read(dir.path().join("b.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    ok(
        dir.path(),
        &["bench", "-c", "m1.conf", "--seed", "12", "--out", "c.csv"],
    );
    assert_ne!(a, fs::read(dir.path().join("c.csv")).unwrap());
}

#[test]
fn caches_cut_device_iops_on_m1() {
    let dir = TempDir::new().unwrap();
    write(&dir, "m1.conf", SMALL_M1);
    let text = ok(dir.path(), &["bench", "-c", "m1.conf", "--out", "m1.csv"]);
    assert!(text.contains("reconciled"), "{text}");
    let m = metrics(&fs::read_to_string(dir.path().join("m1.csv")).unwrap());
    assert_eq!(m["reconciled"], "true");
    assert_eq!(m["failed_queries"], "0");
    assert!(metric(&m, "row_hit_rate") > 0.0);
    assert!(metric(&m, "pooled_hit_rate") > 0.0);
    assert!(metric(&m, "sustained_iops") < metric(&m, "offered_iops"));
}

#[test]
fn without_a_row_cache_every_lookup_reaches_the_device() {
    let dir = TempDir::new().unwrap();
    write(
        &dir,
        "m1.conf",
        &SMALL_M1.replace("[engine]\n", "[engine]\nrow_cache = off\n"),
    );
    ok(dir.path(), &["bench", "-c", "m1.conf", "--out", "nc.csv"]);
    let m = metrics(&fs::read_to_string(dir.path().join("nc.csv")).unwrap());
    assert_eq!(m["reconciled"], "true");
    assert_eq!(metric(&m, "row_hit_rate"), 0.0);
    assert_eq!(m["sustained_iops"], m["offered_iops"]);
    assert!(metric(&m, "offered_iops") > 0.0);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    write(&dir, "typo.conf", "[engine]\npolciy = sm_only\n");
    write(&dir, "range.conf", "[workload]\nrepeat_rate = 2\n");
    write(&dir, "missing.conf", "[workload]\ntrace = nowhere.trace\n");
    write(&dir, "syntax.conf", "[model\n");
    for (args, what) in [
        (vec!["bench", "-c", "typo.conf"], "unknown key"),
        (vec!["bench", "-c", "range.conf"], "repeat_rate"),
        (vec!["analyze", "-c", "missing.conf"], "not found"),
        (vec!["bench", "-c", "syntax.conf"], "line 1"),
        (vec!["bench", "-c", "absent.conf"], "absent.conf"),
        (vec!["plan", "-c", "typo.conf"], "unknown section"),
    ] {
        let out = run(dir.path(), &args);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {err}");
        assert!(err.contains(what), "{args:?}: {err}");
    }
}

#[test]
fn bad_input_files_exit_3() {
    let dir = TempDir::new().unwrap();
    write(&dir, "broken.manifest", "0 user 100 16\n");
    write(&dir, "m.conf", "[model]\nmanifest = broken.manifest\n");
    let out = run(dir.path(), &["bench", "-c", "m.conf"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
