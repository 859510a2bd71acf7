use std::path::Path;
use std::process::{Command, Output};

use cbac_core::bench::{read_csv, BenchResultRow};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/emergency_tables.txt");

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .output()
        .expect("bench binary runs")
}

fn rows_from(path: &Path) -> Vec<BenchResultRow> {
    read_csv(std::fs::File::open(path).unwrap()).unwrap()
}

fn metric<'a>(rows: &'a [BenchResultRow], metric: &str) -> Vec<&'a BenchResultRow> {
    rows.iter().filter(|r| r.metric == metric).collect()
}

#[test]
fn emergency_writes_one_row_set_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("emergency.csv");
    let o = bench(&["emergency", "--fixtures", FIXTURES, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = rows_from(&out);
    let disclosed = metric(&rows, "disclosed");
    assert_eq!(disclosed.len(), 12);
    for r in disclosed {
        assert_eq!(r.param("relevant").unwrap().parse::<f64>().unwrap(), r.mean);
    }
    let e01 = metric(&rows, "eta")
        .into_iter()
        .find(|r| r.param("case") == Some("E01") && r.param("total") == Some("500"))
        .unwrap();
    assert!((e01.mean - 0.22).abs() < 1e-12);
}

#[test]
fn emergency_reports_infeasible_cases_as_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("cases.txt");
    std::fs::write(&fixtures, "case=X1\tstate=Hypoxia\ttotal=10\trelevant=20\tseed=1\n").unwrap();
    let o = bench(&["emergency", "--fixtures", fixtures.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = read_csv(&o.stdout[..]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].metric, "skipped");
}

#[test]
fn setup_emits_a_row_per_size() {
    let o = bench(&["setup", "--sizes", "100,200", "--repetitions", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&o.stdout[..]).unwrap();
    let sizes: Vec<_> = rows
        .iter()
        .filter(|r| r.metric == "setup_latency_us")
        .map(|r| r.param("n").unwrap().to_owned())
        .collect();
    assert_eq!(sizes, ["100", "200"]);
}

#[test]
fn decide_covers_each_engine_and_rate() {
    let o = bench(&[
        "decide", "--n", "300", "--rates", "0.05,0.25", "--requests", "50", "--warmup", "5",
        "--repetitions", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&o.stdout[..]).unwrap();
    for engine in ["cbac", "baseline"] {
        for rate in ["0.05", "0.25"] {
            assert!(
                rows.iter().any(|r| r.param("engine") == Some(engine) && r.param("anomaly_rate") == Some(rate)),
                "missing {engine} {rate}"
            );
        }
    }
}

#[test]
fn stress_reports_no_violations() {
    let o = bench(&["stress", "--threads", "4", "--pairs", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.contains("accepted=50"), "{line}");
    assert!(line.contains("doubled=0 violations=0"), "{line}");
}

#[test]
fn bad_arguments_fail() {
    assert!(!bench(&["setup", "--sizes", "200,100"]).status.success());
    assert!(!bench(&["decide", "--engines", "magic"]).status.success());
    assert!(!bench(&["emergency", "--fixtures", "/nonexistent"]).status.success());
}
