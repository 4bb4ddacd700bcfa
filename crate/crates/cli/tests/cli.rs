//! End-to-end runs of the `adchain` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adchain_core::ledger::{read_dump, write_dump, ChainRecord};
use adchain_sim::bench::csvio::{read_records, read_summaries, RECORD_HEADER};

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios/demo")
        .join(name)
}

fn adchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adchain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate_into(dir: &Path, extra: &[&str]) -> Output {
    let scn = demo("golden.scn");
    let mut args = vec![
        "simulate",
        "--scenario",
        scn.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    adchain(&args)
}

#[test]
fn golden_scenario_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate_into(dir.path(), &[]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    for check in [
        "privacy-boundary",
        "billing-conservation",
        "flow-completeness",
        "session-filter",
        "merkle-consistency",
        "quota-bounds",
    ] {
        assert!(
            text.contains(&format!("PASS {check}")),
            "{check} missing:\n{text}"
        );
    }
    assert!(!text.contains("FAIL"));
    assert!(text.contains("refused by ch policy"));
    assert!(text.contains("billing queue: 0"));
}

#[test]
fn underfunded_advertiser_leaves_a_reported_queue() {
    let scn = demo("underfunded.scn");
    let out = adchain(&["simulate", "--scenario", scn.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("billing queue:"))
        .unwrap();
    let n: usize = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(n > 0, "{line}");
}

#[test]
fn fixed_seed_gives_identical_logs_and_chains() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert!(simulate_into(a.path(), &["--seed", "42"]).status.success());
    assert!(simulate_into(b.path(), &["--seed", "42"]).status.success());
    assert!(simulate_into(c.path(), &["--seed", "43"]).status.success());
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "golden.log"), read(b.path(), "golden.log"));
    assert_eq!(
        read(a.path(), "golden.chain"),
        read(b.path(), "golden.chain")
    );
    assert_ne!(read(a.path(), "golden.log"), read(c.path(), "golden.log"));
}

#[test]
fn parallel_mode_matches_sequential() {
    let g = demo("golden.scn");
    let u = demo("underfunded.scn");
    let args = |extra: &'static [&'static str]| {
        let mut v = vec![
            "simulate",
            "--scenario",
            g.to_str().unwrap(),
            "--scenario",
            u.to_str().unwrap(),
            "--print-log",
        ];
        v.extend_from_slice(extra);
        v.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let run = |a: Vec<String>| {
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        adchain(&refs)
    };
    let seq = run(args(&[]));
    let par = run(args(&["--parallel"]));
    assert!(seq.status.success() && par.status.success());
    assert_eq!(seq.stdout, par.stdout);
}

#[test]
fn inspect_prints_json_and_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate_into(dir.path(), &[]).status.success());
    let chain = dir.path().join("golden.chain");
    let out = adchain(&["inspect", "--chain", chain.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let items = v.as_array().unwrap();
    assert!(items.iter().any(|i| i["transaction"]["type"] == "Response"));
    assert!(items
        .iter()
        .any(|i| i["record"] == "block" && i["merkle_consistent"] == true));

    let mut records = read_dump(&std::fs::read(&chain).unwrap()).unwrap();
    let tx = records
        .iter_mut()
        .find_map(|r| match r {
            ChainRecord::Transaction(t) if !t.ad_ids.is_empty() => Some(t),
            _ => None,
        })
        .unwrap();
    tx.ad_ids.push(9999);
    let forged = dir.path().join("forged.chain");
    std::fs::write(&forged, write_dump(&records).unwrap()).unwrap();
    let out = adchain(&["inspect", "--chain", forged.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = adchain(&[
        "inspect",
        "--chain",
        dir.path().join("missing").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn setup_reports_the_index() {
    let tax = demo("taxonomy.tsv");
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("ads.tsv");
    let out = adchain(&[
        "setup",
        "--ads",
        "120",
        "--taxonomy",
        tax.to_str().unwrap(),
        "--seed",
        "3",
        "--key-bits",
        "512",
        "--manifest-out",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("encrypted ads: 120"));
    assert_eq!(
        std::fs::read_to_string(manifest).unwrap().lines().count(),
        120
    );
}

#[test]
fn bench_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("k.csv");
    let sum = dir.path().join("k_sum.csv");
    let out = adchain(&[
        "bench",
        "keygen",
        "--sizes",
        "512",
        "--count",
        "100",
        "--out",
        csv.to_str().unwrap(),
        "--summary",
        sum.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(RECORD_HEADER));
    assert_eq!(read_records(text.as_bytes()).unwrap().len(), 100);
    let rows = read_summaries(std::fs::File::open(&sum).unwrap()).unwrap();
    assert_eq!((rows.len(), rows[0].n, rows[0].warmup), (1, 95, 5));
    assert!(stdout(&out).contains("trend keygen power"));
}

#[test]
fn policy_bench_emits_cdf() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let cdf = dir.path().join("p_cdf.csv");
    let out = adchain(&[
        "bench",
        "policy",
        "--sizes",
        "100,1000",
        "--placement",
        "sequential",
        "--trials",
        "50",
        "--out",
        csv.to_str().unwrap(),
        "--cdf",
        cdf.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cdf = std::fs::read_to_string(cdf).unwrap();
    assert!(cdf.lines().any(|l| l.starts_with("sequential,1000,")));
}

#[test]
fn bad_input_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    let csv = csv.to_str().unwrap();
    for args in [
        vec!["bench", "policy", "--sizes", "150", "--out", csv],
        vec![
            "bench", "keygen", "--sizes", "512", "--count", "10", "--out", csv,
        ],
        vec!["bench", "encdec", "--sizes", "512", "--out", csv],
        vec!["bench", "hash", "--profiles", "0", "--out", csv],
        vec!["bench", "policy", "--placement", "diagonal", "--out", csv],
        vec!["simulate"],
        vec!["simulate", "--scenario", "/nonexistent/x.scn"],
        vec!["frobnicate"],
    ] {
        let out = adchain(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    assert_eq!(adchain(&["--help"]).status.code(), Some(0));
}
