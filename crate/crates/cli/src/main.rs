use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use adchain_core::admatch::{format_ads_manifest, parse_taxonomy, synthetic_ads};
use adchain_core::cryptokit::DigestScheme;
use adchain_core::ledger::{read_dump, write_dump, ChainRecord, Transaction};
use adchain_core::nodes::scenario::{RunReport, Scenario};
use adchain_core::nodes::{SimConfig, Simulation};
use adchain_core::profile::AppInterestMap;
use adchain_sim::bench::csvio::{write_policy_cdf, write_records, write_summaries};
use adchain_sim::bench::parity::{run_parity, write_outputs, ParityConfig};
use adchain_sim::bench::stats::{fit_trend, fmt_ns, spearman, summarize, Summary, TrendModel};
use adchain_sim::bench::suites::{
    encdec_keys, ENCDEC_SIZES, KEYGEN_SIZES, MIN_KEYGEN_COUNT, POLICY_SIZES,
};
use adchain_sim::bench::{
    bench_encdec, bench_hash, bench_keygen, bench_policy, Placement, Recorder,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_INVARIANT: u8 = 2;

#[derive(Parser)]
#[command(
    name = "adchain",
    version,
    about = "Private ad delivery simulator and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match a synthetic ad corpus to a taxonomy and store the index.
    Setup {
        #[arg(long)]
        ads: u32,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        key_bits: usize,
        #[arg(long, default_value_t = 64)]
        block_capacity: u64,
        /// Also write the generated ad manifest here.
        #[arg(long)]
        manifest_out: Option<PathBuf>,
    },
    /// Run scenario files and check the run invariants.
    Simulate {
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        /// Overrides the seed in every scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes `<name>.log` (run log) and `<name>.chain` (Miner chains).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the run log after the report.
        #[arg(long)]
        print_log: bool,
        /// Run independent scenarios on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Benchmark suites; every suite writes raw records as CSV.
    Bench {
        #[command(subcommand)]
        suite: BenchCommand,
    },
    /// Print a chain dump as JSON and verify it.
    Inspect {
        #[arg(long)]
        chain: PathBuf,
    },
}

#[derive(Args)]
struct BenchOut {
    /// Raw records, one row per trial.
    #[arg(long)]
    out: PathBuf,
    /// Per-series summary (warm-up excluded).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum BenchCommand {
    Keygen {
        #[arg(long, value_delimiter = ',', default_values_t = KEYGEN_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = MIN_KEYGEN_COUNT)]
        count: u32,
        #[command(flatten)]
        out: BenchOut,
    },
    Hash {
        #[arg(long, value_delimiter = ',', default_values_t = DigestScheme::ALL)]
        schemes: Vec<DigestScheme>,
        #[arg(long, default_value_t = 1000)]
        profiles: u32,
        #[command(flatten)]
        out: BenchOut,
    },
    Encdec {
        #[arg(long, value_delimiter = ',', default_values_t = ENCDEC_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        ads: u32,
        #[command(flatten)]
        out: BenchOut,
    },
    Policy {
        #[arg(long, value_delimiter = ',', default_values_t = POLICY_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = Placement::Random)]
        placement: Placement,
        #[arg(long, default_value_t = 1000)]
        trials: u32,
        /// Empirical CDF of traversal delays per size.
        #[arg(long)]
        cdf: Option<PathBuf>,
        #[command(flatten)]
        out: BenchOut,
    },
    /// All four suites at full size against a wall-clock budget.
    Parity {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 30)]
        budget_mins: u64,
        /// Keep going until the deadline instead of stopping once the running
        /// means show it will be missed.
        #[arg(long)]
        no_projection: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invariant(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Setup {
            ads,
            taxonomy,
            seed,
            key_bits,
            block_capacity,
            manifest_out,
        } => setup(
            ads,
            &taxonomy,
            seed,
            key_bits,
            block_capacity,
            manifest_out.as_deref(),
        ),
        Command::Simulate {
            scenarios,
            seed,
            out_dir,
            print_log,
            parallel,
        } => simulate(&scenarios, seed, out_dir.as_deref(), print_log, parallel),
        Command::Bench { suite } => bench(suite),
        Command::Inspect { chain } => inspect(&chain),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant failure: {msg}");
            ExitCode::from(EXIT_INVARIANT)
        }
    }
}

fn setup(
    ads: u32,
    taxonomy: &Path,
    seed: u64,
    key_bits: usize,
    block_capacity: u64,
    manifest_out: Option<&Path>,
) -> Result<(), Failure> {
    let tax = parse_taxonomy(&std::fs::read_to_string(taxonomy)?)?;
    let corpus = synthetic_ads(ads, &tax, seed)?;
    if let Some(p) = manifest_out {
        std::fs::write(p, format_ads_manifest(&corpus))?;
    }
    let mut cfg = SimConfig::new(tax, corpus, AppInterestMap::new());
    cfg.seed = seed;
    cfg.key_bits = key_bits;
    cfg.block_capacity = block_capacity;
    let mut sim = Simulation::new(cfg)?;
    let extent = sim.setup()?;
    let index = sim
        .index()
        .ok_or_else(|| Failure::Invariant("index missing after setup".into()))?;
    println!("ads: {ads}");
    println!("interest digests: {}", index.entries.len());
    println!("encrypted ads: {}", index.envelope_count());
    println!(
        "stored: {} records in blocks {}..{} (capacity {block_capacity})",
        extent.records,
        extent.first_block,
        extent.first_block + extent.blocks
    );
    println!("next pointers: {:?}", sim.index_pointers());
    let failed: Vec<String> = sim
        .checks()
        .iter()
        .filter(|c| !c.passed)
        .map(ToString::to_string)
        .collect();
    if !failed.is_empty() {
        return Err(Failure::Invariant(failed.join("; ")));
    }
    Ok(())
}

fn run_one(path: &Path, seed: Option<u64>) -> Result<RunReport, String> {
    let sc = Scenario::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    sc.run(seed).map_err(|e| format!("{}: {e}", path.display()))
}

fn simulate(
    paths: &[PathBuf],
    seed: Option<u64>,
    out_dir: Option<&Path>,
    print_log: bool,
    parallel: bool,
) -> Result<(), Failure> {
    let reports: Vec<Result<RunReport, String>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = paths
                .iter()
                .map(|p| s.spawn(move || run_one(p, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err("scenario thread panicked".into()))
                })
                .collect()
        })
    } else {
        paths.iter().map(|p| run_one(p, seed)).collect()
    };
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout().lock();
    for (path, report) in paths.iter().zip(reports) {
        let report = report.map_err(Failure::Usage)?;
        writeln!(stdout, "== {}", path.display())?;
        for line in &report.outcomes {
            writeln!(stdout, "{line}")?;
        }
        for check in &report.checks {
            writeln!(stdout, "{check}")?;
            if !check.passed {
                failed.push(format!("{}: {}", path.display(), check.name));
            }
        }
        writeln!(
            stdout,
            "billing queue: {} event(s) awaiting funds",
            report.billing_queue
        )?;
        if print_log {
            stdout.write_all(report.run_log.as_bytes())?;
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("scenario");
            std::fs::write(dir.join(format!("{stem}.log")), &report.run_log)?;
            let dump = write_dump(&report.chain)?;
            std::fs::write(dir.join(format!("{stem}.chain")), dump)?;
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(failed.join(", ")))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

fn print_summaries(summaries: &[Summary]) {
    println!("suite\tvariant\tparameter\tn\tmin_ns\tmax_ns\tavg_ns\tstdev_ns");
    for s in summaries {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.suite,
            s.variant,
            s.parameter,
            s.n,
            s.min_ns,
            s.max_ns,
            fmt_ns(s.mean_ns()),
            fmt_ns(s.stdev_ns())
        );
    }
}

/// Trend fits of mean elapsed time against the parameter, per variant.
fn print_trends(summaries: &[Summary], models: &[TrendModel]) {
    let mut variants: Vec<&str> = summaries.iter().map(|s| s.variant.as_str()).collect();
    variants.dedup();
    for v in variants {
        let pts: Vec<(f64, f64)> = summaries
            .iter()
            .filter(|s| s.variant == v)
            .map(|s| (s.parameter as f64, s.mean_ns()))
            .collect();
        for &m in models {
            match fit_trend(m, &pts) {
                Some(f) => println!(
                    "trend {v} {}: a={:.6e} b={:.6e} R2={:.4}",
                    m.name(),
                    f.a,
                    f.b,
                    f.r_squared
                ),
                None => println!("trend {v} {}: not enough points", m.name()),
            }
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Some(rho) = spearman(&xs, &ys) {
            println!("spearman {v}: {rho:.4}");
        }
    }
}

fn finish_bench(
    out: &BenchOut,
    rec: Recorder,
    models: &[TrendModel],
) -> Result<Vec<Summary>, Failure> {
    let records = rec.into_records();
    write_records(create(&out.out)?, &records)?;
    let summaries = summarize(&records);
    if let Some(p) = &out.summary {
        write_summaries(create(p)?, &summaries)?;
    }
    print_summaries(&summaries);
    print_trends(&summaries, models);
    println!("records: {} -> {}", records.len(), out.out.display());
    Ok(summaries)
}

fn bench(cmd: BenchCommand) -> Result<(), Failure> {
    let mut rec = Recorder::new();
    match cmd {
        BenchCommand::Keygen { sizes, count, out } => {
            bench_keygen(&mut rec, &sizes, count, out.seed)?;
            finish_bench(&out, rec, &[TrendModel::Power])?;
        }
        BenchCommand::Hash {
            schemes,
            profiles,
            out,
        } => {
            bench_hash(&mut rec, &schemes, profiles, out.seed)?;
            finish_bench(&out, rec, &[])?;
        }
        BenchCommand::Encdec { sizes, ads, out } => {
            let keys = encdec_keys(&sizes, out.seed)?;
            bench_encdec(&mut rec, &keys, ads, out.seed)?;
            finish_bench(&out, rec, &[TrendModel::Exponential, TrendModel::Power])?;
        }
        BenchCommand::Policy {
            sizes,
            placement,
            trials,
            cdf,
            out,
        } => {
            bench_policy(&mut rec, &sizes, placement, trials, out.seed)?;
            if let Some(p) = &cdf {
                write_policy_cdf(create(p)?, rec.records())?;
            }
            finish_bench(&out, rec, &[TrendModel::Power, TrendModel::Exponential])?;
        }
        BenchCommand::Parity {
            out_dir,
            budget_mins,
            no_projection,
            seed,
        } => return parity(&out_dir, budget_mins, !no_projection, seed),
    }
    Ok(())
}

fn parity(out_dir: &Path, budget_mins: u64, project: bool, seed: u64) -> Result<(), Failure> {
    let cfg = ParityConfig {
        budget: Duration::from_secs(budget_mins * 60),
        project,
        ..ParityConfig::full(seed)
    };
    let report = run_parity(&cfg)?;
    let paths = write_outputs(out_dir, &report.records)?;
    print_summaries(&summarize(&report.records));
    let done: Vec<&str> = report.completed.iter().map(|s| s.name()).collect();
    println!(
        "records: {}/{} in {:.1}s; suites completed: {}",
        report.records.len(),
        report.expected_records,
        report.elapsed.as_secs_f64(),
        if done.is_empty() {
            "none".to_string()
        } else {
            done.join(", ")
        }
    );
    println!(
        "wrote {}, {}, {}",
        paths.records.display(),
        paths.summary.display(),
        paths.cdf.display()
    );
    if report.finished_in_budget(cfg.budget) {
        Ok(())
    } else {
        let why = report.stopped.unwrap_or_else(|| "incomplete".into());
        Err(Failure::Invariant(format!(
            "parity run missed the {budget_mins} min budget: {why}"
        )))
    }
}

fn list(ids: &[u32]) -> Value {
    json!(ids)
}

fn tx_json(tx: &Transaction, known_prev: bool) -> Value {
    json!({
        "T_ID": tx.t_id.to_hex(),
        "PT_ID": tx.prev_t_id.to_hex(),
        "type": tx.tx_type.name(),
        "ID_U": tx.user_digest.to_hex(),
        "ID_APP": tx.app_digest.to_hex(),
        "Ad_IDs": list(&tx.ad_ids),
        "advertiser": tx.advertiser_id,
        "session": tx.session_id,
        "input": list(&tx.input),
        "output": list(&tx.output),
        "payload_bytes": tx.payload.as_ref().map(|p| p.encode().len()),
        "valid": tx.verify().is_ok(),
        "prev_known": known_prev,
    })
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let records = read_dump(&std::fs::read(path)?)?;
    let mut seen = std::collections::HashSet::new();
    let mut bad = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        match rec {
            ChainRecord::Transaction(tx) => {
                let known = tx.prev_t_id.is_zero() || seen.contains(&tx.prev_t_id);
                let v = tx_json(tx, known);
                if v["valid"] != json!(true) || !known {
                    bad.push(format!("transaction {}", &tx.t_id.to_hex()[..16]));
                }
                seen.insert(tx.t_id);
                out.push(json!({ "record": "transaction", "transaction": v }));
            }
            ChainRecord::Block(b) => {
                let consistent = b.merkle_consistent();
                if !consistent || b.header.verify().is_err() {
                    bad.push(format!("block {}", &b.hash().to_hex()[..16]));
                }
                out.push(json!({
                    "record": "block",
                    "block_hash": b.hash().to_hex(),
                    "header": tx_json(&b.header, true),
                    "merkle_root": b.merkle_root.to_hex(),
                    "prev_block_hash": b.prev_block_hash.to_hex(),
                    "block_size_limit": b.block_size_limit,
                    "T_IDs": b.transactions.iter().map(|t| t.t_id.to_hex()).collect::<Vec<_>>(),
                    "merkle_consistent": consistent,
                }));
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &Value::Array(out))?;
    writeln!(stdout)?;
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "{} record(s) failed verification: {}",
            bad.len(),
            bad.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn bench_flags_parse() {
        let cli = Cli::try_parse_from([
            "adchain",
            "bench",
            "policy",
            "--sizes",
            "100,1000",
            "--placement",
            "sequential",
            "--trials",
            "5",
            "--out",
            "x.csv",
        ])
        .unwrap();
        let Command::Bench {
            suite:
                BenchCommand::Policy {
                    sizes,
                    placement,
                    trials,
                    ..
                },
        } = cli.command
        else {
            panic!("wrong command");
        };
        assert_eq!(sizes, vec![100, 1000]);
        assert_eq!(placement, Placement::Sequential);
        assert_eq!(trials, 5);
        assert!(Cli::try_parse_from([
            "adchain",
            "bench",
            "hash",
            "--schemes",
            "md5",
            "--out",
            "x"
        ])
        .is_err());
    }
}
