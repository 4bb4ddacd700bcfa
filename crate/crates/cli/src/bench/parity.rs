//! The full four-suite configuration, run against a wall-clock budget.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use adchain_core::cryptokit::DigestScheme;

use super::csvio::{write_policy_cdf, write_records, write_summaries};
use super::stats::summarize;
use super::suites::{
    bench_encdec, bench_hash, bench_keygen, bench_policy, encdec_keys, Placement, ENCDEC_SIZES,
    KEYGEN_SIZES, POLICY_SIZES,
};
use super::{BenchError, BenchRecord, Recorder, Suite};

#[derive(Debug, Clone)]
pub struct ParityConfig {
    pub seed: u64,
    pub keygen_sizes: Vec<usize>,
    pub keygen_count: u32,
    pub schemes: Vec<DigestScheme>,
    pub profiles: u32,
    pub encdec_sizes: Vec<usize>,
    pub ads: u32,
    pub policy_sizes: Vec<usize>,
    pub placements: Vec<Placement>,
    pub policy_trials: u32,
    pub budget: Duration,
    /// Stop as soon as the running means show the budget cannot be met.
    pub project: bool,
}

impl ParityConfig {
    /// 40,000 key pairs, 1000 profiles under 5 schemes, 1000 ads under 4 key
    /// sizes and 10 tree sizes x 1000 trials x 2 placements, in 30 minutes.
    pub fn full(seed: u64) -> Self {
        Self {
            seed,
            keygen_sizes: KEYGEN_SIZES.to_vec(),
            keygen_count: 10_000,
            schemes: DigestScheme::ALL.to_vec(),
            profiles: 1000,
            encdec_sizes: ENCDEC_SIZES.to_vec(),
            ads: 1000,
            policy_sizes: POLICY_SIZES.to_vec(),
            placements: vec![Placement::Random, Placement::Sequential],
            policy_trials: 1000,
            budget: Duration::from_secs(30 * 60),
            project: true,
        }
    }

    pub fn expected_records(&self) -> usize {
        self.keygen_sizes.len() * self.keygen_count as usize
            + self.schemes.len() * self.profiles as usize
            + 2 * self.encdec_sizes.len() * self.ads as usize
            + self.policy_sizes.len() * self.placements.len() * self.policy_trials as usize
    }
}

#[derive(Debug)]
pub struct ParityReport {
    pub records: Vec<BenchRecord>,
    pub elapsed: Duration,
    pub completed: Vec<Suite>,
    /// Why the run stopped early, if it did.
    pub stopped: Option<String>,
    pub expected_records: usize,
}

impl ParityReport {
    pub fn finished_in_budget(&self, budget: Duration) -> bool {
        self.stopped.is_none()
            && self.records.len() == self.expected_records
            && self.elapsed <= budget
    }
}

/// Runs hash, policy, encdec and keygen in that order, cheapest first, so a
/// budget stop still leaves the most complete data behind. Budget stops are
/// reported, not returned as errors.
pub fn run_parity(cfg: &ParityConfig) -> Result<ParityReport, BenchError> {
    let mut rec = Recorder::with_budget(cfg.budget, cfg.project);
    let mut completed = Vec::new();
    let outcome = (|| {
        bench_hash(&mut rec, &cfg.schemes, cfg.profiles, cfg.seed)?;
        completed.push(Suite::Hash);
        for &p in &cfg.placements {
            bench_policy(&mut rec, &cfg.policy_sizes, p, cfg.policy_trials, cfg.seed)?;
        }
        completed.push(Suite::Policy);
        let keys = encdec_keys(&cfg.encdec_sizes, cfg.seed)?;
        bench_encdec(&mut rec, &keys, cfg.ads, cfg.seed)?;
        completed.push(Suite::Encdec);
        bench_keygen(&mut rec, &cfg.keygen_sizes, cfg.keygen_count, cfg.seed)?;
        completed.push(Suite::Keygen);
        Ok::<(), BenchError>(())
    })();
    let stopped = match outcome {
        Ok(()) => None,
        Err(e) if e.is_budget() => Some(e.to_string()),
        Err(e) => return Err(e),
    };
    let elapsed = rec.elapsed();
    Ok(ParityReport {
        records: rec.into_records(),
        elapsed,
        completed,
        stopped,
        expected_records: cfg.expected_records(),
    })
}

/// Paths of the files [`write_outputs`] produces.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub cdf: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            records: dir.join("records.csv"),
            summary: dir.join("summary.csv"),
            cdf: dir.join("policy_cdf.csv"),
        }
    }
}

pub fn write_outputs(dir: &Path, records: &[BenchRecord]) -> Result<OutputPaths, BenchError> {
    std::fs::create_dir_all(dir)?;
    let paths = OutputPaths::in_dir(dir);
    write_records(BufWriter::new(File::create(&paths.records)?), records)?;
    write_summaries(
        BufWriter::new(File::create(&paths.summary)?),
        &summarize(records),
    )?;
    write_policy_cdf(BufWriter::new(File::create(&paths.cdf)?), records)?;
    Ok(paths)
}
