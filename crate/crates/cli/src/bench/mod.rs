//! Benchmark suites for key generation, profile hashing, hybrid
//! encryption and policy traversal, with CSV output and summaries.
//!
//! Trials run sequentially on the calling thread. Each timed closure covers
//! only the operation under test; inputs are prepared beforehand.

pub mod csvio;
pub mod parity;
pub mod stats;
pub mod suites;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use adchain_core::admatch::MatchError;
use adchain_core::cryptokit::CryptoError;
use adchain_core::policy::PolicyError;
use adchain_core::profile::ProfileError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use suites::{bench_encdec, bench_hash, bench_keygen, bench_policy, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Keygen,
    Hash,
    Encdec,
    Policy,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Keygen => "keygen",
            Suite::Hash => "hash",
            Suite::Encdec => "encdec",
            Suite::Policy => "policy",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Suite::Keygen, Suite::Hash, Suite::Encdec, Suite::Policy]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

/// One timed trial. `parameter` is the key size in bits, the policy tree
/// size, or the digest scheme index; `variant` tells apart series sharing a
/// parameter (digest scheme name, encrypt/decrypt, placement).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub suite: Suite,
    pub variant: String,
    pub parameter: u64,
    pub trial: u32,
    pub elapsed_ns: u64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{suite}: unsupported parameter {value} (supported: {supported})")]
    Unsupported {
        suite: Suite,
        value: u64,
        supported: String,
    },
    #[error("{suite}: {what} must be at least {min}, got {got}")]
    TooFew {
        suite: Suite,
        what: &'static str,
        min: u64,
        got: u64,
    },
    #[error("{0}: empty parameter set")]
    NoParameters(Suite),
    #[error("encdec: ad {ad_id} did not survive a round trip at {bits} bits")]
    RoundTrip { bits: usize, ad_id: u32 },
    #[error("policy: worst-case context for size {size}, root {root}: {detail}")]
    Traversal {
        size: usize,
        root: usize,
        detail: String,
    },
    #[error("deadline of {limit:?} passed after {elapsed:?}")]
    Deadline { elapsed: Duration, limit: Duration },
    #[error("projected {projected:?} for the current series exceeds the {limit:?} deadline (elapsed {elapsed:?})")]
    Projected {
        projected: Duration,
        elapsed: Duration,
        limit: Duration,
    },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Stopped by the time budget rather than by a fault.
    pub fn is_budget(&self) -> bool {
        matches!(
            self,
            BenchError::Deadline { .. } | BenchError::Projected { .. }
        )
    }
}

/// Trials a series must have before its mean is trusted for projection.
pub const MIN_PROJECTION_TRIALS: u64 = 20;

/// Collects records and enforces an optional wall-clock budget.
///
/// With projection on, the recorder also stops once the elapsed time plus
/// the current series' remaining trials at its running mean would overrun
/// the budget. Later series are not counted, so the projection is a lower
/// bound on the real finish time.
#[derive(Debug)]
pub struct Recorder {
    records: Vec<BenchRecord>,
    start: Instant,
    limit: Option<Duration>,
    project: bool,
    /// Running (sum, count) per series, for projection.
    series: HashMap<(Suite, String, u64), (u128, u64)>,
}

impl Default for Recorder {
    fn default() -> Self {
        Self::new()
    }
}

impl Recorder {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            start: Instant::now(),
            limit: None,
            project: false,
            series: HashMap::new(),
        }
    }

    pub fn with_budget(limit: Duration, project: bool) -> Self {
        Self {
            limit: Some(limit),
            project,
            ..Self::new()
        }
    }

    pub fn records(&self) -> &[BenchRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<BenchRecord> {
        self.records
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }

    /// Times `f` as trial `trial` of a series with `remaining` trials still to
    /// come after this one.
    pub fn time<T>(
        &mut self,
        suite: Suite,
        variant: &str,
        parameter: u64,
        trial: u32,
        remaining: u64,
        f: impl FnOnce() -> T,
    ) -> Result<T, BenchError> {
        let t0 = Instant::now();
        let out = f();
        let ns = u64::try_from(t0.elapsed().as_nanos())
            .unwrap_or(u64::MAX)
            .max(1);
        let stats = self
            .series
            .entry((suite, variant.to_string(), parameter))
            .or_insert((0, 0));
        stats.0 += u128::from(ns);
        stats.1 += 1;
        let (sum, n) = *stats;
        self.records.push(BenchRecord {
            suite,
            variant: variant.to_string(),
            parameter,
            trial,
            elapsed_ns: ns,
        });
        self.check(sum, n, remaining)?;
        Ok(out)
    }

    fn check(&self, series_sum: u128, series_n: u64, remaining: u64) -> Result<(), BenchError> {
        let Some(limit) = self.limit else {
            return Ok(());
        };
        let elapsed = self.start.elapsed();
        if elapsed > limit {
            return Err(BenchError::Deadline { elapsed, limit });
        }
        if self.project && series_n >= MIN_PROJECTION_TRIALS {
            let mean = series_sum / u128::from(series_n);
            let ahead = mean.saturating_mul(u128::from(remaining));
            let projected =
                elapsed + Duration::from_nanos(u64::try_from(ahead).unwrap_or(u64::MAX));
            if projected > limit {
                return Err(BenchError::Projected {
                    projected,
                    elapsed,
                    limit,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Keygen, Suite::Hash, Suite::Encdec, Suite::Policy] {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("merkle".parse::<Suite>().is_err());
    }

    #[test]
    fn recorder_times_are_positive() {
        let mut r = Recorder::new();
        for t in 0..10 {
            r.time(Suite::Hash, "sha1", 0, t, 9 - u64::from(t), || ())
                .unwrap();
        }
        assert_eq!(r.records().len(), 10);
        assert!(r.records().iter().all(|x| x.elapsed_ns > 0));
    }

    #[test]
    fn zero_budget_stops_at_first_trial() {
        let mut r = Recorder::with_budget(Duration::ZERO, false);
        let err = r
            .time(Suite::Hash, "sha1", 0, 0, 10, || {
                std::thread::sleep(Duration::from_millis(1))
            })
            .unwrap_err();
        assert!(matches!(err, BenchError::Deadline { .. }));
        assert_eq!(r.records().len(), 1);
    }

    #[test]
    fn projection_waits_for_enough_trials_then_aborts() {
        let mut r = Recorder::with_budget(Duration::from_secs(3600), true);
        let slow = || std::thread::sleep(Duration::from_millis(2));
        // 2 ms x 10^7 remaining trials is far beyond an hour.
        for t in 0..MIN_PROJECTION_TRIALS - 1 {
            r.time(Suite::Keygen, "keygen", 4096, t as u32, 10_000_000, slow)
                .unwrap();
        }
        let err = r
            .time(Suite::Keygen, "keygen", 4096, 19, 10_000_000, slow)
            .unwrap_err();
        assert!(err.is_budget());
        assert!(matches!(err, BenchError::Projected { .. }));
    }

    #[test]
    fn projection_tracks_series_separately() {
        let mut r = Recorder::with_budget(Duration::from_secs(3600), true);
        for t in 0..30 {
            r.time(Suite::Hash, "a", 0, t, 0, || ()).unwrap();
        }
        // A new series with huge remaining work but no history yet passes,
        // even when interleaved with the old one.
        r.time(Suite::Hash, "b", 1, 0, u64::MAX, || ()).unwrap();
        r.time(Suite::Hash, "a", 0, 30, 0, || ()).unwrap();
        r.time(Suite::Hash, "b", 1, 1, u64::MAX, || ()).unwrap();
    }
}
