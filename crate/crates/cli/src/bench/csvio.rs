//! CSV files: raw records, summaries and policy-delay CDFs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::stats::{cdf, fmt_ns, Summary};
use super::{BenchError, BenchRecord, Suite};

pub const RECORD_HEADER: &str = "suite,variant,parameter,trial,elapsed_ns";

pub fn write_records<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(RECORD_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads raw records, insisting on the exact header.
pub fn read_records<R: Read>(input: R) -> Result<Vec<BenchRecord>, BenchError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RECORD_HEADER {
        return Err(BenchError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header `{}`", header.join(",")),
        )));
    }
    Ok(rd.deserialize().collect::<Result<Vec<BenchRecord>, _>>()?)
}

/// A summary as written to disk; mean and deviation are fixed-point text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: Suite,
    pub variant: String,
    pub parameter: u64,
    pub trials: usize,
    pub warmup: usize,
    pub n: usize,
    pub min_ns: u64,
    pub max_ns: u64,
    pub avg_ns: String,
    pub stdev_ns: String,
}

impl From<&Summary> for SummaryRow {
    fn from(s: &Summary) -> Self {
        Self {
            suite: s.suite,
            variant: s.variant.clone(),
            parameter: s.parameter,
            trials: s.trials,
            warmup: s.warmup,
            n: s.n,
            min_ns: s.min_ns,
            max_ns: s.max_ns,
            avg_ns: fmt_ns(s.mean_ns()),
            stdev_ns: fmt_ns(s.stdev_ns()),
        }
    }
}

pub fn write_summaries<W: Write>(out: W, summaries: &[Summary]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        w.serialize(SummaryRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries<R: Read>(input: R) -> Result<Vec<SummaryRow>, BenchError> {
    let mut rd = csv::Reader::from_reader(input);
    Ok(rd.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?)
}

#[derive(Debug, Serialize)]
struct CdfRow<'a> {
    variant: &'a str,
    parameter: u64,
    elapsed_ns: u64,
    cumulative: f64,
}

/// Per (variant, parameter) empirical CDF of policy traversal delays, warm-up
/// included, in a plot-ready long format.
pub fn write_policy_cdf<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), BenchError> {
    let mut groups: Vec<((&str, u64), Vec<u64>)> = Vec::new();
    for r in records.iter().filter(|r| r.suite == Suite::Policy) {
        let key = (r.variant.as_str(), r.parameter);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.elapsed_ns),
            None => groups.push((key, vec![r.elapsed_ns])),
        }
    }
    let mut w = csv::Writer::from_writer(out);
    for ((variant, parameter), values) in &groups {
        for (elapsed_ns, cumulative) in cdf(values) {
            w.serialize(CdfRow {
                variant,
                parameter: *parameter,
                elapsed_ns,
                cumulative,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
