//! Summary statistics, trendline fits and rank correlation.

use std::collections::BTreeMap;

use super::{BenchRecord, Suite};

/// Share of each group's leading trials left out of summaries.
pub const WARMUP_PERCENT: usize = 5;

pub fn warmup_trials(trials: usize) -> usize {
    trials * WARMUP_PERCENT / 100
}

/// Exact moments over the post-warm-up trials of one (suite, variant,
/// parameter) group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub suite: Suite,
    pub variant: String,
    pub parameter: u64,
    pub trials: usize,
    pub warmup: usize,
    pub n: usize,
    pub min_ns: u64,
    pub max_ns: u64,
    pub sum_ns: u128,
    pub sum_sq: u128,
}

impl Summary {
    pub fn mean_ns(&self) -> f64 {
        self.sum_ns as f64 / self.n as f64
    }

    /// Sample standard deviation, `sqrt((n*Sxx - Sx^2) / (n*(n-1)))`.
    pub fn stdev_ns(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as u128;
        let num = n * self.sum_sq - self.sum_ns * self.sum_ns;
        (num as f64 / (n * (n - 1)) as f64).sqrt()
    }
}

/// Groups records in order of first appearance and summarizes each group,
/// skipping the warm-up trials (lowest trial numbers).
pub fn summarize(records: &[BenchRecord]) -> Vec<Summary> {
    let mut order: Vec<(Suite, &str, u64)> = Vec::new();
    let mut groups: BTreeMap<(Suite, &str, u64), Vec<(u32, u64)>> = BTreeMap::new();
    for r in records {
        let key = (r.suite, r.variant.as_str(), r.parameter);
        let g = groups.entry(key).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        g.push((r.trial, r.elapsed_ns));
    }
    order
        .into_iter()
        .map(|key| {
            let mut g = groups.remove(&key).unwrap_or_default();
            g.sort_unstable();
            let warmup = warmup_trials(g.len());
            let kept = &g[warmup..];
            Summary {
                suite: key.0,
                variant: key.1.to_string(),
                parameter: key.2,
                trials: g.len(),
                warmup,
                n: kept.len(),
                min_ns: kept.iter().map(|t| t.1).min().unwrap_or(0),
                max_ns: kept.iter().map(|t| t.1).max().unwrap_or(0),
                sum_ns: kept.iter().map(|t| u128::from(t.1)).sum(),
                sum_sq: kept.iter().map(|t| u128::from(t.1) * u128::from(t.1)).sum(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendModel {
    /// `y = a * x^b`
    Power,
    /// `y = a * e^(b x)`
    Exponential,
}

impl TrendModel {
    pub fn name(self) -> &'static str {
        match self {
            TrendModel::Power => "power",
            TrendModel::Exponential => "exponential",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendFit {
    pub model: TrendModel,
    pub a: f64,
    pub b: f64,
    /// Coefficient of determination in log space.
    pub r_squared: f64,
}

/// Least squares on `ln y` (against `ln x` for the power model). Needs two
/// or more points with distinct x and positive coordinates.
pub fn fit_trend(model: TrendModel, points: &[(f64, f64)]) -> Option<TrendFit> {
    if points.len() < 2
        || points
            .iter()
            .any(|&(x, y)| y <= 0.0 || (model == TrendModel::Power && x <= 0.0))
    {
        return None;
    }
    let xs: Vec<f64> = points
        .iter()
        .map(|&(x, _)| {
            if model == TrendModel::Power {
                x.ln()
            } else {
                x
            }
        })
        .collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let intercept = my - b * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - b * x).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Some(TrendFit {
        model,
        a: intercept.exp(),
        b,
        r_squared,
    })
}

/// 1-based ranks; ties share the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman's rho: Pearson correlation of average ranks. `None` when either
/// side is constant or fewer than two pairs are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Empirical CDF: each distinct value with the fraction of samples at or
/// below it.
pub fn cdf(values: &[u64]) -> Vec<(u64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

/// Fixed three-decimal rendering used wherever summaries are written out.
pub fn fmt_ns(v: f64) -> String {
    format!("{v:.3}")
}
