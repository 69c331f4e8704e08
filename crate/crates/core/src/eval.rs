//! Coverage and sharpness metrics over a test fold.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledPoint;
use crate::error::{PcpError, Result};
use crate::geometry::{self, Measure, MeasureEstimator};
use crate::rng::{self, Domain};
use crate::types::{BallUnionSet, CoverageReport};

/// Fewest test points the worst-slab estimator accepts.
pub const WSC_MIN_POINTS: usize = 20;

/// Worst-slab coverage knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WscConfig {
    pub delta: f64,
    pub n_directions: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for WscConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            n_directions: 100,
            split_fraction: 0.5,
            seed: 0,
        }
    }
}

impl WscConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PcpError::config(format!("wsc delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.n_directions == 0 {
            return Err(PcpError::config("wsc needs at least one direction"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(PcpError::config(format!(
                "wsc split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

pub fn marginal_coverage(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(PcpError::precondition("coverage of an empty test set"));
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Mean and standard error (sample standard deviation over `√n`, 0 for a
/// single value).
pub fn set_size_stats(measures: &[f64]) -> Result<(f64, f64)> {
    if measures.is_empty() {
        return Err(PcpError::precondition("set size statistics of an empty list"));
    }
    if measures.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(PcpError::precondition("set sizes must be finite and >= 0"));
    }
    let n = measures.len() as f64;
    let mean = measures.iter().sum::<f64>() / n;
    if measures.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = measures.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Per-dimension miscoverage for a union bound over `d` coordinates.
pub fn bonferroni_level(alpha: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(PcpError::precondition("bonferroni level needs d >= 1"));
    }
    Ok(alpha / d as f64)
}

/// Slab found on the selection half: `lo ≤ v·x ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub direction: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub selection_coverage: f64,
}

impl Slab {
    pub fn contains(&self, x: &[f64]) -> bool {
        let t = dot(&self.direction, x);
        t >= self.lo && t <= self.hi
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Worst-slab conditional coverage, evaluated on held-out points.
pub fn worst_slab_coverage(xs: &[&[f64]], flags: &[bool], cfg: &WscConfig) -> Result<f64> {
    Ok(worst_slab(xs, flags, cfg)?.1)
}

/// The worst slab on the selection half and its held-out coverage. When no
/// held-out point falls inside the slab, the selection coverage is returned.
pub fn worst_slab(xs: &[&[f64]], flags: &[bool], cfg: &WscConfig) -> Result<(Slab, f64)> {
    cfg.validate()?;
    if xs.len() != flags.len() {
        return Err(PcpError::precondition(format!(
            "{} covariates but {} coverage flags",
            xs.len(),
            flags.len()
        )));
    }
    if xs.len() < WSC_MIN_POINTS {
        return Err(PcpError::precondition(format!(
            "worst-slab coverage needs at least {WSC_MIN_POINTS} points, got {}",
            xs.len()
        )));
    }
    let p = xs[0].len();
    if xs.iter().any(|x| x.len() != p) {
        return Err(PcpError::precondition("covariates of unequal dimension"));
    }

    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, Domain::Wsc, 0));
    let n_sel = ((cfg.split_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (sel, held) = order.split_at(n_sel);
    let min_len = ((cfg.delta * n_sel as f64 - 1e-9).ceil() as usize).clamp(1, n_sel);

    let slab = (0..cfg.n_directions)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng::stream(cfg.seed, Domain::Wsc, j as u64 + 1);
            let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            v.iter_mut().for_each(|c| *c /= norm);
            let mut proj: Vec<(f64, f64)> = sel
                .iter()
                .map(|&i| (dot(&v, xs[i]), if flags[i] { 1.0 } else { 0.0 }))
                .collect();
            proj.sort_by(|a, b| a.0.total_cmp(&b.0));
            let values: Vec<f64> = proj.iter().map(|t| t.1).collect();
            let (a, b, cov) = min_mean_window(&values, min_len);
            Slab {
                direction: v,
                lo: proj[a].0,
                hi: proj[b - 1].0,
                selection_coverage: cov,
            }
        })
        .reduce_with(|a, b| if b.selection_coverage < a.selection_coverage { b } else { a })
        .expect("at least one direction");

    let inside: Vec<bool> = held.iter().filter(|&&i| slab.contains(xs[i])).map(|&i| flags[i]).collect();
    let value = if inside.is_empty() {
        slab.selection_coverage
    } else {
        marginal_coverage(&inside)?
    };
    Ok((slab, value))
}

/// Contiguous window `[a, b)` with `b - a ≥ min_len` minimizing the mean
/// of `values`, by Dinkelbach iteration on the ratio sum / length.
fn min_mean_window(values: &[f64], min_len: usize) -> (usize, usize, f64) {
    let n = values.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let mean = |a: usize, b: usize| (prefix[b] - prefix[a]) / (b - a) as f64;
    let mut best = (0, n, mean(0, n));
    loop {
        let lambda = best.2;
        // Minimize Σ (v - λ) over windows: best end minus largest admissible start prefix.
        let shifted = |i: usize| prefix[i] - lambda * i as f64;
        let mut arg_max_start = 0;
        let mut cand = (0, n, f64::INFINITY);
        for b in min_len..=n {
            let a = b - min_len;
            if shifted(a) > shifted(arg_max_start) {
                arg_max_start = a;
            }
            let val = shifted(b) - shifted(arg_max_start);
            if val < cand.2 {
                cand = (arg_max_start, b, val);
            }
        }
        let m = mean(cand.0, cand.1);
        if m < lambda - 1e-12 {
            best = (cand.0, cand.1, m);
        } else {
            return best;
        }
    }
}

/// Coverage flags and measures of `sets` on the test points; set `i` uses
/// measure stream `i` of `seed` when the estimator is randomized.
pub fn evaluate_sets(
    test: &[LabeledPoint],
    sets: &[BallUnionSet],
    estimator: &MeasureEstimator,
    seed: u64,
) -> Result<(Vec<bool>, Vec<Measure>)> {
    if test.len() != sets.len() {
        return Err(PcpError::precondition(format!("{} test points but {} sets", test.len(), sets.len())));
    }
    test.par_iter()
        .zip(sets)
        .enumerate()
        .map(|(i, (pt, set))| {
            let covered = geometry::contains(set, pt.y())?;
            let mut rng = rng::stream(seed, Domain::Measure, (1u64 << 32) + i as u64);
            Ok((covered, estimator.estimate(set, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Builds the report from per-point coverage flags and set measures.
/// Whole-space sets are counted in `n_infinite` and left out of the size
/// statistics. With fewer than [`WSC_MIN_POINTS`] points the conditional
/// coverage is NaN.
pub fn coverage_report(xs: &[&[f64]], flags: &[bool], measures: &[Measure], wsc: &WscConfig) -> Result<CoverageReport> {
    if flags.len() != measures.len() || xs.len() != flags.len() {
        return Err(PcpError::precondition("report inputs of unequal length"));
    }
    let marginal = marginal_coverage(flags)?;
    let conditional = if xs.len() >= WSC_MIN_POINTS {
        worst_slab_coverage(xs, flags, wsc)?
    } else {
        f64::NAN
    };
    let finite: Vec<f64> = measures.iter().filter_map(|m| m.value()).collect();
    let (mean, se) = if finite.is_empty() {
        (f64::INFINITY, 0.0)
    } else {
        set_size_stats(&finite)?
    };
    Ok(CoverageReport {
        marginal_coverage: marginal,
        conditional_coverage: conditional,
        mean_set_size: mean,
        set_size_stderr: se,
        n_test: flags.len(),
        n_infinite: measures.len() - finite.len(),
    })
}

pub const REPORT_HEADER: [&str; 6] = [
    "marginal_coverage",
    "conditional_coverage",
    "mean_set_size",
    "set_size_stderr",
    "n_test",
    "n_infinite",
];

impl CoverageReport {
    pub fn csv_fields(&self) -> [String; 6] {
        [
            self.marginal_coverage.to_string(),
            self.conditional_coverage.to_string(),
            self.mean_set_size.to_string(),
            self.set_size_stderr.to_string(),
            self.n_test.to_string(),
            self.n_infinite.to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| PcpError::Data(e.to_string()))
    }
}

/// Writes reports as CSV rows under [`REPORT_HEADER`].
pub fn write_reports_csv<W: Write>(reports: &[CoverageReport], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(REPORT_HEADER)?;
    for r in reports {
        wtr.write_record(r.csv_fields())?;
    }
    wtr.flush()?;
    Ok(())
}
