//! Nonconformity scores and the calibrated radius.
//!
//! The score of a labeled point is the distance from its target to the
//! nearest of K generated samples. The radius is an empirical quantile of
//! the calibration scores, in one of three variants (see [`QuantileMode`]).

use std::io::Write;

use rayon::prelude::*;

use crate::backbones::Backbone;
use crate::dataset::LabeledPoint;
use crate::error::{PcpError, Result};
use crate::predict::draw_batch;
use crate::rng::{self, Domain};
use crate::types::{NormKind, PcpConfig, QuantileMode, Radius, SampleBatch};

/// Calibration scores, one per calibration point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(PcpError::precondition("scores must be finite and >= 0"));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Single-column CSV with header `score`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["score"])?;
        for s in &self.0 {
            wtr.write_record([s.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Distance from `y` to the closest sample in `batch`.
pub fn score(y: &[f64], batch: &SampleBatch, norm: NormKind) -> Result<f64> {
    if batch.is_empty() {
        return Err(PcpError::precondition("empty sample batch"));
    }
    PcpError::check_dim(batch.dim(), y.len())?;
    Ok(min_distance(y, batch.samples(), norm))
}

pub fn min_distance(y: &[f64], samples: &[Vec<f64>], norm: NormKind) -> f64 {
    samples
        .iter()
        .map(|s| norm.dist_unchecked(y, s))
        .fold(f64::INFINITY, f64::min)
}

/// 1-indexed order statistic selected by `level` among `n` values:
/// `⌈n · level⌉`, at least 1.
fn order_rank(n: usize, level: f64) -> usize {
    let v = n as f64 * level;
    // Absorb representation error so that e.g. 100 · 0.9 selects rank 90.
    let rank = (v - 1e-9 * v.max(1.0)).ceil();
    (rank.max(1.0) as usize).min(n)
}

/// `Q_level(z) = inf { t : #{z_i ≤ t} / n ≥ level }`, i.e. the
/// `⌈n · level⌉`-th smallest value. `+∞` entries sort last.
pub fn empirical_quantile(z: &[f64], level: f64) -> Result<f64> {
    if z.is_empty() {
        return Err(PcpError::precondition("empirical quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(PcpError::precondition(format!("quantile level {level} outside [0, 1]")));
    }
    if z.iter().any(|v| v.is_nan()) {
        return Err(PcpError::precondition("NaN in quantile input"));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[order_rank(z.len(), level) - 1])
}

/// Radius for the given calibration scores and miscoverage `alpha`.
pub fn calibrated_radius(scores: &ScoreVector, alpha: f64, mode: QuantileMode) -> Result<Radius> {
    Ok(match conformal_threshold(&scores.0, alpha, mode)? {
        Some(r) => Radius::Finite(r),
        None => Radius::Infinite,
    })
}

/// Conformal threshold of arbitrary real scores; `None` stands for `+∞`.
pub fn conformal_threshold(scores: &[f64], alpha: f64, mode: QuantileMode) -> Result<Option<f64>> {
    let n = scores.len();
    if n == 0 {
        return Err(PcpError::precondition("no calibration scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PcpError::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let nf = n as f64;
    match mode {
        QuantileMode::Inflated => {
            let rank = order_rank(n + 1, 1.0 - alpha);
            if rank == n + 1 {
                return Ok(None);
            }
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            Ok(Some(sorted[rank - 1]))
        }
        QuantileMode::Plain => Ok(Some(empirical_quantile(scores, 1.0 - alpha)?)),
        QuantileMode::Corrected => {
            if alpha < 1.0 / (nf + 1.0) {
                return Err(PcpError::config(format!(
                    "corrected quantile needs alpha >= 1/(n+1) = {:.6}, got {alpha}",
                    1.0 / (nf + 1.0)
                )));
            }
            // (1 - α)(1 + 1/n), written to keep n · level = (n + 1)(1 - α).
            let level = ((1.0 - alpha) * (nf + 1.0) / nf).min(1.0);
            Ok(Some(empirical_quantile(scores, level)?))
        }
    }
}

/// Scores of the calibration points. Point `i` draws its batch from the
/// calibration stream `i` of `config.seed`; when `beta > 0` the batch is
/// oversampled to `⌈K / (1 - β)⌉` and filtered to the K densest samples.
pub fn compute_scores<B: Backbone + ?Sized>(
    backbone: &B,
    cal: &[LabeledPoint],
    config: &PcpConfig,
    beta: f64,
) -> Result<ScoreVector> {
    if cal.is_empty() {
        return Err(PcpError::precondition("calibration fold is empty"));
    }
    let scores = cal
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let mut rng = rng::stream(config.seed, Domain::Calibration, i as u64);
            let batch = draw_batch(backbone, pt.x(), config.k_samples, beta, &mut rng)?;
            score(pt.y(), &batch, config.norm)
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreVector::new(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{JointGmmModel, PointMass};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn batch(samples: &[&[f64]]) -> SampleBatch {
        SampleBatch::new(samples.iter().map(|s| s.to_vec()).collect(), None).unwrap()
    }

    fn one_to(n: usize) -> ScoreVector {
        ScoreVector::new((1..=n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[3.0], &batch(&[&[1.0], &[5.0], &[3.5]]), NormKind::L2).unwrap(), 0.5);
        assert_eq!(score(&[5.0], &batch(&[&[1.0], &[5.0], &[3.5]]), NormKind::L2).unwrap(), 0.0);
        // min(|(3,4)|, |(1,1)|) = √2.
        let s = score(&[0.0, 0.0], &batch(&[&[3.0, 4.0], &[1.0, 1.0]]), NormKind::L2).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            score(&[0.0], &batch(&[&[0.0, 1.0]]), NormKind::L2),
            Err(PcpError::Dimension { .. })
        ));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[5.0], 1.0).unwrap(), 5.0);
        // ⌈10 · 0.9⌉ = 9th smallest of {1..9, ∞}.
        let mut z: Vec<f64> = (1..=9).map(f64::from).collect();
        z.push(f64::INFINITY);
        assert_eq!(empirical_quantile(&z, 0.9).unwrap(), 9.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn radius_examples() {
        // ⌈100 · 0.9⌉ = 90th of the 100 inflated values.
        assert_eq!(calibrated_radius(&one_to(99), 0.1, QuantileMode::Inflated).unwrap(), Radius::Finite(90.0));
        // ⌈10 · 0.95⌉ = 10 = n + 1 hits the sentinel.
        assert_eq!(calibrated_radius(&one_to(9), 0.05, QuantileMode::Inflated).unwrap(), Radius::Infinite);
        // ⌈99 · 0.9 · 100/99⌉ = ⌈90⌉ = 90; agrees with the inflated quantile.
        assert_eq!(calibrated_radius(&one_to(99), 0.1, QuantileMode::Corrected).unwrap(), Radius::Finite(90.0));
        // ⌈99 · 0.9⌉ = ⌈89.1⌉ = 90.
        assert_eq!(calibrated_radius(&one_to(99), 0.1, QuantileMode::Plain).unwrap(), Radius::Finite(90.0));
        assert_eq!(calibrated_radius(&one_to(9), 0.25, QuantileMode::Plain).unwrap(), Radius::Finite(7.0));
        assert!(matches!(
            calibrated_radius(&one_to(9), 0.05, QuantileMode::Corrected),
            Err(PcpError::Config(_))
        ));
        assert!(calibrated_radius(&ScoreVector::new(vec![]).unwrap(), 0.1, QuantileMode::Plain).is_err());
    }

    fn brute_rank(n: usize, level: f64) -> usize {
        // Smallest r with r / n >= level, by enumeration over exact rationals.
        (1..=n).find(|&r| (r as f64) >= n as f64 * level - 1e-9).unwrap_or(n)
    }

    proptest! {
        #[test]
        fn corrected_equals_inflated_when_finite(n in 1usize..300, a in 1u32..99) {
            let alpha = f64::from(a) / 100.0;
            prop_assume!(alpha >= 1.0 / (n as f64 + 1.0));
            let s = one_to(n);
            let inf = calibrated_radius(&s, alpha, QuantileMode::Inflated).unwrap();
            let cor = calibrated_radius(&s, alpha, QuantileMode::Corrected).unwrap();
            if let Radius::Finite(r) = inf {
                prop_assert_eq!(cor, Radius::Finite(r));
            }
        }

        #[test]
        fn quantile_is_the_order_statistic(mut z in prop::collection::vec(-1e3f64..1e3, 1..60), level in 0.0f64..=1.0) {
            let q = empirical_quantile(&z, level).unwrap();
            z.sort_by(f64::total_cmp);
            prop_assert_eq!(q, z[brute_rank(z.len(), level).max(1) - 1]);
        }

        #[test]
        fn quantile_is_monotone_in_level(z in prop::collection::vec(-1e3f64..1e3, 1..60), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(empirical_quantile(&z, lo).unwrap() <= empirical_quantile(&z, hi).unwrap());
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = z.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(empirical_quantile(&z, 1.0).unwrap(), max);
            prop_assert_eq!(empirical_quantile(&z, 1.0 / z.len() as f64).unwrap(), min);
        }

        #[test]
        fn score_non_increasing_as_samples_are_appended(
            y in prop::collection::vec(-10.0f64..10.0, 2),
            samples in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..30),
        ) {
            let mut prev = f64::INFINITY;
            for k in 1..=samples.len() {
                let b = SampleBatch::new(samples[..k].to_vec(), None).unwrap();
                let s = score(&y, &b, NormKind::L2).unwrap();
                prop_assert!(s <= prev);
                prev = s;
            }
        }

        #[test]
        fn scores_and_radius_scale_with_targets(
            ys in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 5..40),
            shift in prop::collection::vec(-3.0f64..3.0, 2),
            c_exp in -2i32..3,
        ) {
            let c = 2f64.powi(c_exp);
            let centers = |scale: f64| vec![
                vec![shift[0] * scale, shift[1] * scale],
                vec![-shift[1] * scale, shift[0] * scale],
            ];
            for norm in [NormKind::L2, NormKind::Linf, NormKind::L1] {
                let base: Vec<f64> = ys.iter().map(|y| {
                    score(y, &SampleBatch::new(centers(1.0), None).unwrap(), norm).unwrap()
                }).collect();
                let scaled: Vec<f64> = ys.iter().map(|y| {
                    let y: Vec<f64> = y.iter().map(|v| v * c).collect();
                    score(&y, &SampleBatch::new(centers(c), None).unwrap(), norm).unwrap()
                }).collect();
                for (a, b) in base.iter().zip(&scaled) {
                    prop_assert_eq!(a * c, *b);
                }
                let r1 = calibrated_radius(&ScoreVector::new(base).unwrap(), 0.2, QuantileMode::Plain).unwrap();
                let r2 = calibrated_radius(&ScoreVector::new(scaled).unwrap(), 0.2, QuantileMode::Plain).unwrap();
                prop_assert_eq!(r1.as_f64() * c, r2.as_f64());
            }
        }
    }

    fn cal_points(n: usize) -> Vec<LabeledPoint> {
        (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                LabeledPoint::new(vec![x], vec![2.0 * x]).unwrap()
            })
            .collect()
    }

    #[test]
    fn point_mass_scores() {
        let cfg = PcpConfig::new(0.1, 5).unwrap();
        let exact = PointMass::new(1, 1, |x| vec![2.0 * x[0]]);
        let s = compute_scores(&exact, &cal_points(30), &cfg, 0.0).unwrap();
        assert!(s.as_slice().iter().all(|v| *v == 0.0));
        let shifted = PointMass::new(1, 1, |x| vec![2.0 * x[0] - 0.75]);
        let s = compute_scores(&shifted, &cal_points(30), &cfg, 0.0).unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 0.75).abs() < 1e-12));
        assert!(compute_scores(&exact, &[], &cfg, 0.0).is_err());
    }

    #[test]
    fn more_samples_give_smaller_scores() {
        let model = JointGmmModel::new(1, 1, vec![1.0], vec![vec![0.0, 0.0]], vec![DMatrix::identity(2, 2)]).unwrap();
        let mut rng = rng::stream(1, Domain::Synth, 0);
        let cal: Vec<LabeledPoint> = (0..500)
            .map(|_| LabeledPoint::new(vec![rng.random()], vec![rng.sample(rand_distr::StandardNormal)]).unwrap())
            .collect();
        let mean = |k| {
            let cfg = PcpConfig::new(0.1, k).unwrap().with_seed(3);
            let s = compute_scores(&model, &cal, &cfg, 0.0).unwrap();
            s.as_slice().iter().sum::<f64>() / s.len() as f64
        };
        assert!(mean(100) < mean(1));
    }

    #[test]
    fn scores_export_as_single_column_csv() {
        let mut buf = Vec::new();
        ScoreVector::new(vec![0.5, 2.0]).unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "score\n0.5\n2\n");
    }
}
