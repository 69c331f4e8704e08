//! Conformalized per-coordinate quantile boxes built from the same K
//! backbone samples as PCP.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::Backbone;
use crate::calibrate::{conformal_threshold, empirical_quantile};
use crate::dataset::LabeledPoint;
use crate::error::{PcpError, Result};
use crate::eval::bonferroni_level;
use crate::rng::{self, Domain};
use crate::types::PcpConfig;

/// How the per-coordinate band level is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    /// `(α/2, 1 - α/2)` quantiles in every coordinate.
    Naive,
    /// `(α/2d, 1 - α/2d)` quantiles in every coordinate.
    Bonferroni,
}

/// An axis-aligned box `[lo, hi]`; `None` bounds mean the whole space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub unbounded: bool,
}

impl IntervalBox {
    pub fn contains(&self, y: &[f64]) -> bool {
        self.unbounded || y.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Lebesgue measure, `None` for the whole space.
    pub fn measure(&self) -> Option<f64> {
        (!self.unbounded).then(|| self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).max(0.0)).product())
    }
}

/// Calibrated box predictor.
#[derive(Debug, Clone)]
pub struct BoxPredictor {
    kind: BoxKind,
    level: f64,
    /// Amount every band is widened by; `None` when infinite.
    margin: Option<f64>,
    config: PcpConfig,
}

fn band(samples: &[Vec<f64>], level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = samples[0].len();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        lo.push(empirical_quantile(&col, level / 2.0)?);
        hi.push(empirical_quantile(&col, 1.0 - level / 2.0)?);
    }
    Ok((lo, hi))
}

/// Signed distance outside the band (negative when inside), maximized over coordinates.
fn box_score(y: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    y.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (a, b))| (a - v).max(v - b))
        .fold(f64::NEG_INFINITY, f64::max)
}

impl BoxPredictor {
    pub fn calibrate<B: Backbone + ?Sized>(
        backbone: &B,
        cal: &[LabeledPoint],
        config: &PcpConfig,
        kind: BoxKind,
    ) -> Result<Self> {
        config.validate()?;
        if cal.is_empty() {
            return Err(PcpError::precondition("no calibration points"));
        }
        let (_, d) = backbone.dims();
        let level = match kind {
            BoxKind::Naive => config.alpha,
            BoxKind::Bonferroni => bonferroni_level(config.alpha, d)?,
        };
        let scores = cal
            .par_iter()
            .enumerate()
            .map(|(i, pt)| {
                let mut rng = rng::stream(config.seed, Domain::Calibration, i as u64);
                let batch = backbone.sample(pt.x(), config.k_samples, &mut rng)?;
                PcpError::check_dim(d, pt.y().len())?;
                let (lo, hi) = band(batch.samples(), level)?;
                Ok(box_score(pt.y(), &lo, &hi))
            })
            .collect::<Result<Vec<f64>>>()?;
        let margin = conformal_threshold(&scores, config.alpha, config.mode_for(scores.len()))?;
        Ok(Self { kind, level, margin, config: config.clone() })
    }

    pub fn kind(&self) -> BoxKind {
        self.kind
    }

    /// Per-coordinate miscoverage of the raw sample band.
    pub fn band_level(&self) -> f64 {
        self.level
    }

    pub fn margin(&self) -> Option<f64> {
        self.margin
    }

    pub fn predict<B: Backbone + ?Sized>(&self, backbone: &B, x: &[f64], index: usize) -> Result<IntervalBox> {
        let mut rng = rng::stream(self.config.seed, Domain::Test, index as u64);
        let batch = backbone.sample(x, self.config.k_samples, &mut rng)?;
        let (lo, hi) = band(batch.samples(), self.level)?;
        Ok(match self.margin {
            Some(q) => IntervalBox {
                lo: lo.iter().map(|v| v - q).collect(),
                hi: hi.iter().map(|v| v + q).collect(),
                unbounded: false,
            },
            None => IntervalBox { lo, hi, unbounded: true },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{MixtureBackbone, GaussianMixture, PointMass};
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn box_geometry() {
        let b = IntervalBox { lo: vec![0.0, -1.0], hi: vec![2.0, 1.0], unbounded: false };
        assert_eq!(b.measure(), Some(4.0));
        assert!(b.contains(&[1.0, 1.0]));
        assert!(!b.contains(&[2.1, 0.0]));
        assert_eq!(box_score(&[1.0, 0.0], &b.lo, &b.hi), -1.0);
        assert_eq!(box_score(&[3.0, 0.0], &b.lo, &b.hi), 1.0);
    }

    #[test]
    fn point_mass_gives_zero_width() {
        let bb = PointMass::new(1, 1, |x| vec![2.0 * x[0]]);
        let cal: Vec<LabeledPoint> = (0..50).map(|i| LabeledPoint::new(vec![i as f64], vec![2.0 * i as f64]).unwrap()).collect();
        let cfg = PcpConfig::new(0.1, 10).unwrap();
        let pred = BoxPredictor::calibrate(&bb, &cal, &cfg, BoxKind::Naive).unwrap();
        assert_eq!(pred.margin(), Some(0.0));
        let b = pred.predict(&bb, &[3.0], 0).unwrap();
        assert_eq!(b.measure(), Some(0.0));
        assert!(b.contains(&[6.0]));
    }

    #[test]
    fn bonferroni_box_covers_independent_coordinates() {
        // y | x ~ N(0, I_3) and the backbone is the truth.
        let law = GaussianMixture::from_params(vec![1.0], vec![vec![0.0; 3]], vec![DMatrix::identity(3, 3)]).unwrap();
        let bb = MixtureBackbone::new(1, 3, move |_| Ok(law.clone()));
        let mut rng = rng::stream(7, Domain::Synth, 0);
        let mut draw = |n: usize| -> Vec<LabeledPoint> {
            (0..n)
                .map(|_| {
                    let y: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                    LabeledPoint::new(vec![rng.random::<f64>()], y).unwrap()
                })
                .collect()
        };
        let cal = draw(500);
        let test = draw(2000);
        let cfg = PcpConfig::new(0.1, 200).unwrap().with_seed(3);
        let pred = BoxPredictor::calibrate(&bb, &cal, &cfg, BoxKind::Bonferroni).unwrap();
        assert!((pred.band_level() - 0.1 / 3.0).abs() < 1e-15);
        let hits = test
            .iter()
            .enumerate()
            .filter(|(i, pt)| pred.predict(&bb, pt.x(), *i).unwrap().contains(pt.y()))
            .count();
        assert!(hits as f64 / 2000.0 >= 0.9 - 0.02);
    }
}
