//! Value types shared across the crate.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{PcpError, Result};

/// K generated targets for one covariate, with densities when the
/// backbone can evaluate them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    samples: Vec<Vec<f64>>,
    densities: Option<Vec<f64>>,
}

impl SampleBatch {
    pub fn new(samples: Vec<Vec<f64>>, densities: Option<Vec<f64>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| PcpError::precondition("sample batch must hold at least one sample"))?;
        let d = first.len();
        for s in &samples {
            PcpError::check_dim(d, s.len())?;
        }
        if let Some(dens) = &densities {
            PcpError::check_dim(samples.len(), dens.len())?;
            if dens.iter().any(|q| !(*q >= 0.0)) {
                return Err(PcpError::precondition("densities must be non-negative"));
            }
        }
        Ok(Self { samples, densities })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn densities(&self) -> Option<&[f64]> {
        self.densities.as_deref()
    }

    pub fn into_samples(self) -> Vec<Vec<f64>> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    L2,
    Linf,
    L1,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::L2 => "l2",
            NormKind::Linf => "linf",
            NormKind::L1 => "l1",
        }
    }

    /// Norm of `a - b`. Callers guarantee equal lengths.
    #[inline]
    pub fn dist_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(u, v)| (u - v).abs());
        match self {
            NormKind::L2 => diffs.map(|t| t * t).sum::<f64>().sqrt(),
            NormKind::Linf => diffs.fold(0.0, f64::max),
            NormKind::L1 => diffs.sum(),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        PcpError::check_dim(a.len(), b.len())?;
        Ok(self.dist_unchecked(a, b))
    }
}

/// Which empirical quantile of the calibration scores sets the radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileMode {
    /// `Q_{1-α}(E_{1:n} ∪ {∞})`.
    Inflated,
    /// `Q_{1-α}(E_{1:n})`.
    Plain,
    /// `Q_{(1-α)(1+1/n)}(E_{1:n})`, requires `α ≥ 1/(n+1)`.
    Corrected,
}

impl QuantileMode {
    /// Corrected when it is admissible for `n` calibration scores, else Inflated.
    pub fn default_for(alpha: f64, n: usize) -> Self {
        if alpha >= 1.0 / (n as f64 + 1.0) {
            QuantileMode::Corrected
        } else {
            QuantileMode::Inflated
        }
    }
}

/// A ball radius; `Infinite` makes the predictive set the whole space.
/// Serialized as a number or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    Finite(f64),
    Infinite,
}

impl Radius {
    pub fn finite(r: f64) -> Result<Self> {
        if r.is_finite() && r >= 0.0 {
            Ok(Radius::Finite(r))
        } else {
            Err(PcpError::precondition(format!("radius must be finite and >= 0, got {r}")))
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Radius::Infinite)
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Radius::Finite(r) => Some(*r),
            Radius::Infinite => None,
        }
    }

    /// f64 view where the sentinel maps to `+∞`; only for comparisons.
    pub fn as_f64(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Radius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Radius::Finite(r) => write!(f, "{r}"),
            Radius::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Radius {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Radius::Finite(r) => s.serialize_f64(*r),
            Radius::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Radius {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct RadiusVisitor;
        impl Visitor<'_> for RadiusVisitor {
            type Value = Radius;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Radius, E> {
                Radius::finite(v).map_err(E::custom)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Radius, E> {
                self.visit_f64(v as f64)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Radius, E> {
                self.visit_f64(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Radius, E> {
                if v == "inf" {
                    Ok(Radius::Infinite)
                } else {
                    Err(E::custom(format!("unexpected radius string {v:?}")))
                }
            }
        }
        de.deserialize_any(RadiusVisitor)
    }
}

/// Strictly increasing filter fractions in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BetaGrid(Vec<f64>);

impl BetaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PcpError::config("beta grid must be non-empty"));
        }
        for &b in &values {
            check_beta(b)?;
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PcpError::config("beta grid must be strictly increasing"));
        }
        Ok(Self(values))
    }

    /// `{0.1, 0.2, ..., 0.7}`.
    pub fn standard() -> Self {
        Self((1..=7).map(|i| i as f64 / 10.0).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for BetaGrid {
    type Error = PcpError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        BetaGrid::new(v)
    }
}

impl From<BetaGrid> for Vec<f64> {
    fn from(g: BetaGrid) -> Self {
        g.0
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(PcpError::config(format!("beta must lie in [0, 1), got {beta}")))
    }
}

/// Filter fraction for HD-PCP: fixed, or chosen from a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaChoice {
    Fixed(f64),
    Grid(BetaGrid),
}

impl Default for BetaChoice {
    fn default() -> Self {
        BetaChoice::Fixed(0.0)
    }
}

/// Fold used to pick β from a grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaFold {
    #[default]
    Calibration,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcpConfig {
    /// Miscoverage level α.
    pub alpha: f64,
    /// Samples per covariate (K).
    pub k_samples: usize,
    pub beta: BetaChoice,
    pub beta_fold: BetaFold,
    pub norm: NormKind,
    /// `None` picks [`QuantileMode::default_for`] at calibration time.
    pub quantile_mode: Option<QuantileMode>,
    pub seed: u64,
}

impl Default for PcpConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            k_samples: 40,
            beta: BetaChoice::default(),
            beta_fold: BetaFold::default(),
            norm: NormKind::L2,
            quantile_mode: None,
            seed: 0,
        }
    }
}

impl PcpConfig {
    pub fn new(alpha: f64, k_samples: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            k_samples,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: QuantileMode) -> Self {
        self.quantile_mode = Some(mode);
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_beta(mut self, beta: BetaChoice) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PcpError::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.k_samples == 0 {
            return Err(PcpError::config("k_samples must be >= 1"));
        }
        if let BetaChoice::Fixed(b) = self.beta {
            check_beta(b)?;
        }
        Ok(())
    }

    /// Quantile variant used for `n` calibration scores.
    pub fn mode_for(&self, n: usize) -> QuantileMode {
        self.quantile_mode
            .unwrap_or_else(|| QuantileMode::default_for(self.alpha, n))
    }
}

/// Union of K balls of a common radius: the predictive set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallUnionSet {
    centers: Vec<Vec<f64>>,
    radius: Radius,
    norm: NormKind,
}

impl BallUnionSet {
    pub fn new(centers: Vec<Vec<f64>>, radius: Radius, norm: NormKind) -> Result<Self> {
        let d = centers
            .first()
            .ok_or_else(|| PcpError::precondition("ball union needs at least one center"))?
            .len();
        if d == 0 {
            return Err(PcpError::precondition("centers must have dimension >= 1"));
        }
        for c in &centers {
            PcpError::check_dim(d, c.len())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(PcpError::precondition("centers must be finite"));
            }
        }
        if let Radius::Finite(r) = radius {
            Radius::finite(r)?;
        }
        Ok(Self { centers, radius, norm })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn radius(&self) -> Radius {
        self.radius
    }

    pub fn norm(&self) -> NormKind {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }
}

/// Evaluation summary for one test fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub marginal_coverage: f64,
    pub conditional_coverage: f64,
    pub mean_set_size: f64,
    pub set_size_stderr: f64,
    pub n_test: usize,
    /// Test points whose set was the whole space (excluded from the size stats).
    pub n_infinite: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(NormKind::L2.distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(NormKind::L2.distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        // max(|1-4|, |-2-2|) = max(3, 4)
        assert_eq!(NormKind::Linf.distance(&[1.0, -2.0], &[4.0, 2.0]).unwrap(), 4.0);
        assert_eq!(NormKind::L1.distance(&[1.0, -2.0], &[4.0, 2.0]).unwrap(), 7.0);
        assert!(matches!(
            NormKind::L2.distance(&[0.0], &[0.0, 1.0]),
            Err(PcpError::Dimension { .. })
        ));
    }

    fn triple(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        let v = || prop::collection::vec(-100.0f64..100.0, d);
        (v(), v(), v())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn norms_satisfy_metric_axioms((a, b, c) in (1usize..5).prop_flat_map(triple)) {
            for norm in [NormKind::L2, NormKind::Linf, NormKind::L1] {
                let ab = norm.distance(&a, &b).unwrap();
                let ba = norm.distance(&b, &a).unwrap();
                let bc = norm.distance(&b, &c).unwrap();
                let ac = norm.distance(&a, &c).unwrap();
                prop_assert_eq!(norm.distance(&a, &a).unwrap(), 0.0);
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab, ba);
                prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ab + bc));
            }
        }
    }

    #[test]
    fn radius_serializes_sentinel_as_string() {
        assert_eq!(serde_json::to_string(&Radius::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Radius::Finite(1.5)).unwrap(), "1.5");
        let r: Radius = serde_json::from_str("\"inf\"").unwrap();
        assert!(r.is_infinite());
        let r: Radius = serde_json::from_str("2").unwrap();
        assert_eq!(r, Radius::Finite(2.0));
        assert!(serde_json::from_str::<Radius>("-1.0").is_err());
        assert!(serde_json::from_str::<Radius>("\"infinity\"").is_err());
    }

    #[test]
    fn ball_union_serializes_to_exchange_format() {
        let set = BallUnionSet::new(vec![vec![0.0, 1.0]], Radius::Infinite, NormKind::L2).unwrap();
        assert_eq!(
            serde_json::to_string(&set).unwrap(),
            r#"{"centers":[[0.0,1.0]],"radius":"inf","norm":"l2"}"#
        );
    }

    #[test]
    fn constructors_reject_invalid_values() {
        assert!(SampleBatch::new(vec![], None).is_err());
        assert!(SampleBatch::new(vec![vec![0.0]], Some(vec![-1.0])).is_err());
        assert!(SampleBatch::new(vec![vec![0.0]], Some(vec![1.0, 2.0])).is_err());
        assert!(SampleBatch::new(vec![vec![0.0], vec![0.0, 1.0]], None).is_err());
        assert!(BallUnionSet::new(vec![], Radius::Finite(1.0), NormKind::L2).is_err());
        assert!(Radius::finite(-0.5).is_err());
        assert!(Radius::finite(f64::INFINITY).is_err());
        assert!(PcpConfig::new(0.0, 10).is_err());
        assert!(PcpConfig::new(1.0, 10).is_err());
        assert!(PcpConfig::new(0.1, 0).is_err());
        assert!(BetaGrid::new(vec![0.2, 0.1]).is_err());
        assert!(BetaGrid::new(vec![0.5, 1.0]).is_err());
        assert!(BetaGrid::new(vec![]).is_err());
    }

    #[test]
    fn beta_choice_accepts_number_or_grid() {
        let c: BetaChoice = serde_json::from_str("0.2").unwrap();
        assert_eq!(c, BetaChoice::Fixed(0.2));
        let c: BetaChoice = serde_json::from_str("[0.1, 0.3]").unwrap();
        assert_eq!(c, BetaChoice::Grid(BetaGrid::new(vec![0.1, 0.3]).unwrap()));
        assert_eq!(BetaGrid::standard().values().len(), 7);
    }

    #[test]
    fn default_quantile_mode_switches_at_one_over_n_plus_one() {
        assert_eq!(QuantileMode::default_for(0.1, 99), QuantileMode::Corrected);
        assert_eq!(QuantileMode::default_for(0.05, 9), QuantileMode::Inflated);
        assert_eq!(QuantileMode::default_for(0.1, 9), QuantileMode::Corrected);
    }
}
