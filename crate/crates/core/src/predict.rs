//! PCP and HD-PCP: calibration, β selection and predictive sets.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::backbones::Backbone;
use crate::calibrate::{calibrated_radius, compute_scores, ScoreVector};
use crate::dataset::{Fold, LabeledDataset, LabeledPoint};
use crate::error::{PcpError, Result};
use crate::geometry::{self, Bounds};
use crate::rng::{self, Domain, StreamRng};
use crate::types::{check_beta, BallUnionSet, BetaChoice, BetaFold, BetaGrid, PcpConfig, QuantileMode, Radius, SampleBatch};

/// Uniform points per calibration covariate when comparing β values in d ≥ 2.
pub const SELECTION_MC_POINTS: usize = 4096;

/// `⌈K / (1 - β)⌉`: samples drawn before keeping the K densest.
pub fn oversample_count(k: usize, beta: f64) -> usize {
    let v = k as f64 / (1.0 - beta);
    (v - 1e-9 * v).ceil().max(k as f64) as usize
}

/// Keeps the `k` highest-density samples of a batch of size
/// `⌈k / (1 - β)⌉`. Equal densities keep the lower sample index.
pub fn hdpcp_filter(batch: SampleBatch, beta: f64, k: usize) -> Result<SampleBatch> {
    check_beta(beta)?;
    let densities = batch
        .densities()
        .ok_or_else(|| PcpError::Capability("density filtering needs sample densities".into()))?;
    let expected = oversample_count(k, beta);
    if batch.len() != expected {
        return Err(PcpError::precondition(format!(
            "filter expects {expected} samples for K = {k}, beta = {beta}, got {}",
            batch.len()
        )));
    }
    let order = densest(densities, k);
    let dens: Vec<f64> = order.iter().map(|&i| densities[i]).collect();
    let samples = batch.into_samples();
    let kept = order.iter().map(|&i| samples[i].clone()).collect();
    SampleBatch::new(kept, Some(dens))
}

/// Indices of the `k` highest densities, ascending; ties keep the lower index.
fn densest(densities: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..densities.len()).collect();
    order.sort_by(|&a, &b| densities[b].total_cmp(&densities[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Draws the K samples used as centers (or for scoring) at `x`, with
/// oversampling and density filtering when `beta > 0`.
pub fn draw_batch<B: Backbone + ?Sized>(
    backbone: &B,
    x: &[f64],
    k: usize,
    beta: f64,
    rng: &mut StreamRng,
) -> Result<SampleBatch> {
    if k == 0 {
        return Err(PcpError::precondition("K must be >= 1"));
    }
    if beta == 0.0 {
        let batch = backbone.sample(x, k, rng)?;
        return check_batch_len(batch, k);
    }
    if !backbone.has_density() {
        return Err(PcpError::Capability("HD-PCP needs a backbone with densities".into()));
    }
    let m = oversample_count(k, beta);
    let batch = check_batch_len(backbone.sample(x, m, rng)?, m)?;
    hdpcp_filter(batch, beta, k)
}

fn check_batch_len(batch: SampleBatch, k: usize) -> Result<SampleBatch> {
    if batch.len() != k {
        return Err(PcpError::precondition(format!(
            "backbone returned {} samples, expected {k}",
            batch.len()
        )));
    }
    Ok(batch)
}

/// A calibrated PCP / HD-PCP predictor. Immutable after construction.
#[derive(Clone)]
pub struct CalibratedPredictor {
    backbone: Arc<dyn Backbone>,
    radius: Radius,
    config: PcpConfig,
    mode: QuantileMode,
    scores: ScoreVector,
    selected_beta: Option<f64>,
}

impl std::fmt::Debug for CalibratedPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CalibratedPredictor")
            .field("radius", &self.radius)
            .field("config", &self.config)
            .field("mode", &self.mode)
            .field("n_cal", &self.scores.len())
            .field("selected_beta", &self.selected_beta)
            .finish()
    }
}

impl CalibratedPredictor {
    pub fn radius(&self) -> Radius {
        self.radius
    }

    pub fn config(&self) -> &PcpConfig {
        &self.config
    }

    pub fn quantile_mode(&self) -> QuantileMode {
        self.mode
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn n_cal(&self) -> usize {
        self.scores.len()
    }

    pub fn selected_beta(&self) -> Option<f64> {
        self.selected_beta
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    /// Same scores and backbone, radius recomputed for another quantile variant.
    pub fn with_mode(&self, mode: QuantileMode) -> Result<Self> {
        let radius = calibrated_radius(&self.scores, self.config.alpha, mode)?;
        Ok(Self {
            radius,
            mode,
            config: self.config.clone().with_mode(mode),
            ..self.clone()
        })
    }

    /// Predictive set at `x` from K fresh samples drawn with `rng`.
    pub fn predict(&self, x: &[f64], rng: &mut StreamRng) -> Result<BallUnionSet> {
        let beta = self.selected_beta.unwrap_or(0.0);
        let batch = draw_batch(self.backbone.as_ref(), x, self.config.k_samples, beta, rng)?;
        BallUnionSet::new(batch.into_samples(), self.radius, self.config.norm)
    }

    /// Predictive set for test point `index`, drawn from its own stream.
    pub fn predict_indexed(&self, x: &[f64], index: usize) -> Result<BallUnionSet> {
        self.predict(x, &mut rng::stream(self.config.seed, Domain::Test, index as u64))
    }

    /// Predictive sets for many covariates, test stream `i` for entry `i`.
    pub fn predict_all(&self, xs: &[&[f64]]) -> Result<Vec<BallUnionSet>> {
        xs.par_iter()
            .enumerate()
            .map(|(i, x)| self.predict_indexed(x, i))
            .collect()
    }
}

/// Calibrates with a fixed filter fraction on explicit calibration points.
pub fn calibrate_points(
    backbone: Arc<dyn Backbone>,
    cal: &[LabeledPoint],
    config: &PcpConfig,
    beta: f64,
) -> Result<CalibratedPredictor> {
    config.validate()?;
    check_beta(beta)?;
    let scores = compute_scores(backbone.as_ref(), cal, config, beta)?;
    let mode = config.mode_for(scores.len());
    let radius = calibrated_radius(&scores, config.alpha, mode)?;
    Ok(CalibratedPredictor {
        backbone,
        radius,
        config: config.clone(),
        mode,
        scores,
        selected_beta: (beta > 0.0 || matches!(config.beta, BetaChoice::Grid(_))).then_some(beta),
    })
}

/// PCP: scores on the calibration fold, radius at the configured quantile.
pub fn pcp_calibrate(
    backbone: Arc<dyn Backbone>,
    dataset: &LabeledDataset,
    config: &PcpConfig,
) -> Result<CalibratedPredictor> {
    let mut cfg = config.clone();
    cfg.beta = BetaChoice::Fixed(0.0);
    calibrate_points(backbone, &dataset.fold(Fold::Cal), &cfg, 0.0)
}

pub fn pcp_predict(predictor: &CalibratedPredictor, x: &[f64], rng: &mut StreamRng) -> Result<BallUnionSet> {
    predictor.predict(x, rng)
}

/// Outcome of a β grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSelection {
    pub beta: f64,
    /// Total set measure at the selection covariates, per grid value.
    pub totals: Vec<f64>,
}

/// Picks the β whose predictive sets at the selection covariates have the
/// smallest total measure (ties go to the smaller β).
///
/// For each β the scores and radius come from the selection points
/// themselves. Each point draws one batch of the largest oversampled size
/// from its calibration stream and one from a separate set stream; the
/// batch for a given β is the prefix of length `⌈K / (1 - β)⌉`, filtered
/// to the K densest samples. Measures are exact when d = 1; in higher
/// dimensions all β share the same uniform points per covariate.
pub fn hdpcp_select_beta<B: Backbone + ?Sized>(
    backbone: &B,
    points: &[LabeledPoint],
    grid: &BetaGrid,
    config: &PcpConfig,
) -> Result<BetaSelection> {
    config.validate()?;
    if points.is_empty() {
        return Err(PcpError::precondition("beta selection needs calibration points"));
    }
    let betas = grid.values();
    if betas.iter().any(|b| *b > 0.0) && !backbone.has_density() {
        return Err(PcpError::Capability("HD-PCP needs a backbone with densities".into()));
    }
    let k = config.k_samples;
    let largest = betas.iter().map(|&b| oversample_count(k, b)).max().unwrap_or(k);
    let draw = |x: &[f64], domain: Domain, i: usize| -> Result<SampleBatch> {
        let mut rng = rng::stream(config.seed, domain, i as u64);
        check_batch_len(backbone.sample(x, largest, &mut rng)?, largest)
    };

    let point_scores = points
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let full = draw(pt.x(), Domain::Calibration, i)?;
            PcpError::check_dim(full.dim(), pt.y().len())?;
            betas
                .iter()
                .map(|&beta| {
                    let kept = prefix_indices(&full, beta, k)?;
                    Ok(kept
                        .iter()
                        .map(|&j| config.norm.dist_unchecked(pt.y(), &full.samples()[j]))
                        .fold(f64::INFINITY, f64::min))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let radii = (0..betas.len())
        .map(|j| {
            let scores = ScoreVector::new(point_scores.iter().map(|s| s[j]).collect())?;
            calibrated_radius(&scores, config.alpha, config.mode_for(scores.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_point = points
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let full = draw(pt.x(), Domain::SelectionSets, i)?;
            let sets = betas
                .iter()
                .zip(&radii)
                .map(|(&beta, &radius)| {
                    let kept = prefix_indices(&full, beta, k)?;
                    let centers = kept.iter().map(|&j| full.samples()[j].clone()).collect();
                    BallUnionSet::new(centers, radius, config.norm)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rng = rng::stream(config.seed, Domain::Measure, i as u64);
            shared_measures(&sets, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let totals: Vec<f64> = (0..betas.len())
        .map(|j| per_point.iter().map(|m| m[j]).sum())
        .collect();
    let mut best = 0;
    for j in 1..totals.len() {
        if totals[j] < totals[best] {
            best = j;
        }
    }
    Ok(BetaSelection {
        beta: betas[best],
        totals,
    })
}

/// Indices into `full` of the batch for `beta`: the first `⌈k / (1 - β)⌉`
/// samples, filtered to the `k` densest.
fn prefix_indices(full: &SampleBatch, beta: f64, k: usize) -> Result<Vec<usize>> {
    let m = oversample_count(k, beta);
    if beta == 0.0 {
        return Ok((0..m).collect());
    }
    let densities = full
        .densities()
        .ok_or_else(|| PcpError::Capability("density filtering needs sample densities".into()))?;
    Ok(densest(&densities[..m], k))
}

/// Measures of several sets at one covariate. Exact when d = 1; otherwise
/// a common set of uniform points over a box enclosing every finite set.
fn shared_measures(sets: &[BallUnionSet], rng: &mut StreamRng) -> Result<Vec<f64>> {
    if sets[0].dim() == 1 {
        return sets
            .iter()
            .map(|s| geometry::measure_1d(s).map(|m| m.as_f64()))
            .collect();
    }
    let finite: Vec<&BallUnionSet> = sets.iter().filter(|s| !s.radius().is_infinite()).collect();
    if finite.is_empty() {
        return Ok(vec![f64::INFINITY; sets.len()]);
    }
    let d = sets[0].dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in &finite {
        let b = Bounds::enclosing(s)?;
        for j in 0..d {
            lo[j] = lo[j].min(b.lo[j]);
            hi[j] = hi[j].max(b.hi[j]);
        }
    }
    let bounds = Bounds::new(lo, hi)?;
    let mut hits = vec![0usize; sets.len()];
    let mut y = vec![0.0; d];
    for _ in 0..SELECTION_MC_POINTS {
        for j in 0..d {
            y[j] = rng.random_range(bounds.lo[j]..bounds.hi[j]);
        }
        for (h, s) in hits.iter_mut().zip(sets) {
            if geometry::contains_unchecked(s, &y) {
                *h += 1;
            }
        }
    }
    let v = bounds.volume();
    Ok(sets
        .iter()
        .zip(hits)
        .map(|(s, h)| {
            if s.radius().is_infinite() {
                f64::INFINITY
            } else {
                v * h as f64 / SELECTION_MC_POINTS as f64
            }
        })
        .collect())
}

/// HD-PCP: a fixed β, or β chosen from a grid on the calibration fold (or
/// the validation fold when configured), then PCP on the filtered samples.
pub fn hdpcp_calibrate(
    backbone: Arc<dyn Backbone>,
    dataset: &LabeledDataset,
    config: &PcpConfig,
) -> Result<CalibratedPredictor> {
    config.validate()?;
    if !backbone.has_density() {
        return Err(PcpError::Capability("HD-PCP needs a backbone with densities".into()));
    }
    let cal = dataset.fold(Fold::Cal);
    let beta = match &config.beta {
        BetaChoice::Fixed(b) => *b,
        BetaChoice::Grid(grid) => {
            let points = match config.beta_fold {
                BetaFold::Calibration => cal.clone(),
                BetaFold::Validation => dataset.fold(Fold::Val),
            };
            hdpcp_select_beta(backbone.as_ref(), &points, grid, config)?.beta
        }
    };
    let mut predictor = calibrate_points(backbone, &cal, config, beta)?;
    predictor.selected_beta = Some(beta);
    Ok(predictor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{JointGmmModel, PointMass};
    use crate::dataset::SplitFractions;
    use crate::geometry::measure_1d;
    use crate::types::NormKind;
    use nalgebra::DMatrix;

    fn with_densities(dens: &[f64]) -> SampleBatch {
        let samples = (0..dens.len()).map(|i| vec![i as f64]).collect();
        SampleBatch::new(samples, Some(dens.to_vec())).unwrap()
    }

    #[test]
    fn oversample_counts() {
        assert_eq!(oversample_count(4, 0.5), 8);
        assert_eq!(oversample_count(4, 0.0), 4);
        assert_eq!(oversample_count(40, 0.2), 50);
        assert_eq!(oversample_count(40, 0.1), 45);
        assert_eq!(oversample_count(40, 0.7), 134);
        assert_eq!(oversample_count(50, 0.6), 125);
    }

    #[test]
    fn filter_examples() {
        let b = with_densities(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = hdpcp_filter(b, 0.5, 4).unwrap();
        assert_eq!(out.densities().unwrap(), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(out.samples(), &[vec![4.0], vec![5.0], vec![6.0], vec![7.0]]);

        let b = with_densities(&[3.0, 1.0, 2.0, 5.0]);
        assert_eq!(hdpcp_filter(b.clone(), 0.0, 4).unwrap(), b);

        // Ties keep the lower index.
        let b = with_densities(&[1.0, 2.0, 2.0, 2.0]);
        let out = hdpcp_filter(b, 0.5, 2).unwrap();
        assert_eq!(out.samples(), &[vec![1.0], vec![2.0]]);

        let no_dens = SampleBatch::new(vec![vec![0.0]; 8], None).unwrap();
        assert!(matches!(hdpcp_filter(no_dens, 0.5, 4), Err(PcpError::Capability(_))));
        assert!(matches!(
            hdpcp_filter(with_densities(&[1.0; 7]), 0.5, 4),
            Err(PcpError::Precondition(_))
        ));
    }

    fn line_dataset(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = rng::stream(seed, Domain::Synth, 0);
        let pts = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                LabeledPoint::new(vec![x], vec![x + e]).unwrap()
            })
            .collect();
        LabeledDataset::new(pts).unwrap().split(&SplitFractions::default(), seed).unwrap()
    }

    fn gaussian_backbone() -> Arc<dyn Backbone> {
        // y | x ~ N(x, 1) via a joint Gaussian with Var(x) = 1, Cov = 1, Var(y) = 2.
        Arc::new(
            JointGmmModel::new(1, 1, vec![1.0], vec![vec![0.0, 0.0]], vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0])])
                .unwrap(),
        )
    }

    #[test]
    fn perfect_backbone_gives_zero_radius() {
        let ds = line_dataset(200, 1);
        let pts: Vec<LabeledPoint> = ds.points().iter().map(|p| LabeledPoint::new(p.x().to_vec(), vec![p.x()[0] * 3.0]).unwrap()).collect();
        let ds = LabeledDataset::new(pts).unwrap().split(&SplitFractions::default(), 1).unwrap();
        let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |x| vec![3.0 * x[0]]));
        let pred = pcp_calibrate(bb, &ds, &PcpConfig::new(0.1, 5).unwrap()).unwrap();
        assert_eq!(pred.radius(), Radius::Finite(0.0));
        let set = pred.predict_indexed(&[0.25], 0).unwrap();
        assert_eq!(set.centers().len(), 5);
        assert_eq!(measure_1d(&set).unwrap().as_f64(), 0.0);
    }

    #[test]
    fn calibration_is_deterministic() {
        let ds = line_dataset(300, 2);
        let cfg = PcpConfig::new(0.1, 20).unwrap().with_seed(5);
        let a = pcp_calibrate(gaussian_backbone(), &ds, &cfg).unwrap();
        let b = pcp_calibrate(gaussian_backbone(), &ds, &cfg).unwrap();
        assert_eq!(a.radius().as_f64().to_bits(), b.radius().as_f64().to_bits());
        assert_eq!(a.predict_indexed(&[0.1], 3).unwrap(), b.predict_indexed(&[0.1], 3).unwrap());
    }

    #[test]
    fn median_radius_for_alpha_half() {
        // Scores |c| for a shifted point mass are known: the quantile is the median.
        let pts: Vec<LabeledPoint> = (0..201)
            .map(|i| LabeledPoint::new(vec![0.0], vec![i as f64 / 200.0 * 2.0]).unwrap())
            .collect();
        let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |_| vec![0.0]));
        let cfg = PcpConfig::new(0.5, 1).unwrap().with_mode(QuantileMode::Plain);
        let pred = calibrate_points(bb, &pts, &cfg, 0.0).unwrap();
        assert!((pred.radius().as_f64() - 1.0).abs() < 0.011);
    }

    #[test]
    fn infinite_radius_covers_everything() {
        let pts: Vec<LabeledPoint> = (1..=9).map(|i| LabeledPoint::new(vec![0.0], vec![i as f64]).unwrap()).collect();
        let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |_| vec![0.0]));
        let cfg = PcpConfig::new(0.05, 3).unwrap().with_mode(QuantileMode::Inflated);
        let pred = calibrate_points(bb, &pts, &cfg, 0.0).unwrap();
        assert!(pred.radius().is_infinite());
        let set = pred.predict_indexed(&[0.0], 0).unwrap();
        assert!(geometry::contains(&set, &[-1e12]).unwrap());
    }

    #[test]
    fn hdpcp_at_beta_zero_matches_pcp() {
        let ds = line_dataset(300, 3);
        let cfg = PcpConfig::new(0.1, 15).unwrap().with_seed(8);
        let pcp = pcp_calibrate(gaussian_backbone(), &ds, &cfg).unwrap();
        let hd_cfg = cfg.clone().with_beta(BetaChoice::Grid(BetaGrid::new(vec![0.0]).unwrap()));
        let hd = hdpcp_calibrate(gaussian_backbone(), &ds, &hd_cfg).unwrap();
        assert_eq!(hd.selected_beta(), Some(0.0));
        assert_eq!(pcp.radius(), hd.radius());
        assert_eq!(pcp.predict_indexed(&[0.4], 2).unwrap(), hd.predict_indexed(&[0.4], 2).unwrap());
    }

    #[test]
    fn hdpcp_rejects_density_free_backbones() {
        let ds = line_dataset(100, 4);
        let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |x| vec![x[0]]));
        let cfg = PcpConfig::new(0.1, 5).unwrap().with_beta(BetaChoice::Fixed(0.2));
        assert!(matches!(hdpcp_calibrate(bb, &ds, &cfg), Err(PcpError::Capability(_))));
    }

    #[test]
    fn singleton_grid_and_reruns() {
        let ds = line_dataset(200, 5);
        let cal = ds.fold(Fold::Cal);
        let cfg = PcpConfig::new(0.1, 10).unwrap().with_seed(2);
        let bb = gaussian_backbone();
        let sel = hdpcp_select_beta(bb.as_ref(), &cal, &BetaGrid::new(vec![0.0]).unwrap(), &cfg).unwrap();
        assert_eq!(sel.beta, 0.0);
        let grid = BetaGrid::new(vec![0.0, 0.2, 0.5]).unwrap();
        let a = hdpcp_select_beta(bb.as_ref(), &cal, &grid, &cfg).unwrap();
        let b = hdpcp_select_beta(bb.as_ref(), &cal, &grid, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.totals.len(), 3);
    }

    #[test]
    fn selection_measures_in_two_dimensions_share_points() {
        let bb: Arc<dyn Backbone> = Arc::new(
            JointGmmModel::new(1, 2, vec![1.0], vec![vec![0.0; 3]], vec![DMatrix::identity(3, 3)]).unwrap(),
        );
        let pts: Vec<LabeledPoint> = (0..30)
            .map(|i| LabeledPoint::new(vec![i as f64 / 30.0], vec![(i % 5) as f64 * 0.3 - 0.6, 0.1 * (i % 3) as f64]).unwrap())
            .collect();
        let cfg = PcpConfig::new(0.2, 20).unwrap().with_norm(NormKind::L2);
        let sel = hdpcp_select_beta(bb.as_ref(), &pts, &BetaGrid::new(vec![0.0, 0.3]).unwrap(), &cfg).unwrap();
        assert!(sel.totals.iter().all(|t| t.is_finite() && *t > 0.0));
    }
}
