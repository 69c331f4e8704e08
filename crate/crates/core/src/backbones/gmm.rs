//! Joint Gaussian mixture over `(x, y)` fitted by EM, used as an explicit
//! conditional density through Gaussian conditioning.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mixture::{log_sum_exp, CovFactor, GaussianComponent, GaussianMixture};
use super::Backbone;
use crate::dataset::LabeledPoint;
use crate::error::{PcpError, Result};
use crate::rng::{self, Domain, StreamRng};
use crate::types::SampleBatch;

const JITTER_SCALE: f64 = 1e-6;
const JITTER_ATTEMPTS: usize = 4;
const MIN_COMPONENT_MASS: f64 = 1e-8;

/// Factorizes a covariance, adding `1e-6 * trace / dim` to the diagonal
/// (escalating tenfold per retry) when Cholesky fails.
fn factor_with_jitter(cov: &DMatrix<f64>) -> Option<CovFactor> {
    if let Some(f) = CovFactor::strict(cov) {
        return Some(f);
    }
    let dim = cov.nrows();
    let base = JITTER_SCALE * cov.trace() / dim as f64;
    if !(base > 0.0) || !base.is_finite() {
        return None;
    }
    let mut jitter = base;
    for _ in 0..JITTER_ATTEMPTS {
        let mut bumped = cov.clone();
        for i in 0..dim {
            bumped[(i, i)] += jitter;
        }
        if let Some(f) = CovFactor::strict(&bumped) {
            return Some(f);
        }
        jitter *= 10.0;
    }
    None
}

#[derive(Debug, Clone)]
struct Conditioning {
    x_mean: DVector<f64>,
    x_factor: CovFactor,
    y_mean: DVector<f64>,
    /// `Σ_yx Σ_xx^{-1}`, d × p.
    gain: DMatrix<f64>,
    y_factor: Arc<CovFactor>,
}

/// M-component Gaussian mixture on the joint `(x, y)` space.
#[derive(Debug, Clone)]
pub struct JointGmmModel {
    p: usize,
    d: usize,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    factors: Vec<CovFactor>,
    conditioning: Vec<Conditioning>,
    em_trace: Vec<f64>,
}

impl JointGmmModel {
    /// Builds a model from explicit parameters. Covariances that fail
    /// Cholesky receive diagonal jitter; a covariance that still fails is an
    /// error.
    pub fn new(
        p: usize,
        d: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(PcpError::precondition("p and d must be >= 1"));
        }
        if weights.is_empty() || weights.len() != means.len() || means.len() != covs.len() {
            return Err(PcpError::precondition("need matching weights, means and covariances"));
        }
        let means = means
            .into_iter()
            .map(|m| {
                PcpError::check_dim(p + d, m.len())?;
                Ok(DVector::from_vec(m))
            })
            .collect::<Result<Vec<_>>>()?;
        let factors = covs
            .iter()
            .map(|c| {
                if c.nrows() != p + d || c.ncols() != p + d {
                    return Err(PcpError::Dimension { expected: p + d, got: c.nrows() });
                }
                CovFactor::new(c.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(p, d, weights, means, factors, Vec::new())
    }

    fn from_parts(
        p: usize,
        d: usize,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        factors: Vec<CovFactor>,
        em_trace: Vec<f64>,
    ) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(PcpError::precondition("mixture weights must be >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PcpError::precondition(format!("mixture weights sum to {total}, not 1")));
        }
        let conditioning = means
            .iter()
            .zip(&factors)
            .map(|(mean, f)| condition_component(p, d, mean, f.cov()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            p,
            d,
            weights,
            means,
            factors,
            conditioning,
            em_trace,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, m: usize) -> &[f64] {
        self.means[m].as_slice()
    }

    pub fn covariance(&self, m: usize) -> &DMatrix<f64> {
        self.factors[m].cov()
    }

    /// Total log-likelihood after each EM iteration (empty for hand-built models).
    pub fn em_trace(&self) -> &[f64] {
        &self.em_trace
    }

    /// Mean joint log-density of the given points.
    pub fn mean_log_likelihood(&self, points: &[LabeledPoint]) -> f64 {
        let total: f64 = points
            .iter()
            .map(|pt| self.joint_log_density(&joint_vector(pt)))
            .sum();
        total / points.len().max(1) as f64
    }

    fn joint_log_density(&self, z: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.factors))
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, (mu, f))| w.ln() + f.log_pdf_at(z.as_slice(), mu.as_slice()))
            .collect();
        log_sum_exp(&logs)
    }

    /// Conditional law `p(y | x)`: weights `∝ π_m N(x; μ_x, Σ_xx)`, means
    /// `μ_y + Σ_yx Σ_xx^{-1} (x - μ_x)`, covariances `Σ_yy - Σ_yx Σ_xx^{-1} Σ_xy`.
    pub fn conditional(&self, x: &[f64]) -> Result<GaussianMixture> {
        PcpError::check_dim(self.p, x.len())?;
        let x = DVector::from_column_slice(x);
        let log_w: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.conditioning)
            .map(|(w, c)| {
                if *w > 0.0 {
                    w.ln() + c.x_factor.log_pdf_at(x.as_slice(), c.x_mean.as_slice())
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let norm = log_sum_exp(&log_w);
        let m = self.weights.len();
        let weights: Vec<f64> = if norm.is_finite() {
            let mut w: Vec<f64> = log_w.iter().map(|lw| (lw - norm).exp()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            w
        } else {
            vec![1.0 / m as f64; m]
        };
        let components = self
            .conditioning
            .iter()
            .map(|c| GaussianComponent {
                mean: &c.y_mean + &c.gain * (&x - &c.x_mean),
                factor: Arc::clone(&c.y_factor),
            })
            .collect();
        GaussianMixture::new(weights, components)
    }
}

fn condition_component(p: usize, d: usize, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Conditioning> {
    let sxx = cov.view((0, 0), (p, p)).into_owned();
    let sxy = cov.view((0, p), (p, d)).into_owned();
    let syy = cov.view((p, p), (d, d)).into_owned();
    let x_factor = CovFactor::new(sxx)?;
    // Σ_xx^{-1} Σ_xy, transposed.
    let gain = x_factor.solve(&sxy).transpose();
    let y_cov = &syy - &gain * &sxy;
    Ok(Conditioning {
        x_mean: mean.rows(0, p).into_owned(),
        x_factor,
        y_mean: mean.rows(p, d).into_owned(),
        gain,
        y_factor: Arc::new(CovFactor::new(y_cov)?),
    })
}

fn joint_vector(pt: &LabeledPoint) -> DVector<f64> {
    DVector::from_iterator(pt.x().len() + pt.y().len(), pt.x().iter().chain(pt.y()).copied())
}

impl Backbone for JointGmmModel {
    fn dims(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    fn has_density(&self) -> bool {
        true
    }

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        let cond = self.conditional(x)?;
        let samples = cond.sample(k, rng);
        let densities = samples.iter().map(|y| cond.log_density(y).exp()).collect();
        SampleBatch::new(samples, Some(densities))
    }

    fn density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.conditional(x)?.density(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the mean per-point log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Fits a joint mixture with `components` components by EM. A component
/// that degenerates triggers a refit with one fewer component; failure
/// with a single component is an error.
pub fn fit_gmm(train: &[LabeledPoint], components: usize, opts: &EmOptions) -> Result<JointGmmModel> {
    if components == 0 {
        return Err(PcpError::config("component count must be >= 1"));
    }
    if train.len() < components {
        return Err(PcpError::precondition(format!(
            "{} training points cannot support {components} components",
            train.len()
        )));
    }
    let (p, d) = (train[0].x().len(), train[0].y().len());
    let data: Vec<DVector<f64>> = train.iter().map(joint_vector).collect();
    let mut m = components;
    loop {
        match run_em(&data, p, d, m, opts) {
            Ok(model) => return Ok(model),
            Err(PcpError::Degenerate(msg)) if m == 1 => {
                return Err(PcpError::Degenerate(format!("single-component fit failed: {msg}")))
            }
            Err(PcpError::Degenerate(_)) => m -= 1,
            Err(e) => return Err(e),
        }
    }
}

fn kmeanspp_seeds(data: &[DVector<f64>], m: usize, rng: &mut StreamRng) -> Vec<usize> {
    let n = data.len();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = data.iter().map(|z| (z - &data[seeds[0]]).norm_squared()).collect();
    while seeds.len() < m {
        let next = match WeightedIndex::new(&best) {
            Ok(pick) => pick.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        seeds.push(next);
        for (b, z) in best.iter_mut().zip(data) {
            *b = b.min((z - &data[next]).norm_squared());
        }
    }
    seeds
}

fn run_em(data: &[DVector<f64>], p: usize, d: usize, m: usize, opts: &EmOptions) -> Result<JointGmmModel> {
    let n = data.len();
    let dim = p + d;
    let mut rng = rng::stream(opts.seed, Domain::Fit, m as u64);

    // Hard assignment to k-means++ seeds as initial responsibilities.
    let seeds = kmeanspp_seeds(data, m, &mut rng);
    let mut resp = vec![0.0; n * m];
    for (i, z) in data.iter().enumerate() {
        let nearest = seeds
            .iter()
            .enumerate()
            .map(|(j, &s)| (j, (z - &data[s]).norm_squared()))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
            .0;
        resp[i * m + nearest] = 1.0;
    }

    let mut trace = Vec::new();
    let mut weights = vec![0.0; m];
    let mut means = vec![DVector::zeros(dim); m];
    let mut factors: Vec<CovFactor> = Vec::with_capacity(m);
    let mut logp = vec![0.0; m];

    for iter in 0..opts.max_iter.max(1) {
        // M-step.
        factors.clear();
        for j in 0..m {
            let mass: f64 = (0..n).map(|i| resp[i * m + j]).sum();
            if mass < MIN_COMPONENT_MASS {
                return Err(PcpError::Degenerate(format!("component {j} lost all mass")));
            }
            let mut mu = DVector::zeros(dim);
            for (i, z) in data.iter().enumerate() {
                mu.axpy(resp[i * m + j], z, 1.0);
            }
            mu /= mass;
            let mut cov = DMatrix::zeros(dim, dim);
            for (i, z) in data.iter().enumerate() {
                let r = resp[i * m + j];
                if r > 0.0 {
                    let diff = z - &mu;
                    cov.ger(r, &diff, &diff, 1.0);
                }
            }
            cov /= mass;
            let f = factor_with_jitter(&cov).ok_or_else(|| {
                PcpError::Degenerate(format!("covariance of component {j} is not positive-definite"))
            })?;
            weights[j] = mass / n as f64;
            means[j] = mu;
            factors.push(f);
        }

        // E-step.
        let mut ll = 0.0;
        for (i, z) in data.iter().enumerate() {
            for j in 0..m {
                logp[j] = weights[j].ln() + factors[j].log_pdf_at(z.as_slice(), means[j].as_slice());
            }
            let norm = log_sum_exp(&logp);
            if !norm.is_finite() {
                return Err(PcpError::Degenerate("point has zero likelihood under every component".into()));
            }
            ll += norm;
            for j in 0..m {
                resp[i * m + j] = (logp[j] - norm).exp();
            }
        }
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if iter > 0 && (ll - prev) / (n as f64) < opts.tol {
                break;
            }
        }
    }

    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    JointGmmModel::from_parts(p, d, weights, means, factors, trace)
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: Vec<f64>,
    y_scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(points: &[LabeledPoint]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| PcpError::precondition("cannot standardize an empty fold"))?;
        let (p, d) = (first.x().len(), first.y().len());
        let col = |j: usize| -> (f64, f64) {
            let vals = points.iter().map(|pt| if j < p { pt.x()[j] } else { pt.y()[j - p] });
            let n = points.len() as f64;
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        };
        let (x_mean, x_scale) = (0..p).map(col).unzip();
        let (y_mean, y_scale) = (p..p + d).map(col).unzip();
        Ok(Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        })
    }

    pub fn x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.y_mean.iter().zip(&self.y_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn y_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.y_mean.iter().zip(&self.y_scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Jacobian of the y-map: density in original units = standardized density × this.
    pub fn y_jacobian(&self) -> f64 {
        self.y_scale.iter().map(|s| 1.0 / s).product()
    }

    pub fn point(&self, pt: &LabeledPoint) -> LabeledPoint {
        LabeledPoint::new(self.x(pt.x()), self.y(pt.y())).expect("affine map keeps entries finite")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmOptions {
    /// Candidate component counts, chosen by validation log-likelihood.
    pub components: Vec<usize>,
    pub em: EmOptions,
    pub standardize: bool,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            components: vec![1, 2, 4, 8],
            em: EmOptions::default(),
            standardize: true,
        }
    }
}

/// Joint GMM behind an optional standardization of x and y.
#[derive(Debug, Clone)]
pub struct GmmBackbone {
    model: JointGmmModel,
    scaler: Option<Standardizer>,
}

impl GmmBackbone {
    /// Fits one model per candidate component count on `train` and keeps
    /// the one with the highest mean log-likelihood on `val` (ties go to
    /// fewer components). Without validation points, BIC on `train` decides.
    pub fn fit(train: &[LabeledPoint], val: &[LabeledPoint], opts: &GmmOptions) -> Result<Self> {
        if train.is_empty() {
            return Err(PcpError::precondition("training fold is empty"));
        }
        if opts.components.is_empty() {
            return Err(PcpError::config("component grid is empty"));
        }
        let scaler = if opts.standardize {
            Some(Standardizer::fit(train)?)
        } else {
            None
        };
        let map = |pts: &[LabeledPoint]| -> Vec<LabeledPoint> {
            match &scaler {
                Some(s) => pts.iter().map(|pt| s.point(pt)).collect(),
                None => pts.to_vec(),
            }
        };
        let train_s = map(train);
        let val_s = map(val);
        let dim = (train[0].x().len() + train[0].y().len()) as f64;

        let mut best: Option<(f64, JointGmmModel)> = None;
        let mut last_err = None;
        let mut grid = opts.components.clone();
        grid.sort_unstable();
        grid.dedup();
        for m in grid.into_iter().filter(|&m| m >= 1 && m <= train_s.len()) {
            let model = match fit_gmm(&train_s, m, &opts.em) {
                Ok(model) => model,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
            let score = if val_s.is_empty() {
                let k = model.n_components() as f64;
                let params = k * (dim + dim * (dim + 1.0) / 2.0) + k - 1.0;
                let n = train_s.len() as f64;
                n * model.mean_log_likelihood(&train_s) - 0.5 * params * n.ln()
            } else {
                model.mean_log_likelihood(&val_s)
            };
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, model));
            }
        }
        match best {
            Some((_, model)) => Ok(Self { model, scaler }),
            None => Err(last_err.unwrap_or_else(|| {
                PcpError::precondition("no candidate component count fits the training fold")
            })),
        }
    }

    pub fn from_model(model: JointGmmModel, scaler: Option<Standardizer>) -> Self {
        Self { model, scaler }
    }

    pub fn model(&self) -> &JointGmmModel {
        &self.model
    }
}

impl Backbone for GmmBackbone {
    fn dims(&self) -> (usize, usize) {
        self.model.dims()
    }

    fn has_density(&self) -> bool {
        true
    }

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        let Some(s) = &self.scaler else {
            return self.model.sample(x, k, rng);
        };
        PcpError::check_dim(self.model.p, x.len())?;
        let cond = self.model.conditional(&s.x(x))?;
        let jac = s.y_jacobian();
        let (samples, densities) = cond
            .sample(k, rng)
            .into_iter()
            .map(|z| {
                let q = cond.log_density(&z).exp() * jac;
                (s.y_inverse(&z), q)
            })
            .unzip();
        SampleBatch::new(samples, Some(densities))
    }

    fn density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match &self.scaler {
            Some(s) => {
                PcpError::check_dim(self.model.p, x.len())?;
                PcpError::check_dim(self.model.d, y.len())?;
                Ok(self.model.conditional(&s.x(x))?.density(&s.y(y))? * s.y_jacobian())
            }
            None => self.model.density(x, y),
        }
    }
}
