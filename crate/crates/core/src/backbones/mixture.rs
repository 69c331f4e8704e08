//! Finite Gaussian mixtures: sampling, density and per-coordinate cdf.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erfc;

use super::Backbone;
use crate::error::{PcpError, Result};
use crate::rng::StreamRng;
use crate::types::SampleBatch;

/// Eigenvalue floor used when a covariance is numerically singular.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Cholesky factor of a covariance matrix plus its log-determinant.
#[derive(Debug, Clone)]
pub struct CovFactor {
    cov: DMatrix<f64>,
    lower: DMatrix<f64>,
    log_det: f64,
}

impl CovFactor {
    /// Factorizes `cov`, flooring eigenvalues at [`VARIANCE_FLOOR`] when the
    /// plain Cholesky factorization fails.
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() == 0 {
            return Err(PcpError::precondition("covariance must be a non-empty square matrix"));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(PcpError::Degenerate("non-finite covariance entry".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        if let Some(ch) = sym.clone().cholesky() {
            return Ok(Self::from_lower(sym, ch.l()));
        }
        let eig = SymmetricEigen::new(sym);
        let vals = eig.eigenvalues.map(|v| v.max(VARIANCE_FLOOR));
        let rebuilt =
            &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
        let ch = rebuilt
            .clone()
            .cholesky()
            .ok_or_else(|| PcpError::Degenerate("covariance could not be factorized".into()))?;
        Ok(Self::from_lower(rebuilt, ch.l()))
    }

    /// Strict factorization: fails instead of flooring.
    pub(crate) fn strict(cov: &DMatrix<f64>) -> Option<Self> {
        let sym = (cov + cov.transpose()) * 0.5;
        let ch = sym.clone().cholesky()?;
        let f = Self::from_lower(sym, ch.l());
        f.log_det.is_finite().then_some(f)
    }

    fn from_lower(cov: DMatrix<f64>, lower: DMatrix<f64>) -> Self {
        let log_det = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Self { cov, lower, log_det }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Gaussian log-density of a deviation `y - mean`.
    pub fn log_pdf_centered(&self, centered: &DVector<f64>) -> f64 {
        self.log_pdf_at(centered.as_slice(), &vec![0.0; centered.len()])
    }

    /// Gaussian log-density of `y` around `mean`, by forward substitution.
    pub fn log_pdf_at(&self, y: &[f64], mean: &[f64]) -> f64 {
        let d = self.dim();
        let mut sol = [0.0f64; 8];
        let mut heap;
        let sol: &mut [f64] = if d <= sol.len() {
            &mut sol[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut sq = 0.0;
        for i in 0..d {
            let mut acc = y[i] - mean[i];
            for j in 0..i {
                acc -= self.lower[(i, j)] * sol[j];
            }
            sol[i] = acc / self.lower[(i, i)];
            sq += sol[i] * sol[i];
        }
        -0.5 * (d as f64 * (2.0 * PI).ln() + self.log_det + sq)
    }

    /// Solves `Σ v = b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let half = self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.lower
            .transpose()
            .solve_upper_triangular(&half)
            .expect("Cholesky factor has a positive diagonal")
    }
}

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub factor: Arc<CovFactor>,
}

/// A Gaussian mixture over target space, e.g. a conditional law `p(y | x)`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(PcpError::precondition("mixture needs one weight per component"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(PcpError::precondition("mixture weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PcpError::precondition(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].mean.len();
        for c in &components {
            PcpError::check_dim(d, c.mean.len())?;
            PcpError::check_dim(d, c.factor.dim())?;
        }
        Ok(Self { weights, components })
    }

    /// Builds a mixture from dense parameters.
    pub fn from_params(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.len() != covs.len() {
            return Err(PcpError::precondition("mixture needs one covariance per mean"));
        }
        let components = means
            .into_iter()
            .zip(covs)
            .map(|(m, c)| {
                Ok(GaussianComponent {
                    mean: DVector::from_vec(m),
                    factor: Arc::new(CovFactor::new(c)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, components)
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            acc += &c.mean * *w;
        }
        acc.iter().copied().collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, pick: &WeightedIndex<f64>, rng: &mut R) -> Vec<f64> {
        let comp = &self.components[pick.sample(rng)];
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let l = comp.factor.lower();
        (0..d)
            .map(|i| comp.mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let pick = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        (0..k).map(|_| self.sample_one(&pick, rng)).collect()
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        // Online log-sum-exp.
        let (mut top, mut sum) = (f64::NEG_INFINITY, 0.0);
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w <= 0.0 {
                continue;
            }
            let l = w.ln() + c.factor.log_pdf_at(y, c.mean.as_slice());
            if l > top {
                sum = sum * (top - l).exp() + 1.0;
                top = l;
            } else {
                sum += (l - top).exp();
            }
        }
        if top == f64::NEG_INFINITY {
            top
        } else {
            top + sum.ln()
        }
    }

    pub fn density(&self, y: &[f64]) -> Result<f64> {
        PcpError::check_dim(self.dim(), y.len())?;
        Ok(self.log_density(y).exp())
    }

    /// Marginal cdf of coordinate `coord` at `t`.
    pub fn marginal_cdf(&self, coord: usize, t: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| {
                let sd = c.factor.cov()[(coord, coord)].sqrt();
                w * normal_cdf((t - c.mean[coord]) / sd)
            })
            .sum()
    }
}

type LawFn = dyn Fn(&[f64]) -> Result<GaussianMixture> + Send + Sync;

/// Explicit backbone whose conditional law is a Gaussian mixture computed
/// from the covariate by a closure.
pub struct MixtureBackbone {
    p: usize,
    d: usize,
    law: Box<LawFn>,
}

impl MixtureBackbone {
    pub fn new(
        p: usize,
        d: usize,
        law: impl Fn(&[f64]) -> Result<GaussianMixture> + Send + Sync + 'static,
    ) -> Self {
        Self { p, d, law: Box::new(law) }
    }

    pub fn law(&self, x: &[f64]) -> Result<GaussianMixture> {
        PcpError::check_dim(self.p, x.len())?;
        let law = (self.law)(x)?;
        PcpError::check_dim(self.d, law.dim())?;
        Ok(law)
    }
}

impl std::fmt::Debug for MixtureBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MixtureBackbone").field("p", &self.p).field("d", &self.d).finish()
    }
}

impl Backbone for MixtureBackbone {
    fn dims(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    fn has_density(&self) -> bool {
        true
    }

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        let law = self.law(x)?;
        let samples = law.sample(k, rng);
        let densities = samples.iter().map(|y| law.log_density(y).exp()).collect();
        SampleBatch::new(samples, Some(densities))
    }

    fn density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.law(x)?.density(y)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
