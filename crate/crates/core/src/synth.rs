//! Synthetic data: classic 2-D toys (first coordinate is the covariate,
//! second the target), a two-mode 1-D regression and the bimodal
//! multi-target regression.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbones::{GaussianMixture, MixtureBackbone};
use crate::dataset::{LabeledDataset, LabeledPoint};
use crate::error::{PcpError, Result};
use crate::rng::{self, Domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SCurve,
    HalfMoons,
    Gaussians25,
    Gaussians8,
    Circle,
    SwissRoll,
    BimodalMultitarget,
    TwoModes,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::SCurve,
        Family::HalfMoons,
        Family::Gaussians25,
        Family::Gaussians8,
        Family::Circle,
        Family::SwissRoll,
        Family::BimodalMultitarget,
        Family::TwoModes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::SCurve => "s_curve",
            Family::HalfMoons => "half_moons",
            Family::Gaussians25 => "gaussians_25",
            Family::Gaussians8 => "gaussians_8",
            Family::Circle => "circle",
            Family::SwissRoll => "swiss_roll",
            Family::BimodalMultitarget => "bimodal_multitarget",
            Family::TwoModes => "two_modes",
        }
    }

    /// `(p, d)` of the generated points.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Family::BimodalMultitarget => (MULTITARGET_P, 2),
            _ => (1, 1),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = PcpError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| PcpError::config(format!("unknown synthetic family {s:?}")))
    }
}

pub const MULTITARGET_P: usize = 5;
pub const MULTITARGET_VARIANCE: f64 = 10.0;
pub const TWO_MODES_GAP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: Family,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Off-diagonal covariance of the multi-target components.
    #[serde(default)]
    pub rho: f64,
    /// Seed of the multi-target regression coefficients.
    #[serde(default)]
    pub coef_seed: u64,
    /// Gaussian noise level of the 2-D toys; component std of `two_modes`.
    #[serde(default)]
    pub noise: Option<f64>,
}

impl SynthSpec {
    pub fn new(name: Family, n: usize, seed: u64) -> Self {
        Self { name, n, seed, rho: 0.0, coef_seed: 0, noise: None }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_coef_seed(mut self, coef_seed: u64) -> Self {
        self.coef_seed = coef_seed;
        self
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or(match self.name {
            Family::TwoModes => 0.5,
            _ => 0.1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(PcpError::config("synthetic n must be >= 1"));
        }
        if !(self.rho.abs() < MULTITARGET_VARIANCE) {
            return Err(PcpError::config(format!("rho must satisfy |rho| < 10, got {}", self.rho)));
        }
        let s = self.noise();
        if !(s >= 0.0 && s.is_finite()) {
            return Err(PcpError::config(format!("noise must be finite and >= 0, got {s}")));
        }
        Ok(())
    }
}

/// Component means of the multi-target design: `B_i^T (x, 1)` with
/// `B_i` a 6 × 2 standard normal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub b: [DMatrix<f64>; 2],
}

impl Coefficients {
    pub fn draw(coef_seed: u64) -> Self {
        let mut rng = rng::stream(coef_seed, Domain::Coefficients, 0);
        let mut m = || DMatrix::from_fn(MULTITARGET_P + 1, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self { b: [m(), m()] }
    }

    pub fn mode_mean(&self, mode: usize, x: &[f64]) -> Vec<f64> {
        let b = &self.b[mode];
        (0..2)
            .map(|j| (0..MULTITARGET_P).map(|i| b[(i, j)] * x[i]).sum::<f64>() + b[(MULTITARGET_P, j)])
            .collect()
    }
}

fn multitarget_cov(rho: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[MULTITARGET_VARIANCE, rho, rho, MULTITARGET_VARIANCE])
}

fn grid25() -> Vec<[f64; 2]> {
    let v = [-4.0, -2.0, 0.0, 2.0, 4.0];
    v.iter().flat_map(|a| v.iter().map(move |b| [*a, *b])).collect()
}

fn octagon() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let t = k as f64 * PI / 4.0;
            [2.0 * t.cos(), 2.0 * t.sin()]
        })
        .collect()
}

/// Generates the dataset together with the latent component of each point
/// (0 for families without one).
pub fn generate_labeled(spec: &SynthSpec) -> Result<(LabeledDataset, Vec<usize>)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Domain::Synth, 0);
    let s = spec.noise();
    let mut labels = Vec::with_capacity(spec.n);
    let mut points = Vec::with_capacity(spec.n);
    let noisy = |rng: &mut StreamRng, a: f64, b: f64| -> (f64, f64) {
        let ea: f64 = rng.sample(StandardNormal);
        let eb: f64 = rng.sample(StandardNormal);
        (a + s * ea, b + s * eb)
    };
    let coefs = (spec.name == Family::BimodalMultitarget).then(|| Coefficients::draw(spec.coef_seed));
    // Cholesky factor of [[v, ρ], [ρ, v]].
    let l11 = MULTITARGET_VARIANCE.sqrt();
    let l21 = spec.rho / l11;
    let l22 = (MULTITARGET_VARIANCE - l21 * l21).sqrt();

    for _ in 0..spec.n {
        let (x, y, label): (Vec<f64>, Vec<f64>, usize) = match spec.name {
            Family::SCurve => {
                let t = 3.0 * PI * (rng.random::<f64>() - 0.5);
                let (a, b) = noisy(&mut rng, t.sin(), t.signum() * (t.cos() - 1.0));
                (vec![a], vec![b], 0)
            }
            Family::HalfMoons => {
                let t = PI * rng.random::<f64>();
                let upper = rng.random::<bool>();
                let (a, b) = if upper { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                let (a, b) = noisy(&mut rng, a, b);
                (vec![a], vec![b], usize::from(!upper))
            }
            Family::Gaussians25 | Family::Gaussians8 => {
                let centers = if spec.name == Family::Gaussians25 { grid25() } else { octagon() };
                let c = rng.random_range(0..centers.len());
                let (a, b) = noisy(&mut rng, centers[c][0], centers[c][1]);
                (vec![a], vec![b], c)
            }
            Family::Circle => {
                let t = 2.0 * PI * rng.random::<f64>();
                let (a, b) = noisy(&mut rng, t.cos(), t.sin());
                (vec![a], vec![b], 0)
            }
            Family::SwissRoll => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let (a, b) = noisy(&mut rng, t * t.cos(), t * t.sin());
                (vec![a], vec![b], 0)
            }
            Family::TwoModes => {
                let x: f64 = rng.random_range(-1.0..1.0);
                let mode = rng.random_range(0..2usize);
                let e: f64 = rng.sample(StandardNormal);
                let y = x + (mode as f64 - 0.5) * TWO_MODES_GAP + s * e;
                (vec![x], vec![y], mode)
            }
            Family::BimodalMultitarget => {
                let coefs = coefs.as_ref().expect("coefficients drawn above");
                let x: Vec<f64> = (0..MULTITARGET_P).map(|_| rng.sample(StandardNormal)).collect();
                let mode = rng.random_range(0..2usize);
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let m = coefs.mode_mean(mode, &x);
                (x, vec![m[0] + l11 * a, m[1] + l21 * a + l22 * b], mode)
            }
        };
        points.push(LabeledPoint::new(x, y)?);
        labels.push(label);
    }
    Ok((LabeledDataset::new(points)?, labels))
}

pub fn generate(spec: &SynthSpec) -> Result<LabeledDataset> {
    Ok(generate_labeled(spec)?.0)
}

/// Exact law of `Y | X = x` for families with a Gaussian-mixture conditional.
pub fn conditional_truth(spec: &SynthSpec, x: &[f64]) -> Result<GaussianMixture> {
    spec.validate()?;
    let (p, _) = spec.name.dims();
    PcpError::check_dim(p, x.len())?;
    let s = spec.noise();
    match spec.name {
        Family::BimodalMultitarget => {
            let coefs = Coefficients::draw(spec.coef_seed);
            let cov = multitarget_cov(spec.rho);
            GaussianMixture::from_params(
                vec![0.5, 0.5],
                vec![coefs.mode_mean(0, x), coefs.mode_mean(1, x)],
                vec![cov.clone(), cov],
            )
        }
        Family::TwoModes => {
            let cov = DMatrix::from_element(1, 1, s * s);
            let half = TWO_MODES_GAP / 2.0;
            GaussianMixture::from_params(vec![0.5, 0.5], vec![vec![x[0] - half], vec![x[0] + half]], vec![cov.clone(), cov])
        }
        Family::Gaussians25 | Family::Gaussians8 => {
            if s <= 0.0 {
                return Err(PcpError::Capability("cluster families need noise > 0 for a conditional law".into()));
            }
            let centers = if spec.name == Family::Gaussians25 { grid25() } else { octagon() };
            // Equal prior weights; the covariate likelihood reweights each cluster.
            let log_w: Vec<f64> = centers.iter().map(|c| -0.5 * ((x[0] - c[0]) / s).powi(2)).collect();
            let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let cov = DMatrix::from_element(1, 1, s * s);
            GaussianMixture::from_params(weights, centers.iter().map(|c| vec![c[1]]).collect(), vec![cov; centers.len()])
        }
        other => Err(PcpError::Capability(format!("no closed-form conditional law for {other}"))),
    }
}

/// Backbone that samples the exact conditional law.
pub fn truth_backbone(spec: &SynthSpec) -> Result<MixtureBackbone> {
    let (p, d) = spec.name.dims();
    // Probe once so unsupported families fail here rather than at sampling.
    conditional_truth(spec, &vec![0.0; p])?;
    let spec = spec.clone();
    Ok(MixtureBackbone::new(p, d, move |x| conditional_truth(&spec, x)))
}
