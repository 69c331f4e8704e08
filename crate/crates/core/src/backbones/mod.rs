//! Conditional generative samplers `q(y | x)`.

pub mod bridge;
pub mod gmm;
pub mod knn;
pub mod mixture;

use crate::error::{PcpError, Result};
use crate::rng::StreamRng;
use crate::types::SampleBatch;

pub use bridge::{serve, BridgeBackbone};
pub use gmm::{fit_gmm, EmOptions, GmmBackbone, GmmOptions, JointGmmModel, Standardizer};
pub use knn::{KnnOptions, KnnResampler};
pub use mixture::{GaussianMixture, MixtureBackbone};

/// A conditional sampler. Implementations return exactly `k` samples per
/// call and attach densities iff [`Backbone::has_density`] is true.
pub trait Backbone: Send + Sync {
    /// `(p, d)`: covariate and target dimensions.
    fn dims(&self) -> (usize, usize);

    fn has_density(&self) -> bool;

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch>;

    fn density(&self, _x: &[f64], _y: &[f64]) -> Result<f64> {
        Err(PcpError::Capability("backbone does not evaluate densities".into()))
    }
}

impl<B: Backbone + ?Sized> Backbone for std::sync::Arc<B> {
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }

    fn has_density(&self) -> bool {
        (**self).has_density()
    }

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        (**self).sample(x, k, rng)
    }

    fn density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        (**self).density(x, y)
    }
}

type TargetFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Deterministic backbone returning `k` copies of `f(x)`.
pub struct PointMass {
    p: usize,
    d: usize,
    f: Box<TargetFn>,
}

impl PointMass {
    pub fn new(p: usize, d: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { p, d, f: Box::new(f) }
    }
}

impl std::fmt::Debug for PointMass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PointMass").field("p", &self.p).field("d", &self.d).finish()
    }
}

impl Backbone for PointMass {
    fn dims(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    fn has_density(&self) -> bool {
        false
    }

    fn sample(&self, x: &[f64], k: usize, _rng: &mut StreamRng) -> Result<SampleBatch> {
        PcpError::check_dim(self.p, x.len())?;
        if k == 0 {
            return Err(PcpError::precondition("k must be >= 1"));
        }
        let y = (self.f)(x);
        PcpError::check_dim(self.d, y.len())?;
        SampleBatch::new(vec![y; k], None)
    }
}
