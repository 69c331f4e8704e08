//! Density-free backbone: resample targets of the nearest training
//! covariates and add Gaussian jitter.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::dataset::LabeledPoint;
use crate::error::{PcpError, Result};
use crate::rng::StreamRng;
use crate::types::SampleBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnOptions {
    pub neighbors: usize,
    /// Jitter standard deviation, one value per target dimension or a
    /// single value broadcast to all.
    pub bandwidth: Vec<f64>,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            neighbors: 20,
            bandwidth: vec![0.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct KnnResampler {
    train: Vec<LabeledPoint>,
    neighbors: usize,
    bandwidth: Vec<f64>,
    p: usize,
    d: usize,
}

impl KnnResampler {
    pub fn new(train: Vec<LabeledPoint>, opts: &KnnOptions) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| PcpError::precondition("kNN resampler needs training points"))?;
        let (p, d) = (first.x().len(), first.y().len());
        if opts.neighbors == 0 || opts.neighbors > train.len() {
            return Err(PcpError::config(format!(
                "neighbors must lie in 1..={}, got {}",
                train.len(),
                opts.neighbors
            )));
        }
        let bandwidth = match opts.bandwidth.len() {
            1 => vec![opts.bandwidth[0]; d],
            n if n == d => opts.bandwidth.clone(),
            n => return Err(PcpError::Dimension { expected: d, got: n }),
        };
        if bandwidth.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return Err(PcpError::config("bandwidth must be finite and >= 0"));
        }
        Ok(Self {
            train,
            neighbors: opts.neighbors,
            bandwidth,
            p,
            d,
        })
    }

    /// Indices of the `neighbors` nearest training covariates (Euclidean),
    /// ties broken by index.
    pub fn neighbors_of(&self, x: &[f64]) -> Vec<usize> {
        let mut dist: Vec<(f64, usize)> = self
            .train
            .iter()
            .enumerate()
            .map(|(i, pt)| {
                let d2: f64 = pt.x().iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                (d2, i)
            })
            .collect();
        let k = self.neighbors;
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist.truncate(k);
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist.into_iter().map(|(_, i)| i).collect()
    }
}

impl Backbone for KnnResampler {
    fn dims(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    fn has_density(&self) -> bool {
        false
    }

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        PcpError::check_dim(self.p, x.len())?;
        let nbrs = self.neighbors_of(x);
        let samples = (0..k)
            .map(|_| {
                let src = self.train[nbrs[rng.random_range(0..nbrs.len())]].y();
                src.iter()
                    .zip(&self.bandwidth)
                    .map(|(y, h)| {
                        if *h > 0.0 {
                            y + h * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            *y
                        }
                    })
                    .collect()
            })
            .collect();
        SampleBatch::new(samples, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn line(n: usize) -> Vec<LabeledPoint> {
        (0..n)
            .map(|i| LabeledPoint::new(vec![i as f64], vec![10.0 * i as f64]).unwrap())
            .collect()
    }

    #[test]
    fn samples_come_from_nearest_targets() {
        let knn = KnnResampler::new(line(50), &KnnOptions { neighbors: 3, bandwidth: vec![0.0] }).unwrap();
        assert_eq!(knn.neighbors_of(&[20.2]), vec![20, 21, 19]);
        let batch = knn.sample(&[20.2], 100, &mut stream(0, Domain::Test, 0)).unwrap();
        assert_eq!(batch.len(), 100);
        assert!(batch.densities().is_none());
        for s in batch.samples() {
            assert!([190.0, 200.0, 210.0].contains(&s[0]));
        }
        assert!(!knn.has_density());
        assert!(matches!(knn.density(&[0.0], &[0.0]), Err(PcpError::Capability(_))));
    }

    #[test]
    fn rejects_bad_options() {
        assert!(KnnResampler::new(line(5), &KnnOptions { neighbors: 0, bandwidth: vec![0.0] }).is_err());
        assert!(KnnResampler::new(line(5), &KnnOptions { neighbors: 6, bandwidth: vec![0.0] }).is_err());
        assert!(KnnResampler::new(line(5), &KnnOptions { neighbors: 2, bandwidth: vec![f64::NAN] }).is_err());
        assert!(KnnResampler::new(line(5), &KnnOptions { neighbors: 2, bandwidth: vec![1.0, 1.0] }).is_err());
    }
}
