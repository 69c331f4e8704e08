//! Conformal prediction with sample-based, union-of-balls predictive sets.
//!
//! A generative backbone draws K samples of `y | x`; the calibrated set is
//! the union of balls of a common radius around those samples. HD-PCP first
//! keeps only the highest-density samples.
//!
//! ```
//! # fn main() -> pcp_core::Result<()> {
//! use std::sync::Arc;
//! use pcp_core::backbones::{GmmBackbone, GmmOptions};
//! use pcp_core::synth::{generate, Family, SynthSpec};
//! use pcp_core::{pcp_calibrate, Fold, PcpConfig, SplitFractions};
//!
//! let data = generate(&SynthSpec::new(Family::TwoModes, 1000, 0))?
//!     .split(&SplitFractions::default(), 7)?;
//! let backbone = GmmBackbone::fit(&data.fold(Fold::Train), &data.fold(Fold::Val), &GmmOptions::default())?;
//! let predictor = pcp_calibrate(Arc::new(backbone), &data, &PcpConfig::new(0.1, 40)?)?;
//! let set = predictor.predict_indexed(&[0.2], 0)?;
//! assert_eq!(set.centers().len(), 40);
//! # Ok(())
//! # }
//! ```

pub mod backbones;
pub mod baseline;
pub mod calibrate;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod predict;
pub mod rng;
pub mod synth;
pub mod types;

pub use backbones::Backbone;
pub use calibrate::{calibrated_radius, compute_scores, empirical_quantile, score, ScoreVector};
pub use dataset::{Fold, LabeledDataset, LabeledPoint, SplitFractions, Splits};
pub use eval::{coverage_report, marginal_coverage, set_size_stats, worst_slab_coverage, WscConfig};
pub use error::{PcpError, Result};
pub use geometry::{Measure, MeasureEstimator};
pub use predict::{hdpcp_calibrate, hdpcp_select_beta, pcp_calibrate, pcp_predict, CalibratedPredictor};
pub use types::{
    BallUnionSet, BetaChoice, BetaFold, BetaGrid, CoverageReport, NormKind, PcpConfig, QuantileMode, Radius, SampleBatch,
};
pub use synth::{Family, SynthSpec};
