//! Config-driven experiment runner for sample-based conformal prediction:
//! load or generate data, fit a backbone, calibrate, predict, evaluate and
//! write results tables, predictive sets and SVG plots.

pub mod config;
pub mod experiment;
pub mod plot;

pub use config::{load_config, BackboneConfig, DataConfig, ExperimentConfig, Method, Override, PcpSection};
pub use experiment::{run_and_write, run_experiment, run_on, write_outputs, BackboneSource, RunOutput};
pub use plot::{interval_histogram, plot_run, plot_sets, PlotOptions};

use pcp_core::PcpError;

/// Process exit status for an error: 2 configuration, 3 data, 4 bridge.
pub fn exit_code(err: &PcpError) -> u8 {
    match err {
        PcpError::Config(_) | PcpError::Precondition(_) | PcpError::Capability(_) => 2,
        PcpError::Data(_)
        | PcpError::Dimension { .. }
        | PcpError::Degenerate(_)
        | PcpError::Io(_)
        | PcpError::Csv(_) => 3,
        PcpError::Protocol { .. } => 4,
    }
}
