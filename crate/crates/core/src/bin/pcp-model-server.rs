//! Reference model server for the line-delimited JSON bridge.
//!
//! ```text
//! pcp-model-server echo [P]
//! pcp-model-server synth FAMILY [RHO] [COEF_SEED]
//! ```
//!
//! `echo` answers every request with K copies of the first covariate and
//! no densities. `synth` samples the exact conditional law of a synthetic
//! family, densities included.

use std::io::{self, BufWriter};
use std::process::ExitCode;

use pcp_core::backbones::{serve, Backbone, PointMass};
use pcp_core::synth::{truth_backbone, Family, SynthSpec};

fn usage() -> ExitCode {
    eprintln!("usage: pcp-model-server echo [P] | synth FAMILY [RHO] [COEF_SEED]");
    ExitCode::from(2)
}

fn build(args: &[String]) -> Result<Box<dyn Backbone>, String> {
    match args.first().map(String::as_str) {
        Some("echo") => {
            let p = match args.get(1) {
                Some(v) => v.parse::<usize>().map_err(|e| format!("bad P {v:?}: {e}"))?,
                None => 1,
            };
            if p == 0 {
                return Err("P must be >= 1".into());
            }
            Ok(Box::new(PointMass::new(p, 1, |x| vec![x[0]])))
        }
        Some("synth") => {
            let family: Family = args.get(1).ok_or("missing FAMILY")?.parse().map_err(|e| format!("{e}"))?;
            let mut spec = SynthSpec::new(family, 1, 0);
            if let Some(v) = args.get(2) {
                spec.rho = v.parse().map_err(|e| format!("bad RHO {v:?}: {e}"))?;
            }
            if let Some(v) = args.get(3) {
                spec.coef_seed = v.parse().map_err(|e| format!("bad COEF_SEED {v:?}: {e}"))?;
            }
            Ok(Box::new(truth_backbone(&spec).map_err(|e| e.to_string())?))
        }
        _ => Err("unknown model".into()),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let backbone = match build(&args) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("pcp-model-server: {e}");
            return usage();
        }
    };
    let stdin = io::stdin().lock();
    let stdout = BufWriter::new(io::stdout().lock());
    match serve(backbone.as_ref(), stdin, stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pcp-model-server: {e}");
            ExitCode::FAILURE
        }
    }
}
