use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pcp_cli::{exit_code, load_config, plot_run, run_and_write, Override, PlotOptions};
use pcp_core::backbones::{Backbone, BridgeBackbone};
use pcp_core::rng::{self, Domain};
use pcp_core::synth::generate;
use pcp_core::{Family, PcpError, Result, SynthSpec};

#[derive(Parser)]
#[command(name = "pcp", version, about = "Sample-based conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (TOML or JSON); `--key=value` overrides config keys.
    Run {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Plot the saved predictive sets of a run directory.
    Plot {
        run_dir: PathBuf,
        /// One panel per pair of target coordinates (needed when d > 2).
        #[arg(long)]
        pairwise: bool,
        /// Test points whose balls are outlined when d >= 2.
        #[arg(long, default_value_t = 3)]
        max_sets: usize,
    },
    /// Generate a synthetic dataset as CSV.
    Gen {
        family: Family,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        coef_seed: u64,
        #[arg(long)]
        noise: Option<f64>,
        /// Output file; standard output when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check that an external model speaks the bridge protocol.
    BridgeTest {
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
}

fn run(config: PathBuf, overrides: Vec<String>) -> Result<()> {
    let overrides = overrides.iter().map(|s| s.parse()).collect::<Result<Vec<Override>>>()?;
    let cfg = load_config(&config, &overrides)?;
    let out = run_and_write(&cfg)?;
    println!("method repetitions coverage(mean±se) conditional(mean±se) size(mean±se)");
    for row in &out.aggregate {
        println!(
            "{} {} {:.4}±{:.4} {:.4}±{:.4} {:.4}±{:.4}",
            row.method, row.repetitions, row.mean[0], row.stderr[0], row.mean[1], row.stderr[1], row.mean[2], row.stderr[2]
        );
    }
    println!("results written to {}", cfg.output_dir.display());
    Ok(())
}

fn gen(spec: SynthSpec, out: Option<PathBuf>) -> Result<()> {
    let data = generate(&spec)?;
    match out {
        Some(path) => data.write_csv(std::fs::File::create(path)?),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            data.write_csv(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn bridge_test(command: Vec<String>) -> Result<()> {
    let bridge = BridgeBackbone::spawn(&command)?;
    let (p, d) = bridge.dims();
    println!("handshake ok: p = {p}, d = {d}, densities = {}", bridge.has_density());
    let k = 8;
    let batch = bridge.sample(&vec![0.0; p], k, &mut rng::stream(0, Domain::Test, 0))?;
    if batch.len() != k || batch.dim() != d {
        return Err(PcpError::Protocol {
            message: format!("asked for {k} samples of dimension {d}, got {} of dimension {}", batch.len(), batch.dim()),
            stderr: String::new(),
        });
    }
    println!("sample ok: {k} samples at x = 0");
    bridge.close()?;
    println!("shutdown ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => run(config, overrides),
        Command::Plot { run_dir, pairwise, max_sets } => plot_run(&run_dir, &PlotOptions { pairwise, max_sets }).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Gen { family, n, seed, rho, coef_seed, noise, out } => {
            let spec = SynthSpec { name: family, n, seed, rho, coef_seed, noise };
            gen(spec, out)
        }
        Command::BridgeTest { command } => bridge_test(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
