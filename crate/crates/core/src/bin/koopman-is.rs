use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use koopman_is::config::ExperimentConfig;
use koopman_is::estimator::analytic_oracles;
use koopman_is::model::{make_builtin_model, Margin};
use koopman_is::runner::{benchmark, export_eigen, run_experiment, sweep_experiment, RunOptions};
use koopman_is::Result;

#[derive(Parser)]
#[command(name = "koopman-is", version, about = "Rare-event importance sampling with Koopman-approximated Doob transforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Reuse controller.json from the output directory instead of refitting.
        #[arg(long)]
        reuse_controller: bool,
        /// Output directory (overrides the config and KOOPMAN_IS_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the controller and tabulate the multiplier sweep.
    SweepC {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analytic event probability of a linear model.
    Oracle {
        model: String,
        /// Model parameter as key=value (repeatable).
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        /// Initial state, comma separated (default: the benchmark's).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Event as a TOML inline table, e.g. '{ margin = "half_space", coord = 0, threshold = 2.0 }'.
        #[arg(long)]
        event: Option<String>,
    },
    /// Fit and validate the spectrum and write eigen.csv.
    ExportEigen {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(serde::Deserialize)]
struct EventArg {
    event: Margin,
}

fn parse_param(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("{k}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn options(out: Option<PathBuf>, reuse_controller: bool) -> RunOptions {
    RunOptions { reuse_controller, out_dir: out }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, reuse_controller, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let o = run_experiment(&cfg, &options(out, reuse_controller))?;
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            let r = &o.report;
            println!(
                "{} {}: estimate {:.6e}  variance {:.4e}  relative error {:.4}  in-event {:.4}  M {}  blowups {}",
                r.method.as_str(),
                o.row.model,
                r.estimate,
                r.sample_variance,
                r.relative_error,
                r.proportion_in_event,
                r.samples,
                r.blowup_count
            );
            if let Some(c) = o.row.c {
                println!("multiplier c = {c}, eigenfunctions = {}", o.row.n_eigenfunctions.unwrap_or(0));
            }
            if o.floor_activations > 0 {
                eprintln!("warning: positivity floor activated {} times", o.floor_activations);
            }
            println!("outputs in {}", o.dir.display());
        }
        Command::SweepC { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (path, rows) = sweep_experiment(&cfg, &options(out, false))?;
            println!("{:>8} {:>10} {:>14} {:>12} {:>10} {:>8}", "c", "in-event", "estimate", "variance", "rel.err", "blowups");
            for r in rows {
                println!(
                    "{:>8} {:>10.4} {:>14.6e} {:>12.4e} {:>10.4} {:>8}",
                    r.c, r.proportion_in_event, r.estimate, r.variance, r.relative_error, r.blowup_count
                );
            }
            println!("sweep written to {}", path.display());
        }
        Command::Oracle { model, params, x0, horizon, event } => {
            let params: BTreeMap<String, f64> = params.into_iter().collect();
            let m = make_builtin_model(&model, &params)?;
            let b = benchmark(&model, m.dim_state())?;
            let margin = match event {
                Some(text) => toml::from_str::<EventArg>(&format!("event = {text}"))
                    .map_err(|e| koopman_is::Error::Config(format!("--event: {e}")))?
                    .event,
                None => b.margin,
            };
            let x0 = x0.unwrap_or(b.x0);
            let horizon = horizon.unwrap_or(b.horizon);
            let o = analytic_oracles(&m, &margin, &x0, horizon)?;
            println!("rho = {:.6e}  (std error {:.2e}, {})", o.value.rho, o.value.std_error, o.value.method);
        }
        Command::ExportEigen { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (path, spectrum) = export_eigen(&cfg, &options(out, false))?;
            if let Some(w) = &spectrum.rank_warning {
                eprintln!("warning: {w}");
            }
            println!("{} validated eigenpairs written to {}", spectrum.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
