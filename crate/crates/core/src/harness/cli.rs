use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::{
    results_csv, run_error_analysis, run_sweep, run_theorem1_check, run_train, run_verify_invariance,
    theorem1_csv, with_threads, ExperimentConfig,
};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mimo-resample", version, about = "Resampled MIMO detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// SER/BER over the SNR grid for every detector and transform set.
    Sweep {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the neural detector at `snr_db`; writes model.json.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Error histograms, covariances and combined variances.
    Analyze {
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Empirical vs predicted variance of combined equicorrelated errors.
    #[command(name = "theorem1-check")]
    Theorem1Check {
        #[arg(long = "m", num_args = 1..)]
        m: Vec<usize>,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        rho: Vec<f64>,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// KS tests of the transformed problem distribution.
    #[command(name = "verify-invariance")]
    VerifyInvariance {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Sweep { trials, model } => {
            cfg.n_trials = trials.unwrap_or(cfg.n_trials);
            if model.is_some() {
                cfg.model = model.clone();
            }
        }
        Command::Train { epochs } => cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs),
        Command::Analyze { bins, model } => {
            cfg.n_bins = bins.unwrap_or(cfg.n_bins);
            if model.is_some() {
                cfg.model = model.clone();
            }
        }
        Command::Theorem1Check { m, rho, sigma2, draws } => {
            let th = &mut cfg.theorem1;
            if !m.is_empty() {
                th.m_values = m.clone();
            }
            if !rho.is_empty() {
                th.rho_grid = rho.clone();
            }
            th.sigma2 = sigma2.unwrap_or(th.sigma2);
            th.n_draws = draws.unwrap_or(th.n_draws);
        }
        Command::VerifyInvariance { samples, alpha } => {
            let inv = &mut cfg.invariance;
            inv.n_samples = samples.unwrap_or(inv.n_samples);
            inv.alpha = alpha.unwrap_or(inv.alpha);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn dispatch(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.out;
    std::fs::create_dir_all(out)?;
    write(out, "config.echo.json", &serde_json::to_string_pretty(cfg)?)?;
    match command {
        Command::Sweep { .. } => {
            let rows = run_sweep(cfg)?;
            for r in &rows {
                println!("snr {:>6} {:<36} ser {:.3e} ber {:.3e}", r.snr_db, r.detector, r.ser, r.ber);
            }
            let path = write(out, "results.csv", &results_csv(&rows)?)?;
            println!("wrote {}", path.display());
        }
        Command::Train { .. } => {
            let model = run_train(cfg)?;
            let path = out.join("model.json");
            model.save(&path)?;
            println!(
                "loss {:.4} -> {:.4}; wrote {}",
                model.train_meta.initial_loss,
                model.train_meta.final_loss,
                path.display()
            );
        }
        Command::Analyze { .. } => {
            let report = run_error_analysis(cfg, cfg.n_bins)?;
            for e in &report.entries {
                println!(
                    "{} {:?}: sigma2 {:.4} rho01 {:.4} combined {:.4} predicted {:.4}",
                    e.detector, e.transforms, e.sigma2, e.rho[0][1], e.uniform.measured, e.uniform.predicted
                );
            }
            let path = write(out, "analysis.json", &serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", path.display());
        }
        Command::Theorem1Check { .. } => {
            let th = &cfg.theorem1;
            let rows = run_theorem1_check(&th.m_values, &th.rho_grid, th.sigma2, th.n_draws, cfg.seed)?;
            for r in &rows {
                println!(
                    "rho {:<5} m {:<3} predicted {:.4} empirical {:.4} ± {:.4}",
                    r.rho, r.m, r.predicted, r.empirical, r.stderr
                );
            }
            let path = write(out, "theorem1.csv", &theorem1_csv(&rows)?)?;
            println!("wrote {}", path.display());
        }
        Command::VerifyInvariance { .. } => {
            let summary = run_verify_invariance(cfg)?;
            for r in summary.transforms.iter().chain([&summary.control]) {
                let worst = r.tests.iter().map(|t| t.p_value).fold(1.0, f64::min);
                println!("{:<12} pass {:<5} min p {:.4}", r.transform, r.pass, worst);
            }
            let path = write(out, "invariance.json", &serde_json::to_string_pretty(&summary)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 2 for usage or config errors, 1 for runtime failures.
pub fn main_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = effective_config(&cli).and_then(|cfg| {
        let threads = cfg.threads;
        with_threads(threads, || dispatch(&cli.command, &cfg))?
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownTag(_) => 2,
                _ => 1,
            }
        }
    }
}
