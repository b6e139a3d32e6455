//! Command-line harness: sweep simulation, rate fitting, bound evaluation,
//! variance-condition verification and the open-question probe.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when a
//! statistical acceptance check fails (for CI use), 1 otherwise.

use clap::{Parser, Subcommand, ValueEnum};
use metagibbs::bounds::{self, BoundParams};
use metagibbs::experiments::{
    open_question_probe, run_isolation_vs_meta, run_rates, EnvironmentConfig, ExperimentConfig,
};
use metagibbs::meta_level::FinitePriorFamily;
use metagibbs::{bernstein, Error, RandomStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "metagibbs", version, about = "Meta-learning Gibbs experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the isolation-vs-meta sweep and emit a CSV table.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's output.dir, then "out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep over the T grid and fit log-log slopes of the meta excess.
    Rates {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one theoretical bound and print the report as JSON.
    Bound {
        #[arg(long, value_enum)]
        proposition: Proposition,
        /// TOML file with the bound parameters.
        #[arg(long)]
        params: PathBuf,
    },
    /// Verify the meta-level variance/excess condition.
    VerifyBernstein {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare exact-Gibbs and restricted-family hyper-posteriors.
    ProbeOpenQuestion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Proposition {
    Thm1,
    Cor1,
    Thm3,
    Concurrent,
    Discrete,
    Gaussian,
    Mixture,
    MixtureUnknownk,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Domain(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml_str(&text)
}

fn output_dir(config: &ExperimentConfig, cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| config.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_outputs(dir: &Path, name: &str, csv: &str, json: Option<String>) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    std::fs::write(&csv_path, csv)?;
    println!("wrote {}", csv_path.display());
    if let Some(json) = json {
        let json_path = dir.join(format!("{name}.json"));
        std::fs::write(&json_path, json)?;
        println!("wrote {}", json_path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let config = read_config(&config)?;
            let table = run_isolation_vs_meta(&config, seed)?;
            let dir = output_dir(&config, out);
            write_outputs(&dir, "simulate", &table.to_csv(), None)?;
            for row in &table.rows {
                println!(
                    "seed={} t={} n={} meta={:.6e} (se {:.1e}) iso={:.6e} (se {:.1e}) bound_ok={}",
                    row.seed,
                    row.t,
                    row.n,
                    row.meta_excess,
                    row.meta_se,
                    row.iso_excess,
                    row.iso_se,
                    row.bound_ok
                );
            }
            if table.all_bounds_hold() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("statistical acceptance failure: an estimate exceeds its bound by more than 3 SEs");
                Ok(ExitCode::from(3))
            }
        }
        Command::Rates { config, seed, out } => {
            let config = read_config(&config)?;
            let sweep = run_rates(&config, seed)?;
            let json = serde_json::to_string_pretty(&sweep.fits)
                .map_err(|e| Error::Numeric(e.to_string()))?;
            let dir = output_dir(&config, out);
            write_outputs(&dir, "rates", &sweep.to_csv(), Some(json))?;
            for fit in &sweep.fits {
                println!(
                    "seed={} n={} slope={:.4} intercept={:.4} r2={:.4}",
                    fit.seed, fit.n, fit.report.slope, fit.report.intercept, fit.report.r_squared
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bound {
            proposition,
            params,
        } => {
            let text = std::fs::read_to_string(&params)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", params.display())))?;
            let params: BoundParams =
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let report = match proposition {
                Proposition::Thm1 => {
                    bounds::isolation_bound(&params, params.empirical_part.unwrap_or(0.0))?
                }
                Proposition::Thm3 => {
                    bounds::meta_learning_bound(&params, params.empirical_part.unwrap_or(0.0))?
                }
                Proposition::Cor1 => bounds::prior_mass_bound(&params)?,
                Proposition::Concurrent => bounds::concurrent_priors_bound(&params)?,
                Proposition::Discrete => bounds::discrete_meta_bound(&params)?,
                Proposition::Gaussian => bounds::gaussian_meta_bound(&params)?,
                Proposition::Mixture => bounds::mixture_meta_bound(&params)?,
                Proposition::MixtureUnknownk => bounds::mixture_unknown_k_bound(&params)?,
            };
            let json =
                serde_json::to_string_pretty(&report).map_err(|e| Error::Numeric(e.to_string()))?;
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyBernstein { config } => {
            let config = read_config(&config)?;
            let settings = config.bernstein.clone().ok_or_else(|| {
                Error::Config("verify-bernstein needs a [bernstein] section".into())
            })?;
            let env = config.environment.build()?;
            let labels = match (&config.environment, &env) {
                (EnvironmentConfig::Discrete { labels, .. }, _) => *labels,
                _ => {
                    return Err(Error::Config(
                        "verify-bernstein runs on discrete environments".into(),
                    ))
                }
            };
            let loss_bound = env.loss().bound();
            let alpha = config.algorithm.alpha.resolve(loss_bound)?;
            let n = config.sweep.n_grid[0];
            let mut total = 0usize;
            let mut passed = 0usize;
            for &seed in &config.sweep.seeds {
                let stream = RandomStream::new(seed).child("verify-bernstein");
                let candidates = bernstein::random_discrete_priors(
                    labels,
                    settings.candidates,
                    Some(0),
                    &stream.child("candidates"),
                )?;
                let family = FinitePriorFamily::uniform_reference(candidates)?;
                let tested = bernstein::random_discrete_priors(
                    labels,
                    settings.tested,
                    None,
                    &stream.child("tested"),
                )?;
                let report = bernstein::verify_meta_bernstein(
                    &env,
                    &family,
                    &tested,
                    alpha,
                    n,
                    settings.reps,
                    &stream,
                )?;
                println!(
                    "seed={seed} pi*={} pass_rate={:.3}",
                    report.pi_star.index, report.pass_rate
                );
                for (j, est) in report.estimates.iter().enumerate() {
                    println!(
                        "  prior {j}: lhs={:.6e} rhs={:.6e} (c={:.4}, se_lhs={:.1e}, se_delta={:.1e}) pass={}",
                        est.lhs, est.rhs, est.c_used, est.se_lhs, est.se_delta, est.pass
                    );
                }
                total += report.estimates.len();
                passed += report.estimates.iter().filter(|e| e.pass).count();
            }
            let rate = passed as f64 / total as f64;
            println!("overall pass rate: {rate:.3} ({passed}/{total})");
            if rate >= 0.95 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("statistical acceptance failure: pass rate below 0.95");
                Ok(ExitCode::from(3))
            }
        }
        Command::ProbeOpenQuestion { config, out } => {
            let config = read_config(&config)?;
            let table = open_question_probe(&config)?;
            let dir = output_dir(&config, out);
            write_outputs(&dir, "probe", &table.to_csv(), None)?;
            for row in &table.rows {
                println!(
                    "seed={} t={} n={} exact={:.6e} (se {:.1e}) variational={:.6e} (se {:.1e}) gap_max={:.3e}",
                    row.seed,
                    row.t,
                    row.n,
                    row.exact_excess,
                    row.exact_se,
                    row.variational_excess,
                    row.variational_se,
                    row.fe_gap_max
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
