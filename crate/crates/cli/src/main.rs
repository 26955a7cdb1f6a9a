use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pko_core::experiment::{
    build_pipeline_with, emit_report, fit_model, run_benchmark, setup_trial, sweep_epsilon, synthesize, truth_plant,
    Benchmark, ExperimentConfig, ReportInput,
};
use pko_core::synthesis::{solve_gain, verify_certificate, Certificate};
use pko_core::{Error, KoopmanModel};

/// Koopman-lifted observers with LMI-certified sector corrections.
#[derive(Parser)]
#[command(name = "pko", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults to the benchmark preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the observer LMI for a fitted model and write cert.json.
    Synth {
        #[command(flatten)]
        common: Common,
        /// model.json from `pko fit`; fitted from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Λ search grid as `lo,hi,n`.
        #[arg(long, value_parser = parse_grid)]
        lambda_grid: Option<(f64, f64, usize)>,
        /// LMI margin as a multiple of ‖A‖.
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        record_timings: bool,
    },
    /// Run EDMD on nominal training data and write model.json.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate one mismatched truth trial and write trace.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo comparison of the three observers.
    Bench {
        benchmark: String,
        #[command(flatten)]
        common: Common,
        /// Overrides the trial count from the config.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        record_timings: bool,
    },
    /// Sweep an injected lifted residual and check the ultimate bound.
    SweepEpsilon {
        #[command(flatten)]
        common: Common,
        /// Overrides the per-point trial count from the config.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        record_timings: bool,
    },
}

fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected lo,hi,n".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("hi: {e}"))?;
    let n: usize = parts[2].trim().parse().map_err(|e| format!("n: {e}"))?;
    if !(lo > 0.0 && lo <= hi && n >= 1) {
        return Err("need 0 < lo <= hi and n >= 1".into());
    }
    Ok((lo, hi, n))
}

/// Reached the end but more than half the trials diverged.
#[derive(Debug)]
struct DivergenceDominated(usize, usize);

impl std::fmt::Display for DivergenceDominated {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} trials had a divergent observer", self.0, self.1)
    }
}

impl std::error::Error for DivergenceDominated {}

fn load_config(common: &Common, default: Benchmark) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::preset(default),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    config.validate()?;
    Ok((config, out))
}

fn create_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            model,
            lambda_grid,
            margin,
            record_timings,
        } => {
            let (mut config, out) = load_config(&common, Benchmark::Vdp)?;
            if let Some((lo, hi, n)) = lambda_grid {
                config.synthesis.lambda_lo = lo;
                config.synthesis.lambda_hi = hi;
                config.synthesis.grid_points = n;
            }
            if let Some(m) = margin {
                config.synthesis.margin_scale = m;
            }
            config.validate()?;
            let model = match model {
                Some(path) => KoopmanModel::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => fit_model(&config)?,
            };
            let mut cert = solve_gain(&model, &config.observers.kappa, model.rho(), &config.synthesis.search_spec())?;
            let report = verify_certificate(&cert, &cert.problem(&model)?)?;
            create_dir(&out)?;
            println!(
                "verified: lambda_max(Xi) = {:e}, |Xi| = {:e}, gamma = {:e}, alpha = {:e}",
                report.xi_max_eig, report.xi_norm, cert.gamma, cert.alpha
            );
            if let Some(t) = cert.solver.wall_time_s {
                println!("solver wall time: {t:.3} s");
            }
            if !record_timings {
                cert.solver.wall_time_s = None;
            }
            cert.save(&out.join("cert.json"))?;
        }
        Command::Fit { common } => {
            let (config, out) = load_config(&common, Benchmark::Vdp)?;
            let model = fit_model(&config)?;
            create_dir(&out)?;
            model.save(&out.join("model.json"))?;
            if let Some(r) = model.residual {
                println!("r = {}, rho = {:e}, eta_bar = {:e}, epsilon = {:e}", model.r(), r.rho, r.eta_bar, r.epsilon);
            }
        }
        Command::Simulate { common } => {
            let (config, out) = load_config(&common, Benchmark::Vdp)?;
            let truth = truth_plant(&config, config.seed)?;
            let setup = setup_trial(&config, &truth, config.seed)?;
            create_dir(&out)?;
            setup.trace.write_csv(&out.join("trace.csv"))?;
        }
        Command::Bench {
            benchmark,
            common,
            trials,
            record_timings,
        } => {
            let benchmark: Benchmark = benchmark.parse()?;
            let (mut config, out) = load_config(&common, benchmark)?;
            if config.benchmark != benchmark {
                bail!(
                    "config is for `{}` but `{}` was requested",
                    config.benchmark.name(),
                    benchmark.name()
                );
            }
            if let Some(n) = trials {
                config.trials = n;
                config.validate()?;
            }
            let pipeline = build(&config)?;
            let run = run_benchmark(&pipeline)?;
            emit_report(
                &out,
                &ReportInput {
                    pipeline: &pipeline,
                    benchmark: Some(&run),
                    sweep: None,
                    record_timings,
                },
            )?;
            for row in &run.summary.rows {
                println!(
                    "{:<8} rmse {:.4} ± {:.4}  improvement {:+.1}%  diverged {}",
                    row.observer.label(),
                    row.rmse_mean,
                    row.rmse_std,
                    100.0 * row.improvement,
                    row.diverged
                );
            }
            let s = &run.summary;
            if 2 * s.diverged_trials > s.trials {
                return Err(DivergenceDominated(s.diverged_trials, s.trials).into());
            }
        }
        Command::SweepEpsilon {
            common,
            trials,
            record_timings,
        } => {
            let (mut config, out) = load_config(&common, Benchmark::Vdp)?;
            if let Some(n) = trials {
                config.sweep.trials = n;
                config.validate()?;
            }
            let pipeline = build(&config)?;
            let sweep = sweep_epsilon(&pipeline, &config.sweep.epsilons)?;
            emit_report(
                &out,
                &ReportInput {
                    pipeline: &pipeline,
                    benchmark: None,
                    sweep: Some(&sweep),
                    record_timings,
                },
            )?;
            for (kind, fit) in &sweep.fits {
                println!("{:<8} slope {:.4}  r^2 {:.4}", kind.label(), fit.slope, fit.r_squared);
            }
            println!("PKO within the ultimate bound at every point: {}", sweep.contained());
        }
    }
    Ok(())
}

fn build(config: &ExperimentConfig) -> anyhow::Result<pko_core::experiment::Pipeline> {
    let model = fit_model(config)?;
    let cert: Certificate = synthesize(config, &model)?;
    Ok(build_pipeline_with(config, model, cert)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<DivergenceDominated>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::SynthesisInfeasible(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    // usage errors exit with 1 so that 2 stays reserved for infeasibility
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
