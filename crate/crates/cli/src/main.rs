//! `minmpc`: generate demonstrations, learn a quadratic value function,
//! simulate controllers and compare the runs.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use minmpc_core::controller::{Controller, ControllerError, FullMinmpcController, MyopicController};
use minmpc_core::harness::{
    generate_demonstrations, load_dataset, mismatch_plant, reference_value, simulate_closed_loop, write_demo_run,
    write_sim_csv, HarnessError, PlantSpec, SimConfig, Timings,
};
use minmpc_core::learner::{evaluate_residual_norms, learn, project_psd, LearnOptions, LearnedValue, LearnerError};
use minmpc_core::nlp::SolveOptions;
use thiserror::Error;

use crate::config::{ConfigError, PlantKind, Reason};
use crate::report::ReportError;

#[derive(Debug, Parser)]
#[command(
    name = "minmpc",
    version,
    about = "Myopic mixed-integer MPC with a learned cost-to-go"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerKind {
    Myopic,
    Full,
    ShortNoV,
}

impl ControllerKind {
    fn label(self) -> &'static str {
        match self {
            ControllerKind::Myopic => "myopic",
            ControllerKind::Full => "full",
            ControllerKind::ShortNoV => "short-no-v",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the expert from every configured initial state and store the pairs.
    Demos {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory [default: <out_dir>/dataset].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit P to a stored dataset.
    Learn {
        /// Path to the dataset's manifest.json.
        #[arg(long)]
        dataset: PathBuf,
        /// Optional run config supplying learner settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSON [default: value.json next to the manifest].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop simulation of one controller against the configured plant.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        controller: ControllerKind,
        /// Learned value JSON, required for the myopic controller.
        #[arg(long)]
        value_fn: Option<PathBuf>,
        /// Output directory [default: <out_dir>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare simulation results.
    Report {
        /// `*.result.json` files; timings are read from the sibling `*.timings.json`.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    MissingFlag(String),
    #[error("{0}")]
    Learner(#[from] LearnerError),
    #[error("{0}")]
    Dataset(HarnessError),
    #[error("{0}")]
    ValueFunction(ControllerError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Harness(#[from] HarnessError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingFlag(_) => 2,
            CliError::Learner(_) | CliError::Dataset(_) | CliError::ValueFunction(_) => 3,
            CliError::Report(_) => 4,
            CliError::Harness(_) | CliError::Io { .. } | CliError::Json(_) => 1,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::Config(e) => e.reason.code(),
            CliError::MissingFlag(_) => "missing-flag",
            CliError::Learner(LearnerError::Empty) => "empty-dataset",
            CliError::Learner(LearnerError::InfeasibleDemo { .. }) => "infeasible-demo",
            CliError::Learner(LearnerError::NotPsd | LearnerError::Json(_)) => "invalid-value-fn",
            CliError::Learner(_) => "learner",
            CliError::Dataset(_) => "dataset",
            CliError::ValueFunction(_) => "invalid-value-fn",
            CliError::Report(_) => "report",
            CliError::Harness(_) => "runtime",
            CliError::Io { .. } | CliError::Json(_) => "io",
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_demos(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.join("dataset"));
    let run = generate_demonstrations(
        cfg.expert,
        &cfg.spec,
        &cfg.bnb,
        &SolveOptions::default(),
        &cfg.demo_states,
        cfg.demo_steps,
    )?;
    let manifest = write_demo_run(&dir, &run)?;
    for (i, t) in run.trajectories.iter().enumerate() {
        println!(
            "trajectory {i}: {} pairs in {:.3} s{}",
            t.pairs.len(),
            t.wall_time.as_secs_f64(),
            t.truncated
                .as_deref()
                .map_or(String::new(), |r| format!(" (truncated: {r})"))
        );
    }
    println!("M={} demonstrations written to {}", manifest.m, dir.display());
    println!("total offline wall time: {:.3} s", run.wall_time.as_secs_f64());
    Ok(())
}

fn cmd_learn(dataset: &Path, config: Option<&Path>, out: Option<PathBuf>) -> Result<(), CliError> {
    let opts = match config {
        Some(c) => config::load(c)?.learn,
        None => LearnOptions::default(),
    };
    let (manifest, data) = load_dataset(dataset).map_err(CliError::Dataset)?;
    let clock = Instant::now();
    let value = learn(&data, &opts)?;
    let elapsed = clock.elapsed().as_secs_f64();
    let path = out.unwrap_or_else(|| dataset.with_file_name("value.json"));
    write_file(&path, value.to_json()? + "\n")?;
    println!(
        "M={} status={:?} iterations={}",
        data.len(),
        value.status,
        value.iterations
    );
    println!("||r_stat||_inf = {:.6e}", value.r_stat_inf);
    println!("||r_comp||_inf = {:.6e}", value.r_comp_inf);
    println!("objective = {:.6e}", value.objective);
    if let Some(p_ref) = reference_value(&manifest.model) {
        let raw = evaluate_residual_norms(&p_ref, &data)?;
        let proj = evaluate_residual_norms(&project_psd(&p_ref, opts.eps), &data)?;
        let ok = value.objective <= raw.objective.min(proj.objective);
        log::info!("reference P: raw {raw:?}, projected {proj:?}");
        println!(
            "reference P objective = {:.6e} (projected {:.6e}); learned <= reference: {}",
            raw.objective,
            proj.objective,
            if ok { "yes" } else { "no" }
        );
    }
    println!("learner wall time: {elapsed:.3} s");
    println!("value function written to {}", path.display());
    Ok(())
}

fn cmd_simulate(
    config: &Path,
    kind: ControllerKind,
    value_fn: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let x0 = cfg.sim_x0.clone().ok_or_else(|| ConfigError {
        reason: Reason::MissingField,
        path: cfg.path.clone(),
        line: None,
        message: "simulation.x0 is required for simulate".into(),
    })?;
    let plant = match cfg.plant {
        PlantKind::Mismatch => mismatch_plant(&cfg.benchmark)?,
        PlantKind::Nominal => PlantSpec::nominal(cfg.spec.model().clone()),
    };
    let mut controller: Box<dyn Controller> = match kind {
        ControllerKind::Myopic => {
            let path = value_fn
                .ok_or_else(|| CliError::MissingFlag("--value-fn is required for the myopic controller".into()))?;
            let value = LearnedValue::load(path)?;
            let s = &cfg.spec;
            Box::new(
                MyopicController::new(s.map.clone(), s.q.clone(), s.r.clone(), s.x_ref.clone(), &value)
                    .map_err(CliError::ValueFunction)?,
            )
        }
        ControllerKind::Full => Box::new(FullMinmpcController::new(cfg.spec.clone(), cfg.bnb.clone())),
        ControllerKind::ShortNoV => {
            Box::new(FullMinmpcController::short_no_value(&cfg.spec, cfg.bnb.clone()).map_err(HarnessError::from)?)
        }
    };
    let sim = SimConfig {
        x0,
        steps: cfg.sim_steps,
        x_ref: cfg.spec.x_ref.clone(),
        seed: cfg.seed,
    };
    let result = simulate_closed_loop(controller.as_mut(), &plant, &sim)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let label = kind.label();
    let timings = Timings {
        controller: result.controller.clone(),
        step_times: result.step_times.clone(),
    };
    write_file(
        &dir.join(format!("{label}.result.json")),
        serde_json::to_string_pretty(&result)? + "\n",
    )?;
    write_file(
        &dir.join(format!("{label}.timings.json")),
        serde_json::to_string_pretty(&timings)? + "\n",
    )?;
    write_sim_csv(&dir.join(format!("{label}.trajectory.csv")), cfg.spec.model(), &result)?;
    if let Some(reason) = &result.terminated {
        log::warn!("{label}: run ended early: {reason}");
    }
    let m = &result.metrics;
    println!(
        "{label} on {}: {} steps, final ||x - x_ref||_inf = {:.4e}, violations {}, infeasible steps {}{}",
        result.plant,
        result.controls.len(),
        m.final_deviation_inf,
        result.violations.len(),
        m.infeasible_steps,
        result
            .terminated
            .as_deref()
            .map_or(String::new(), |r| format!(", ended early: {r}"))
    );
    println!(
        "step time: max {:.3e} s, median {:.3e} s",
        report::max(&result.step_times),
        report::median(&result.step_times)
    );
    println!("results written to {}", dir.display());
    Ok(())
}

fn cmd_report(results: &[PathBuf], out: Option<PathBuf>) -> Result<(), CliError> {
    let rows = report::build_rows(results)?;
    print!("{}", report::render_table(&rows));
    if let Some(path) = out {
        let mut buf = Vec::new();
        report::write_csv(&rows, &mut buf)?;
        write_file(&path, buf)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Demos { config, out } => cmd_demos(&config, out),
        Command::Learn { dataset, config, out } => cmd_learn(&dataset, config.as_deref(), out),
        Command::Simulate {
            config,
            controller,
            value_fn,
            out,
        } => cmd_simulate(&config, controller, value_fn.as_deref(), out),
        Command::Report { results, out } => cmd_report(&results, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MINMPC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
