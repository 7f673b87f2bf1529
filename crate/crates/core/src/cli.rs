//! Command-line runner: `train`, `validate-bounds` and `sweep`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 4 bound
//! violation, 5 I/O failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use crate::checkpoint::ModelSnapshot;
use crate::config::{ExperimentConfig, GridPoint};
use crate::error::{Error, Result};
use crate::report::CsvTable;
use crate::training::{run_experiment, MetricsTable, RunResult};
use crate::validation::validate_bounds;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_BOUND: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "ota-pfl", version, about = "Personalized federated learning over analog over-the-air aggregation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once per seed; writes metrics.csv and models.bin.
    Train(CommonArgs),
    /// Monte-Carlo check of the convergence bounds on a convex problem.
    ValidateBounds(CommonArgs),
    /// Train over the Cartesian grid of the `[sweep]` section.
    Sweep(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.seed` and drops any `run.seeds` list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "OTA_PFL_WORKERS", default_value_t = 0)]
    pub workers: usize,
    #[arg(long)]
    pub quiet: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. } | Error::StepSize(_) => EXIT_CONFIG,
        Error::ImpossiblePartition(_) | Error::Unsupported(_) => EXIT_CONFIG,
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::Client { .. } => EXIT_DIVERGED,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::ModelFile(_) => EXIT_IO,
        _ => EXIT_DIVERGED,
    }
}

/// Loads the config and applies command-line overrides.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
        cfg.run.seeds = None;
    }
    if let Some(out) = &args.out {
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    run(&cli.command)
}

pub fn run(command: &Command) -> i32 {
    let args = match command {
        Command::Train(a) | Command::ValidateBounds(a) | Command::Sweep(a) => a,
    };
    let level = if args.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::from_default_env().filter_level(level).try_init();
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} workers: {e}", args.workers);
            return EXIT_CONFIG;
        }
    };
    let outcome = pool.install(|| match command {
        Command::Train(_) => train(&cfg, args.quiet),
        Command::ValidateBounds(_) => validate(&cfg),
        Command::Sweep(_) => sweep(&cfg, args.quiet),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn header(cfg: &ExperimentConfig, extra: &[String]) -> Vec<String> {
    let mut lines = cfg.echo();
    lines.extend_from_slice(extra);
    lines
}

/// Outcome of one seed: the run or its divergence, with what was recorded.
struct SeedRun {
    seed: u64,
    eta_g: f64,
    result: Result<RunResult>,
}

fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let problem = cfg.build_problem(cfg.run.problem_seed.unwrap_or(seed), false)?;
    let trainer = cfg.trainer(seed, problem.eta_g, None)?;
    let reference = problem.reference();
    let result = run_experiment(&trainer, problem.w0, problem.clients, &problem.channel, &reference);
    Ok(SeedRun {
        seed,
        eta_g: problem.eta_g,
        result,
    })
}

/// Metrics of a finished or diverged run; other errors pass through.
fn metrics_of(run: &SeedRun) -> std::result::Result<(&MetricsTable, Option<&RunResult>), &Error> {
    match &run.result {
        Ok(r) => Ok((&r.metrics, Some(r))),
        Err(Error::Diverged { partial, .. }) => Ok((&partial.metrics, None)),
        Err(e) => Err(e),
    }
}

fn train(cfg: &ExperimentConfig, quiet: bool) -> Result<i32> {
    let seeds = cfg.run.seed_list();
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&s| train_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let out = &cfg.run.output_dir;
    let mut code = EXIT_OK;
    for run in &runs {
        let dir = if runs.len() == 1 { out.clone() } else { out.join(format!("seed-{}", run.seed)) };
        let (metrics, finished) = match metrics_of(run) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("error: seed {}: {e}", run.seed);
                code = code.max(exit_code(e));
                continue;
            }
        };
        let mut table = metrics.to_csv();
        table.comments = header(
            cfg,
            &[format!("seed = {}", run.seed), format!("effective.eta_g = {}", run.eta_g)],
        );
        table.write(&dir.join("metrics.csv"))?;
        match finished {
            Some(r) => {
                ModelSnapshot {
                    global: r.w.clone(),
                    personal: r.personal.clone(),
                }
                .save(&dir.join("models.bin"))?;
                if !quiet {
                    let last = r.metrics.rows.last().expect("initial row");
                    println!(
                        "seed {}: {} rounds, global loss {}, personal acc {}, generic acc {}",
                        run.seed,
                        last.round,
                        fmt_opt(last.global_loss),
                        fmt_opt(last.mean_personal_acc),
                        fmt_opt(last.generic_acc)
                    );
                }
            }
            None => {
                eprintln!("error: seed {}: {}", run.seed, run.result.as_ref().unwrap_err());
                code = code.max(EXIT_DIVERGED);
            }
        }
    }
    Ok(code)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

fn validate(cfg: &ExperimentConfig) -> Result<i32> {
    let problem_seed = cfg.run.problem_seed.unwrap_or(0);
    let problem = cfg.build_problem(problem_seed, true)?;
    let c = problem.constants.as_ref().expect("theory requested");
    let max = crate::theory::eta_g_max(c)?;
    if !(problem.eta_g < max) {
        return Err(Error::Config(format!(
            "training.eta_g = {} violates the step-size condition: eta_g_max = {max}",
            problem.eta_g
        )));
    }
    let template = cfg.trainer(0, problem.eta_g, Some(c.delta / 2.0))?;
    let seeds = cfg.run.seed_list();
    let report = validate_bounds(&template, &problem, &seeds, cfg.run.rate_check)?;
    let mut extra = vec![
        format!("problem_seed = {problem_seed}"),
        format!("effective.eta_g = {}", problem.eta_g),
        format!("effective.projection_radius = {}", template.projection_radius.unwrap_or(f64::INFINITY)),
    ];
    extra.extend(c.describe().into_iter().map(|l| format!("theory.{l}")));
    let out = &cfg.run.output_dir;
    let mut table = report.table.clone();
    table.comments = header(cfg, &extra);
    table.write(&out.join("bounds.csv"))?;
    if let Some(t2) = &report.rate_table {
        let mut t2 = t2.clone();
        t2.comments = header(cfg, &extra);
        t2.write(&out.join("rate.csv"))?;
    }
    let mut summary = String::new();
    for line in &report.checks {
        println!("{line}");
        summary.push_str(&format!("{line}\n"));
    }
    crate::report::write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_BOUND })
}

const INDEX_COLUMNS: [&str; 8] = [
    "point",
    "lambda",
    "clients",
    "noisy_client_ratio",
    "final_personal_acc",
    "final_generic_acc",
    "final_global_loss",
    "diverged",
];

fn sweep(cfg: &ExperimentConfig, quiet: bool) -> Result<i32> {
    let grid = cfg.grid();
    let seeds = cfg.run.seed_list();
    let out = cfg.run.output_dir.clone();
    let results: Vec<(GridPoint, Vec<SeedRun>)> = grid
        .par_iter()
        .map(|p| {
            let point_cfg = cfg.at_point(p);
            let runs = seeds
                .par_iter()
                .map(|&s| train_seed(&point_cfg, s))
                .collect::<Result<Vec<_>>>()?;
            Ok((*p, runs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut index = CsvTable::new(&INDEX_COLUMNS);
    index.comments = cfg.echo();
    let mut code = EXIT_OK;
    for (i, (point, runs)) in results.iter().enumerate() {
        let point_cfg = cfg.at_point(point);
        let mut table = CsvTable::new(&["seed"]);
        table.columns.extend(crate::training::METRIC_COLUMNS.iter().map(|c| c.to_string()));
        table.comments = header(
            &point_cfg,
            &[format!("point = {i}"), format!("seeds = {seeds:?}")],
        );
        let mut finals = Vec::new();
        let mut diverged = false;
        for run in runs {
            let (metrics, finished) = match metrics_of(run) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("error: point {i}, seed {}: {e}", run.seed);
                    code = code.max(exit_code(e));
                    diverged = true;
                    continue;
                }
            };
            if finished.is_none() {
                diverged = true;
                code = code.max(EXIT_DIVERGED);
            }
            for row in metrics.to_csv().rows {
                let mut r = vec![Some(run.seed as f64)];
                r.extend(row);
                table.rows.push(r);
            }
            if let Some(last) = finished.and_then(|r| r.metrics.rows.last()) {
                finals.push(last.clone());
            }
        }
        table.write(&point_file(&out, i))?;
        let mean = |f: fn(&crate::training::MetricsRow) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = finals.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let personal = mean(|r| r.mean_personal_acc);
        let generic = mean(|r| r.generic_acc);
        index.rows.push(vec![
            Some(i as f64),
            Some(point.lambda),
            Some(point.clients as f64),
            Some(point.noisy_client_ratio),
            personal,
            generic,
            mean(|r| r.global_loss),
            Some(if diverged { 1.0 } else { 0.0 }),
        ]);
        if !quiet {
            println!(
                "point {i}: lambda {}, K {}, noisy ratio {}: personal acc {}, generic acc {}",
                point.lambda,
                point.clients,
                point.noisy_client_ratio,
                fmt_opt(personal),
                fmt_opt(generic)
            );
        }
        info!("wrote {}", point_file(&out, i).display());
    }
    index.write(&out.join("index.csv"))?;
    Ok(code)
}

pub fn point_file(out: &Path, i: usize) -> PathBuf {
    out.join(format!("point-{i:04}.csv"))
}
