//! Command-line front end. [`run_cli`] parses arguments and maps outcomes to
//! exit codes; bad flags get [`EXIT_USAGE`] while runtime failures get
//! [`EXIT_FAILURE`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{load_cube, save_cube, Cube};
use crate::inference::{denoise, InferenceConfig, InferenceReport};
use crate::metrics::{evaluate, svd_baseline_cube, QualityReport};
use crate::model::NoiseLocation;
use crate::noise_sim::{corrupt, NoiseCase, NoiseSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable selecting the worker count (0 or unset = automatic).
pub const THREADS_ENV: &str = "NMOG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "nmog",
    version,
    about = "Hyperspectral denoising with non-i.i.d. MoG low-rank factorization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt a clean cube with one of the six synthetic noise cases.
    Simulate(SimulateArgs),
    /// Restore a noisy cube by variational inference.
    Denoise(DenoiseArgs),
    /// Score a test cube against a reference.
    Evaluate(EvaluateArgs),
    /// Truncated-SVD baseline restoration.
    Svd(SvdArgs),
    /// Run the whole simulate-to-score protocol over several seeds.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// iid, noniid, stripe, deadline, impulse or mixture.
    #[arg(long)]
    pub case: NoiseCase,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Upper bound on the rank; ARD prunes below it.
    #[arg(long, default_value_t = 20)]
    pub rank: usize,
    /// Mixture components per band.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = crate::lowrank::DEFAULT_PRUNE_RATIO)]
    pub prune_ratio: f64,
    /// Skip the per-band rescaling onto [0, 1].
    #[arg(long)]
    pub no_normalize: bool,
    /// Skip evidence-bound tracking.
    #[arg(long)]
    pub no_elbo: bool,
    /// Let the noise means move away from the prior location.
    #[arg(long)]
    pub free_noise_mean: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Per-band CSV destination.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Summary JSON destination.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SvdArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON experiment plan.
    #[arg(long)]
    pub plan: PathBuf,
}

impl DenoiseArgs {
    pub fn config(&self) -> InferenceConfig {
        let mut cfg = InferenceConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            elbo_check: !self.no_elbo,
            prune_ratio: self.prune_ratio,
            normalize: !self.no_normalize,
            noise_location: if self.free_noise_mean {
                NoiseLocation::Free
            } else {
                NoiseLocation::Pinned
            },
            ..Default::default()
        };
        cfg.hyper.rank = self.rank;
        cfg.hyper.components = self.components;
        cfg
    }
}

/// Multi-seed protocol read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub clean_path: PathBuf,
    pub case: NoiseCase,
    pub seeds: Vec<u64>,
    /// Mixture components; defaults to 1 for the Gaussian cases, 3 otherwise.
    #[serde(default, alias = "K")]
    pub components: Option<usize>,
    #[serde(alias = "R")]
    pub rank: usize,
    /// Baseline rank; defaults to `rank`.
    #[serde(default)]
    pub svd_rank: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Synthetic cubes already live on [0, 1], so rescaling is off unless
    /// asked for.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub elbo_check: bool,
}

fn default_max_iters() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-4
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "experiment plan lists no seeds".into(),
            ));
        }
        self.config(self.seeds[0]).validate()?;
        if self.svd_rank == Some(0) {
            return Err(Error::InvalidArgument("svd_rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn config(&self, seed: u64) -> InferenceConfig {
        let mut cfg = InferenceConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            seed,
            elbo_check: self.elbo_check,
            normalize: self.normalize,
            ..Default::default()
        };
        cfg.hyper.rank = self.rank;
        cfg.hyper.components = self.components.unwrap_or(self.case.default_components());
        cfg
    }
}

type MetricColumn = (&'static str, fn(MethodScore) -> f64);

/// Scores for one method at one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub mpsnr: f64,
    pub mssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<MethodScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd: Option<MethodScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmog: Option<MethodScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub case: NoiseCase,
    /// Seeds that completed; means are taken over these.
    pub completed: usize,
    pub noisy: Option<MethodScore>,
    pub svd: Option<MethodScore>,
    pub nmog: Option<MethodScore>,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentSummary {
    fn from_outcomes(case: NoiseCase, seeds: Vec<SeedOutcome>) -> Self {
        let done: Vec<&SeedOutcome> = seeds.iter().filter(|s| s.error.is_none()).collect();
        let mean = |pick: fn(&SeedOutcome) -> Option<MethodScore>| -> Option<MethodScore> {
            let scores: Vec<MethodScore> = done.iter().filter_map(|s| pick(s)).collect();
            if scores.is_empty() {
                return None;
            }
            let n = scores.len() as f64;
            Some(MethodScore {
                mpsnr: scores.iter().map(|s| s.mpsnr).sum::<f64>() / n,
                mssim: scores.iter().map(|s| s.mssim).sum::<f64>() / n,
                seconds: scores.iter().map(|s| s.seconds).sum::<f64>() / n,
            })
        };
        Self {
            case,
            completed: done.len(),
            noisy: mean(|s| s.noisy),
            svd: mean(|s| s.svd),
            nmog: mean(|s| s.nmog),
            seeds,
        }
    }

    /// One row per metric, one column per method.
    pub fn to_csv(&self) -> String {
        let cell = |score: Option<MethodScore>, f: fn(MethodScore) -> f64| {
            score.map(|s| format!("{}", f(s))).unwrap_or_default()
        };
        let mut out = String::from("case,metric,Noisy,SVD,NMoG\n");
        let rows: [MetricColumn; 3] = [
            ("MPSNR", |s| s.mpsnr),
            ("MSSIM", |s| s.mssim),
            ("time", |s| s.seconds),
        ];
        for (name, f) in rows {
            out.push_str(&format!(
                "{},{name},{},{},{}\n",
                self.case,
                cell(self.noisy, f),
                cell(self.svd, f),
                cell(self.nmog, f)
            ));
        }
        out
    }
}

/// Parses `args` (program name first) and runs the selected command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return EXIT_OK;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", usage_for(&args));
            }
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("nmog: {e}");
            match e {
                Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// Usage line of the first subcommand named in `args`, else the top level.
fn usage_for(args: &[OsString]) -> String {
    let mut cmd = Cli::command();
    let name = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| cmd.find_subcommand(a).is_some())
        .map(str::to_owned);
    match name.and_then(|n| cmd.find_subcommand_mut(&n).map(|sub| sub.render_usage())) {
        Some(usage) => usage.to_string(),
        None => cmd.render_usage().to_string(),
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`]. Only the first call in
/// a process has an effect.
pub fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV}={v:?} is not a count")))?,
        Err(_) => 0,
    };
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn execute(command: &Command) -> Result<i32> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Svd(a) => cmd_svd(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let clean = load_cube(&a.input)?;
    let (noisy, metadata) = corrupt(&clean, &NoiseSpec::new(a.case, a.seed))?;
    save_cube(&noisy, &a.output)?;
    write_text(&a.metadata, &metadata.to_json()?)?;
    Ok(EXIT_OK)
}

pub fn cmd_denoise(a: &DenoiseArgs) -> Result<i32> {
    let cfg = a.config();
    cfg.validate()?;
    let noisy = load_cube(&a.input)?;
    let (clean, report) = denoise(&noisy, &cfg)?;
    save_cube(&clean, &a.output)?;
    if let Some(path) = &a.report {
        write_text(path, &report.to_json()?)?;
    }
    Ok(finish_denoise(&report))
}

fn finish_denoise(report: &InferenceReport) -> i32 {
    match &report.divergence {
        Some(reason) => {
            eprintln!("nmog: diverged at {reason}; wrote the last finite state");
            EXIT_FAILURE
        }
        None => {
            eprintln!(
                "nmog: {} iterations, rank {}, {}",
                report.iterations_run,
                report.final_rank,
                if report.converged {
                    "converged"
                } else {
                    "iteration cap reached"
                }
            );
            EXIT_OK
        }
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let reference = load_cube(&a.reference)?;
    let test = load_cube(&a.test)?;
    let report = evaluate(&reference, &test)?;
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    let json = report.summary_json()?;
    if let Some(path) = &a.json {
        write_text(path, &json)?;
    }
    for w in &report.warnings {
        eprintln!("nmog: {w}");
    }
    println!("{json}");
    Ok(EXIT_OK)
}

pub fn cmd_svd(a: &SvdArgs) -> Result<i32> {
    if a.rank == 0 {
        return Err(Error::InvalidArgument("--rank must be at least 1".into()));
    }
    let input = load_cube(&a.input)?;
    save_cube(&svd_baseline_cube(&input, a.rank)?, &a.output)?;
    Ok(EXIT_OK)
}

pub fn cmd_experiment(a: &ExperimentArgs) -> Result<i32> {
    let text = fs::read_to_string(&a.plan).map_err(|e| Error::Io {
        path: a.plan.clone(),
        source: e,
    })?;
    let plan: ExperimentPlan = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("experiment plan: {e}")))?;
    let summary = run_experiment(&plan)?;
    println!("{}", summary.to_csv());
    Ok(if summary.completed == plan.seeds.len() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

/// Runs the plan and writes `summary.csv`, `summary.json` and per-seed
/// artifacts under `output_dir`. Seed failures are recorded, not raised.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentSummary> {
    plan.validate()?;
    let clean = load_cube(&plan.clean_path)?;
    fs::create_dir_all(&plan.output_dir).map_err(|e| Error::Io {
        path: plan.output_dir.clone(),
        source: e,
    })?;
    let outcomes = plan
        .seeds
        .iter()
        .map(|&seed| match run_seed(plan, &clean, seed) {
            Ok(outcome) => outcome,
            Err(e) => SeedOutcome {
                seed,
                noisy: None,
                svd: None,
                nmog: None,
                final_rank: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let summary = ExperimentSummary::from_outcomes(plan.case, outcomes);
    write_text(&plan.output_dir.join("summary.csv"), &summary.to_csv())?;
    write_text(
        &plan.output_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn score(report: QualityReport, seconds: f64) -> MethodScore {
    MethodScore {
        mpsnr: report.mpsnr,
        mssim: report.mssim,
        seconds,
    }
}

fn run_seed(plan: &ExperimentPlan, clean: &Cube, seed: u64) -> Result<SeedOutcome> {
    let dir = plan.output_dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (noisy, metadata) = corrupt(clean, &NoiseSpec::new(plan.case, seed))?;
    save_cube(&noisy, dir.join("noisy.hsic"))?;
    write_text(&dir.join("metadata.json"), &metadata.to_json()?)?;

    let start = Instant::now();
    let svd = svd_baseline_cube(&noisy, plan.svd_rank.unwrap_or(plan.rank))?;
    let svd_seconds = start.elapsed().as_secs_f64();
    save_cube(&svd, dir.join("svd.hsic"))?;

    let (restored, report) = denoise(&noisy, &plan.config(seed))?;
    save_cube(&restored, dir.join("nmog.hsic"))?;
    write_text(&dir.join("report.json"), &report.to_json()?)?;
    if let Some(reason) = report.divergence {
        return Err(Error::Divergence {
            iteration: report.iterations_run,
            reason,
        });
    }

    Ok(SeedOutcome {
        seed,
        noisy: Some(score(evaluate(clean, &noisy)?, 0.0)),
        svd: Some(score(evaluate(clean, &svd)?, svd_seconds)),
        nmog: Some(score(evaluate(clean, &restored)?, report.seconds)),
        final_rank: Some(report.final_rank),
        error: None,
    })
}
