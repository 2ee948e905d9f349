//! Command-line front end for `emgd`.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 solver did not
//! converge (`solve`), 3 numeric failure during a run (`run-pcl`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emgd::experiment::{
    run_pcl_fresh, run_toy, write_tick_log, ConflictToy, ConvergenceReport, Editing, EvalMode,
    Method, RunConfig, RunMetrics, ToyConfig,
};
use emgd::moo_solver::{
    avg_grad, elastic_factors_gmc, elastic_factors_gs, pareto_descent_check, solve_emgd,
    solve_mgda, CombinationResult, ElasticFactors, ElasticState, GradientBundle, SolverOptions,
};
use emgd::streams::{
    build_parallel_split, generate_synthetic, load_idx, Dataset, SplitConfig, SplitManifest,
    SyntheticConfig,
};
use serde::{Deserialize, Serialize};

pub const EXIT_INPUT: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "emgd",
    version,
    about = "Elastic multi-gradient descent for parallel continual learning"
)]
pub struct Cli {
    /// Raise log verbosity (overridden by EMGD_LOG).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Combine gradients read as JSON from stdin.
    Solve,
    /// Run the two-function toy problem.
    RunToy(ToyArgs),
    /// Run parallel continual learning.
    RunPcl(PclArgs),
    /// Build a split manifest.
    BuildSplits(SplitArgs),
    /// Summarize metrics files under a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Accepted for interface uniformity; the toy run is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PclArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub editing: Option<String>,
    #[arg(long)]
    pub eval_mode: Option<String>,
    #[arg(long)]
    pub serial: bool,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub serial: bool,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
    /// Where the plot-data CSVs go; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<emgd::Error> for CliError {
    fn from(e: emgd::Error) -> Self {
        let code = match e {
            emgd::Error::TickFailure { .. } => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::input(format!("{what}: {e}")))
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    parse_json(&read_file(path)?, &path.display().to_string())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn parse_flag<T: std::str::FromStr<Err = emgd::Error>>(
    value: &Option<String>,
) -> CliResult<Option<T>> {
    value
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(CliError::from)
}

/// Dispatches one parsed command.
pub fn execute(cli: Cli, stdin: &mut dyn Read, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Solve => cmd_solve(stdin, stdout),
        Command::RunToy(args) => cmd_run_toy(&args, stdout),
        Command::RunPcl(args) => cmd_run_pcl(&args, stdout),
        Command::BuildSplits(args) => cmd_build_splits(&args, stdout),
        Command::Report(args) => cmd_report(&args, stdout),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SigmaMode {
    Fixed,
    Gmc,
    Gs,
    Mgda,
    AvgGrad,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveRequest {
    grads: Vec<Vec<f64>>,
    #[serde(default)]
    task_ids: Option<Vec<usize>>,
    sigma_mode: SigmaMode,
    #[serde(default)]
    sigma: Option<Vec<f64>>,
    #[serde(default = "one")]
    temperature: f64,
    #[serde(default)]
    tol: Option<f64>,
    #[serde(default)]
    max_iter: Option<usize>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize)]
struct SolveResponse {
    #[serde(flatten)]
    result: CombinationResult,
    sigma: Option<Vec<f64>>,
    pareto_ok: Option<bool>,
}

fn cmd_solve(stdin: &mut dyn Read, stdout: &mut dyn Write) -> CliResult<()> {
    let mut raw = Vec::new();
    stdin
        .read_to_end(&mut raw)
        .map_err(|e| CliError::input(format!("stdin: {e}")))?;
    let req: SolveRequest = parse_json(&raw, "request")?;
    let bundle = match req.task_ids {
        Some(ids) => GradientBundle::new(ids, req.grads),
        None => GradientBundle::from_grads(req.grads),
    }?;
    let defaults = SolverOptions::default();
    let opts = SolverOptions {
        tol: req.tol.unwrap_or(defaults.tol),
        max_iter: req.max_iter.unwrap_or(defaults.max_iter),
    };
    if req.sigma.is_some() && req.sigma_mode != SigmaMode::Fixed {
        return Err(CliError::input(
            "field `sigma` is only allowed with sigma_mode \"fixed\"",
        ));
    }
    let sigma = match req.sigma_mode {
        SigmaMode::Fixed => Some(ElasticFactors::new(req.sigma.ok_or_else(|| {
            CliError::input("missing field `sigma` for sigma_mode \"fixed\"")
        })?)?),
        SigmaMode::Gmc => Some(elastic_factors_gmc(
            &bundle,
            &mut ElasticState::new(req.temperature),
        )?),
        SigmaMode::Gs => Some(elastic_factors_gs(&bundle, req.temperature)?),
        SigmaMode::Mgda => Some(ElasticFactors::ones(bundle.len())),
        SigmaMode::AvgGrad => None,
    };
    let result = match (req.sigma_mode, &sigma) {
        (SigmaMode::AvgGrad, _) => avg_grad(&bundle),
        (SigmaMode::Mgda, _) => solve_mgda(&bundle, opts)?,
        (_, Some(s)) => solve_emgd(&bundle, s, opts)?,
        (_, None) => unreachable!("factors exist for every elastic mode"),
    };
    let converged = result.converged;
    let pareto_ok = sigma
        .as_ref()
        .map(|s| pareto_descent_check(&bundle, s, &result, 1e-8));
    let response = SolveResponse {
        result,
        sigma: sigma.map(|s| s.as_slice().to_vec()),
        pareto_ok,
    };
    stdout
        .write_all(to_json(&response).as_bytes())
        .map_err(|e| CliError::input(e.to_string()))?;
    if converged {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NOT_CONVERGED,
            message: "solver did not converge within max_iter".into(),
        })
    }
}

#[derive(Debug, Serialize)]
struct ToySummary {
    method: Method,
    iterations: usize,
    join_tick: usize,
    step: f64,
    start: [f64; 2],
    f1_join: f64,
    f2_join: f64,
    f1_final: f64,
    f2_final: f64,
    probe: ConvergenceReport,
}

fn cmd_run_toy(args: &ToyArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(path) => read_config::<ToyConfig>(path)?,
        None => ToyConfig::default(),
    };
    if let Some(m) = parse_flag::<Method>(&args.method)? {
        cfg.method = m;
    }
    if let Some(n) = args.iters {
        cfg.iterations = n;
    }
    let log = run_toy(&ConflictToy, &cfg)?;
    ensure_dir(&args.out)?;
    let mut trace = Vec::new();
    log.write_csv(&mut trace)?;
    write_file(&args.out.join("toy_trace.csv"), &trace)?;
    let join = cfg.join_tick.min(cfg.iterations);
    let at = |k: usize| log.values_at(k).expect("tick within run");
    let summary = ToySummary {
        method: cfg.method,
        iterations: cfg.iterations,
        join_tick: cfg.join_tick,
        step: cfg.step,
        start: cfg.start,
        f1_join: at(join)[0],
        f2_join: at(join)[1],
        f1_final: at(cfg.iterations)[0],
        f2_final: at(cfg.iterations)[1],
        probe: log.probe(),
    };
    write_file(
        &args.out.join("toy_summary.json"),
        to_json(&summary).as_bytes(),
    )?;
    writeln!(
        stdout,
        "{}: f1 {:.6} -> {:.6}, f2 {:.6} -> {:.6}",
        cfg.method, summary.f1_join, summary.f1_final, summary.f2_join, summary.f2_final
    )
    .map_err(|e| CliError::input(e.to_string()))
}

/// Where the data of a run or split comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Idx(IdxSource),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataSource {
    /// Relative IDX paths resolve against `base`.
    fn load(&self, seed: u64, base: &Path) -> CliResult<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => Ok(generate_synthetic(cfg, seed)?),
            DataSource::Idx(src) => {
                let resolve = |p: &PathBuf| base.join(p);
                for p in [
                    &src.train_images,
                    &src.train_labels,
                    &src.test_images,
                    &src.test_labels,
                ] {
                    if !resolve(p).exists() {
                        return Err(CliError::input(format!(
                            "data file {} not found",
                            resolve(p).display()
                        )));
                    }
                }
                let train = load_idx(&resolve(&src.train_images), &resolve(&src.train_labels))?;
                let test = load_idx(&resolve(&src.test_images), &resolve(&src.test_labels))?;
                Ok(Dataset::new(train, test)?)
            }
        }
    }
}

/// Label-set protocol of a run; tick windows follow the run's batch size and epochs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub num_tasks: usize,
    pub label_bounds: (usize, usize),
    #[serde(default)]
    pub overlap_fraction: f64,
    #[serde(default)]
    pub serial: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PclConfig {
    #[serde(default)]
    pub run: RunConfig,
    pub data: DataSource,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    /// A manifest written by `build-splits`; replaces `split`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Also write the memory buffer and the final network.
    #[serde(default)]
    pub snapshot: bool,
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_run_pcl(args: &PclArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg: PclConfig = read_config(&args.config)?;
    let base = config_base(&args.config);
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(m) = parse_flag::<Method>(&args.method)? {
        cfg.run.method = m;
    }
    if let Some(e) = parse_flag::<Editing>(&args.editing)? {
        cfg.run.editing = e;
    }
    if let Some(m) = parse_flag::<EvalMode>(&args.eval_mode)? {
        cfg.run.eval_mode = m;
    }
    cfg.run.validate()?;

    let (specs, timeline, split_seed) = match (&cfg.manifest, &cfg.split) {
        (Some(_), Some(_)) => {
            return Err(CliError::input("config sets both `split` and `manifest`"))
        }
        (None, None) => return Err(CliError::input("config needs either `split` or `manifest`")),
        (Some(path), None) => {
            let path = base.join(path);
            if !path.exists() {
                return Err(CliError::input(format!(
                    "split manifest {} not found",
                    path.display()
                )));
            }
            if args.serial || args.overlap.is_some() {
                return Err(CliError::input(
                    "--serial and --overlap apply to generated splits, not manifests",
                ));
            }
            let manifest: SplitManifest = read_config(&path)?;
            let dataset = cfg.data.load(manifest.seed, &base)?;
            let (specs, timeline) = manifest.apply(&dataset)?;
            (specs, timeline, manifest.seed)
        }
        (None, Some(spec)) => {
            let dataset = cfg.data.load(cfg.run.seed, &base)?;
            let split = SplitConfig {
                num_tasks: spec.num_tasks,
                label_bounds: spec.label_bounds,
                overlap_fraction: args.overlap.unwrap_or(spec.overlap_fraction),
                batch_size: cfg.run.batch_size,
                epochs: cfg.run.epochs,
                serial: spec.serial || args.serial,
            };
            let (specs, timeline) = build_parallel_split(&dataset, &split, cfg.run.seed)?;
            (specs, timeline, cfg.run.seed)
        }
    };

    let (output, net, buffer) = run_pcl_fresh(&specs, &timeline, &cfg.run)?;
    let metrics = output.metrics(&cfg.run)?;

    ensure_dir(&args.out)?;
    let mut log = Vec::new();
    write_tick_log(&mut log, &output.ticks)?;
    write_file(&args.out.join("tick_log.csv"), &log)?;
    write_file(&args.out.join("metrics.json"), to_json(&metrics).as_bytes())?;
    let manifest = SplitManifest::from_split(&specs, &timeline, split_seed)?;
    write_file(&args.out.join("split.json"), to_json(&manifest).as_bytes())?;
    if cfg.snapshot {
        let (mut data, mut meta, mut ckpt) = (Vec::new(), Vec::new(), Vec::new());
        buffer.write_snapshot(&mut data, &mut meta)?;
        net.write_checkpoint(&mut ckpt)?;
        write_file(&args.out.join("buffer.bin"), &data)?;
        write_file(&args.out.join("buffer.json"), &meta)?;
        write_file(&args.out.join("network.bin"), &ckpt)?;
    }
    writeln!(
        stdout,
        "{} editing={} {} seed={}: A={:.4} F={:.4}",
        metrics.method,
        metrics.editing,
        metrics.eval_mode,
        metrics.seed,
        metrics.a_final,
        metrics.f_final
    )
    .map_err(|e| CliError::input(e.to_string()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSplitsConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1234
}

fn cmd_build_splits(args: &SplitArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg: BuildSplitsConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(f) = args.overlap {
        cfg.split.overlap_fraction = f;
    }
    cfg.split.serial |= args.serial;
    let dataset = cfg.data.load(cfg.seed, &config_base(&args.config))?;
    let (specs, timeline) = build_parallel_split(&dataset, &cfg.split, cfg.seed)?;
    let manifest = SplitManifest::from_split(&specs, &timeline, cfg.seed)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("split.json");
    write_file(&path, to_json(&manifest).as_bytes())?;
    writeln!(stdout, "{}", path.display()).map_err(|e| CliError::input(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub editing: Editing,
    pub eval_mode: EvalMode,
    pub seeds: Vec<u64>,
    pub a_mean: f64,
    pub a_std: f64,
    pub f_mean: f64,
    pub f_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn is_metrics_file(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with("metrics.json"))
}

/// Every metrics file under `dir`, in path order.
pub fn collect_metrics(dir: &Path) -> CliResult<Vec<(PathBuf, RunMetrics)>> {
    if !dir.is_dir() {
        return Err(CliError::input(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::input(e.to_string()))?;
        if entry.file_type().is_file() && is_metrics_file(entry.path()) {
            let m: RunMetrics = parse_json(
                &read_file(entry.path())?,
                &entry.path().display().to_string(),
            )?;
            out.push((entry.path().to_path_buf(), m));
        }
    }
    if out.is_empty() {
        return Err(CliError::input(format!(
            "no metrics files under {}",
            dir.display()
        )));
    }
    Ok(out)
}

pub fn summarize(runs: &[(PathBuf, RunMetrics)]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(Method, Editing, EvalMode), Vec<&RunMetrics>> = BTreeMap::new();
    for (_, m) in runs {
        groups
            .entry((m.method, m.editing, m.eval_mode))
            .or_default()
            .push(m);
    }
    groups
        .into_iter()
        .map(|((method, editing, eval_mode), ms)| {
            let a: Vec<f64> = ms.iter().map(|m| m.a_final).collect();
            let f: Vec<f64> = ms.iter().map(|m| m.f_final).collect();
            let (a_mean, a_std) = mean_std(&a);
            let (f_mean, f_std) = mean_std(&f);
            ReportRow {
                method,
                editing,
                eval_mode,
                seeds: ms.iter().map(|m| m.seed).collect(),
                a_mean,
                a_std,
                f_mean,
                f_std,
            }
        })
        .collect()
}

fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let runs = collect_metrics(&args.run_dir)?;
    let rows = summarize(&runs);
    let header = [
        "method",
        "editing",
        "eval_mode",
        "seeds",
        "A (mean ± std)",
        "F (mean ± std)",
    ];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.method.to_string(),
                r.editing.to_string(),
                r.eval_mode.to_string(),
                r.seeds
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
                format!("{:.4} ± {:.4}", r.a_mean, r.a_std),
                format!("{:+.4} ± {:.4}", r.f_mean, r.f_std),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut table = line(&header.map(String::from)) + "\n";
    for row in &cells {
        table += &(line(row) + "\n");
    }
    stdout
        .write_all(table.as_bytes())
        .map_err(|e| CliError::input(e.to_string()))?;

    let out_dir = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    ensure_dir(&out_dir)?;
    let mut per_run = String::from("file,method,editing,eval_mode,seed,A_final,F_final\n");
    for (path, m) in &runs {
        let rel = path.strip_prefix(&args.run_dir).unwrap_or(path);
        per_run += &format!(
            "{},{},{},{},{},{},{}\n",
            rel.display(),
            m.method,
            m.editing,
            m.eval_mode,
            m.seed,
            m.a_final,
            m.f_final
        );
    }
    write_file(&out_dir.join("report_runs.csv"), per_run.as_bytes())?;
    let mut summary = String::from("method,editing,eval_mode,runs,A_mean,A_std,F_mean,F_std\n");
    for r in &rows {
        summary += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.editing,
            r.eval_mode,
            r.seeds.len(),
            r.a_mean,
            r.a_std,
            r.f_mean,
            r.f_std
        );
    }
    write_file(&out_dir.join("report_summary.csv"), summary.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_matches_hand_computation() {
        let (m, s) = mean_std(&[0.80, 0.84, 0.86]);
        assert!((m - 0.8333333333333334).abs() < 1e-15);
        // Σ(x−m)² = 0.0011111… + 0.0000444… + 0.0007111… = 0.0018666…; /2 → 0.0009333…
        assert!((s - 0.0009333333333333333f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from([
            "emgd",
            "run-pcl",
            "--config",
            "c.json",
            "--eval-mode",
            "class-incremental",
        ])
        .unwrap();
        assert!(
            matches!(cli.command, Command::RunPcl(PclArgs { ref eval_mode, .. }) if eval_mode.as_deref() == Some("class-incremental"))
        );
        assert!(Cli::try_parse_from(["emgd", "frobnicate"]).is_err());
    }
}
