//! Command-line front end: `simulate`, `fit`, `evaluate` and `report`.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for usage and
//! configuration errors (bad flags, unreadable or inconsistent inputs).
//!
//! Every run resolves its settings from built-in defaults, then an optional
//! flat JSON file given by `--config`, then command-line flags, and archives
//! the result as `<command>_config.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::colgroup::{self, Linkage};
use crate::data::{self, CountMatrix, Format, OffsetMethod, OffsetVector};
use crate::evaluate::{self, EvalReport};
use crate::select::{self, SelectionGrid};
use crate::simulate::{self, GroundTruth, SimSpec};
use crate::vem::{FitConfig, FitDoc, FitResult};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files; exit code 2.
    Usage(String),
    /// A computation failed; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "blockmpln", version, about = "Biclustering of count data with block-diagonal Poisson-lognormal mixtures")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Leave timing columns empty so repeated runs give identical files.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Flat JSON file with default values for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw datasets from a preset or a JSON spec.
    Simulate(SimulateArgs),
    /// Fit a grid of models and keep the best by BIC.
    Fit(FitArgs),
    /// Compare fitted models with the truth they were simulated from.
    Evaluate(EvaluateArgs),
    /// Summarize evaluation reports in one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Study preset, 1 to 12.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<u32>,
    /// JSON simulation spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of datasets; replicate r uses seed + r and goes to rep001, rep002, ...
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    EqualK,
    VaryingK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OffsetArg {
    Unit,
    Libsize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Count matrix, CSV or TSV (by extension).
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Offsets, one positive value per line.
    #[arg(long, conflicts_with = "offset_method")]
    pub offsets: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub offset_method: Option<OffsetArg>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub gmax: Option<usize>,
    #[arg(long)]
    pub kmax: Option<usize>,
    /// Keep only the most variable columns.
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub n_starts: Option<usize>,
    #[arg(long)]
    pub screen_iter: Option<usize>,
    #[arg(long)]
    pub max_em_iter: Option<usize>,
    #[arg(long)]
    pub elbo_rel_tol: Option<f64>,
    #[arg(long)]
    pub inner_iter: Option<usize>,
    #[arg(long)]
    pub inner_tol: Option<f64>,
    #[arg(long)]
    pub linkage: Option<Linkage>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Truth JSON written by `simulate`.
    #[arg(long, requires = "fit", conflicts_with = "dir")]
    pub truth: Option<PathBuf>,
    /// Model JSON written by `fit`.
    #[arg(long, requires = "truth")]
    pub fit: Option<PathBuf>,
    /// Replicate directory: itself or each subdirectory holds truth.json and best_model.json.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Label used in reports (default: directory name).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files or directories containing one.
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Flat run configuration; every field is optional so that files, flags and
/// defaults can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_timestamp: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offsets: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_method: Option<OffsetArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmax: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kmax: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_starts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub screen_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_em_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo_rel_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linkage: Option<Linkage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<PathBuf>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:expr, $top:expr; $($f:ident),* $(,)?) => {{
        let (base, top) = ($base, $top);
        RunConfig { $($f: top.$f.or(base.$f)),* }
    }};
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Values set in `top` win over those in `self`.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        overlay!(self, top;
            seed, jobs, no_timestamp, preset, spec, replicates, counts, offsets, offset_method, mode,
            gmax, kmax, top_n, n_starts, screen_iter, max_em_iter, elbo_rel_tol, inner_iter, inner_tol,
            linkage, truth, fit, dir, name, inputs, out)
    }

    fn from_cli(cli: &Cli) -> RunConfig {
        let mut c = RunConfig {
            seed: cli.seed,
            jobs: cli.jobs,
            no_timestamp: cli.no_timestamp.then_some(true),
            ..RunConfig::default()
        };
        match &cli.command {
            Command::Simulate(a) => {
                c.preset = a.preset;
                c.spec = a.spec.clone();
                c.replicates = a.replicates;
                c.out = a.out.clone();
            }
            Command::Fit(a) => {
                c.counts = a.counts.clone();
                c.offsets = a.offsets.clone();
                c.offset_method = a.offset_method;
                c.mode = a.mode;
                c.gmax = a.gmax;
                c.kmax = a.kmax;
                c.top_n = a.top_n;
                c.n_starts = a.n_starts;
                c.screen_iter = a.screen_iter;
                c.max_em_iter = a.max_em_iter;
                c.elbo_rel_tol = a.elbo_rel_tol;
                c.inner_iter = a.inner_iter;
                c.inner_tol = a.inner_tol;
                c.linkage = a.linkage;
                c.out = a.out.clone();
            }
            Command::Evaluate(a) => {
                c.truth = a.truth.clone();
                c.fit = a.fit.clone();
                c.dir = a.dir.clone();
                c.name = a.name.clone();
                c.out = a.out.clone();
            }
            Command::Report(a) => {
                c.inputs = (!a.inputs.is_empty()).then(|| a.inputs.clone());
                c.out = a.out.clone();
            }
        }
        c
    }

    /// Fit settings with every default filled in.
    pub fn resolved_fit(&self) -> RunConfig {
        let f = self.fit_config();
        let mode = self.mode.unwrap_or(Mode::EqualK);
        RunConfig {
            mode: Some(mode),
            gmax: Some(self.gmax.unwrap_or(3)),
            kmax: Some(self.kmax.unwrap_or(match mode {
                Mode::EqualK => 3,
                Mode::VaryingK => 5,
            })),
            offset_method: self.offset_method.or(self.offsets.is_none().then_some(OffsetArg::Unit)),
            seed: Some(f.seed),
            n_starts: Some(f.n_starts),
            screen_iter: Some(f.screen_iter),
            max_em_iter: Some(f.max_em_iter),
            elbo_rel_tol: Some(f.elbo_rel_tol),
            inner_iter: Some(f.inner_iter),
            inner_tol: Some(f.inner_tol),
            linkage: Some(f.linkage),
            ..self.clone()
        }
    }

    fn timing(&self) -> bool {
        !self.no_timestamp.unwrap_or(false)
    }

    fn fit_config(&self) -> FitConfig {
        let d = FitConfig::default();
        FitConfig {
            max_em_iter: self.max_em_iter.unwrap_or(d.max_em_iter),
            elbo_rel_tol: self.elbo_rel_tol.unwrap_or(d.elbo_rel_tol),
            inner_iter: self.inner_iter.unwrap_or(d.inner_iter),
            inner_tol: self.inner_tol.unwrap_or(d.inner_tol),
            n_starts: self.n_starts.unwrap_or(d.n_starts),
            screen_iter: self.screen_iter.unwrap_or(d.screen_iter),
            seed: self.seed.unwrap_or(d.seed),
            linkage: self.linkage.unwrap_or(d.linkage),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn archive(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write(&dir.join(format!("{command}_config.json")), to_json(cfg))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required --{flag}")))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    let out = required(&cfg.out, "out")?;
    let mut spec: SimSpec = match (&cfg.preset, &cfg.spec) {
        (Some(id), None) => simulate::preset(*id).map_err(usage)?,
        (None, Some(path)) => read_json(path)?,
        (Some(_), Some(_)) => return Err(usage("--preset and --spec are mutually exclusive")),
        (None, None) => return Err(usage("one of --preset or --spec is required")),
    };
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(usage)?;
    let replicates = cfg.replicates.unwrap_or(1);
    if replicates == 0 {
        return Err(usage("--replicates must be at least 1"));
    }
    create_dir(&out)?;
    let width = replicates.to_string().len().max(3);
    for r in 0..replicates {
        let rep_spec = SimSpec { seed: spec.seed.wrapping_add(r as u64), ..spec.clone() };
        let dir = if replicates == 1 { out.clone() } else { out.join(format!("rep{:0width$}", r + 1)) };
        create_dir(&dir)?;
        let (counts, truth) = simulate::sample_dataset(&rep_spec).map_err(runtime)?;
        write(&dir.join("counts.csv"), data::format_counts(&counts, Format::Csv))?;
        data::save_offsets(&rep_spec.offset_vector(), dir.join("offsets.txt")).map_err(runtime)?;
        write(&dir.join("truth.json"), to_json(&truth))?;
        write(&dir.join("spec.json"), to_json(&rep_spec))?;
    }
    let resolved = RunConfig { replicates: Some(replicates), seed: Some(spec.seed), ..cfg.clone() };
    archive(&out, "simulate", &resolved)?;
    Ok(format!(
        "simulated {replicates} dataset(s) of {}x{} with G={} into {}",
        spec.n,
        spec.d,
        spec.g(),
        out.display()
    ))
}

/// Fitted grid plus the data it was fitted to.
pub struct FitOutput {
    pub counts: CountMatrix,
    pub best: FitResult,
    pub grid: SelectionGrid,
}

pub fn run_fit(cfg: &RunConfig) -> Result<FitOutput> {
    let path = required(&cfg.counts, "counts")?;
    if !path.exists() {
        return Err(usage(format!("{}: no such file", path.display())));
    }
    let counts = data::load_counts(&path, Format::from_path(&path)).map_err(usage)?;
    let offsets = match (&cfg.offsets, cfg.offset_method) {
        (Some(p), _) => data::load_offsets(p, counts.n()).map_err(usage)?,
        (None, Some(OffsetArg::Libsize)) => data::compute_offsets(&counts, OffsetMethod::LibSize).map_err(usage)?,
        (None, _) => OffsetVector::unit(counts.n()),
    };
    let counts = match cfg.top_n {
        Some(t) => data::filter_top_variable(&counts, t).map_err(usage)?,
        None => counts,
    };
    let cfg = cfg.resolved_fit();
    let fit_cfg = cfg.fit_config();
    fit_cfg.validate().map_err(usage)?;
    let (gmax, kmax, mode) = (cfg.gmax.expect("resolved"), cfg.kmax.expect("resolved"), cfg.mode.expect("resolved"));
    let result = match mode {
        Mode::EqualK => select::grid_search_equal_k(&counts, &offsets, gmax, kmax, &fit_cfg),
        Mode::VaryingK => select::fit_varying_k(&counts, &offsets, gmax, kmax, &fit_cfg),
    };
    match result {
        Ok((best, grid)) => Ok(FitOutput { counts, best, grid }),
        Err(crate::vem::FitError::InvalidInput(m)) | Err(crate::vem::FitError::InvalidConfig(m)) => Err(usage(m)),
        Err(e) => Err(runtime(e)),
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String> {
    let out = required(&cfg.out, "out")?;
    let FitOutput { counts, best, grid } = run_fit(cfg)?;
    for cell in grid.cells.iter().filter(|c| !c.ok()) {
        eprintln!("warning: cell G={} K={} failed: {}", cell.g, cell.k_spec, cell.error.as_deref().unwrap_or(""));
    }
    create_dir(&out)?;
    write(&out.join("best_model.json"), to_json(&best.to_doc(counts.sample_ids())))?;
    write(&out.join("labels.csv"), best.labels_csv(counts.sample_ids()))?;
    write(&out.join("grid.csv"), grid.to_csv(cfg.timing()))?;
    write(&out.join("elbo_trace.csv"), best.trace_csv())?;
    write(&out.join("partitions.csv"), colgroup::partitions_csv(counts.var_names(), &best.model.grouping))?;
    archive(&out, "fit", &cfg.resolved_fit())?;
    Ok(format!(
        "best model G={} K={:?} BIC={:.3} ({} cells) written to {}",
        best.g(),
        best.k_per_component(),
        best.bic,
        grid.cells.len(),
        out.display()
    ))
}

fn replicate_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let has_pair = |p: &Path| p.join("truth.json").is_file() && p.join("best_model.json").is_file();
    if has_pair(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| has_pair(p)).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(usage(format!("{}: no truth.json/best_model.json pairs found", dir.display())));
    }
    Ok(dirs)
}

fn file_label(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (&cfg.truth, &cfg.fit, &cfg.dir) {
        (Some(t), Some(f), None) => vec![(file_label(f), t.clone(), f.clone())],
        (None, None, Some(d)) => replicate_dirs(d)?
            .into_iter()
            .map(|p| (file_label(&p), p.join("truth.json"), p.join("best_model.json")))
            .collect(),
        _ => return Err(usage("give either --truth and --fit, or --dir")),
    };
    let mut runs = Vec::with_capacity(pairs.len());
    for (label, t, f) in &pairs {
        let truth: GroundTruth = read_json(t)?;
        let fit: FitDoc = read_json(f)?;
        // check each pair here so that errors name the files involved
        evaluate::evaluate_replicate(label, &truth, &fit)
            .map_err(|e| usage(format!("{} vs {}: {e}", t.display(), f.display())))?;
        runs.push((label.clone(), truth, fit));
    }
    let name = cfg.name.clone().unwrap_or_else(|| match &cfg.dir {
        Some(d) => file_label(d),
        None => file_label(pairs[0].1.parent().unwrap_or(Path::new("."))),
    });
    evaluate::evaluate_replicates(&name, &runs).map_err(usage)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let report = run_evaluate(cfg)?;
    let out = match (&cfg.out, &cfg.dir, &cfg.fit) {
        (Some(o), _, _) => o.clone(),
        (None, Some(d), _) => d.clone(),
        (None, None, Some(f)) => f.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        _ => PathBuf::from("."),
    };
    create_dir(&out)?;
    write(&out.join("report.json"), to_json(&report))?;
    archive(&out, "evaluate", cfg)?;
    for (g, counts) in report.support_counts.iter().enumerate() {
        write(&out.join(format!("support_g{}.csv", g + 1)), evaluate::counts_csv(counts))?;
        write(&out.join(format!("support_g{}.pgm", g + 1)), evaluate::counts_pgm(counts))?;
    }
    let s = &report.summary;
    Ok(format!(
        "{}: {} replicate(s), ARI {:.3} ({:.3}), correct selection {}/{}",
        report.name, s.replicates, s.row_ari.mean, s.row_ari.sd, s.correct_selections, s.replicates
    ))
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let inputs = cfg.inputs.clone().unwrap_or_default();
    if inputs.is_empty() {
        return Err(usage("no reports given"));
    }
    let reports = inputs
        .iter()
        .map(|p| read_json::<EvalReport>(&if p.is_dir() { p.join("report.json") } else { p.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let (text, csv) = evaluate::report_table(&reports).map_err(usage)?;
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write(&out.join("summary.txt"), &text)?;
        write(&out.join("summary.csv"), &csv)?;
        archive(out, "report", cfg)?;
    }
    Ok(text.trim_end().to_string())
}

/// Resolves configuration layers and runs the selected command.
pub fn run(cli: &Cli) -> Result<String> {
    let file_cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&read_to_string(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    let cfg = file_cfg.overlay(RunConfig::from_cli(cli));
    let exec = || match &cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Report(_) => cmd_report(&cfg),
    };
    match cfg.jobs {
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(runtime)?.install(exec),
        None => exec(),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
