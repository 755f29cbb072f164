//! Model selection over the number of row clusters and column groups.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colgroup::csv_field;
use crate::data::{CountMatrix, OffsetVector};
use crate::vem::{self, FitConfig, FitError, FitResult, KSpec};

/// `2 · lower_bound − p · log n`; larger is better.
pub fn bic(lower_bound: f64, p: usize, n: usize) -> f64 {
    assert!(p >= 1 && n >= 1, "bic needs p >= 1 and n >= 1 (got p = {p}, n = {n})");
    2.0 * lower_bound - p as f64 * (n as f64).ln()
}

/// Checked form of [`bic`].
pub fn try_bic(lower_bound: f64, p: usize, n: usize) -> Result<f64, FitError> {
    if p == 0 || n == 0 {
        return Err(FitError::InvalidInput(format!("bic needs p >= 1 and n >= 1 (got p = {p}, n = {n})")));
    }
    Ok(bic(lower_bound, p, n))
}

/// One fitted (or failed) cell of a selection grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(rename = "G")]
    pub g: usize,
    pub k_spec: String,
    pub k_selected: Vec<usize>,
    pub lower_bound: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time_ms: u64,
    pub error: Option<String>,
}

impl GridCell {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub g_values: Vec<usize>,
    /// Equal-K mode: the K values tried.
    pub k_values: Option<Vec<usize>>,
    /// Varying-K mode: the per-component upper bound.
    pub k_max: Option<usize>,
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the selected model.
    pub best: usize,
}

impl SelectionGrid {
    /// `G,K_spec,K_selected,lower_bound,p,BIC,converged,iterations,wall_time_ms,error`.
    /// With `timing = false` the wall-time column is left empty so that
    /// repeated runs produce identical files.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("G,K_spec,K_selected,lower_bound,p,BIC,converged,iterations,wall_time_ms,error\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for c in &self.cells {
            let ks = c.k_selected.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.g,
                csv_field(&c.k_spec),
                csv_field(&ks),
                opt(c.lower_bound),
                c.n_params.map(|p| p.to_string()).unwrap_or_default(),
                opt(c.bic),
                c.converged,
                c.iterations,
                if timing { c.wall_time_ms.to_string() } else { String::new() },
                csv_field(c.error.as_deref().unwrap_or("")),
            ));
        }
        out
    }
}

struct Job {
    g: usize,
    k_spec: KSpec,
    seed: u64,
}

fn run_grid(
    counts: &CountMatrix,
    offsets: &OffsetVector,
    jobs: Vec<Job>,
    config: &FitConfig,
) -> (Vec<GridCell>, Vec<Option<FitResult>>) {
    let outcomes: Vec<(GridCell, Option<FitResult>)> = jobs
        .into_par_iter()
        .map(|job| {
            let cfg = FitConfig { seed: job.seed, ..config.clone() };
            let start = Instant::now();
            let res = vem::fit(counts, offsets, job.g, &job.k_spec, &cfg);
            let wall_time_ms = start.elapsed().as_millis() as u64;
            let k_spec = job.k_spec.label();
            match res {
                Ok(fit) => (
                    GridCell {
                        g: job.g,
                        k_spec,
                        k_selected: fit.k_per_component(),
                        lower_bound: Some(fit.lower_bound),
                        n_params: Some(fit.n_params),
                        bic: Some(fit.bic),
                        converged: fit.converged,
                        iterations: fit.iterations,
                        wall_time_ms,
                        error: None,
                    },
                    Some(fit),
                ),
                Err(e) => (
                    GridCell {
                        g: job.g,
                        k_spec,
                        k_selected: Vec::new(),
                        lower_bound: None,
                        n_params: None,
                        bic: None,
                        converged: false,
                        iterations: 0,
                        wall_time_ms,
                        error: Some(e.to_string()),
                    },
                    None,
                ),
            }
        })
        .collect();
    outcomes.into_iter().unzip()
}

/// Largest BIC among converged cells (all successful cells if none
/// converged); ties go to the earlier cell, i.e. smaller G then K.
fn pick_best(cells: &[GridCell]) -> Option<usize> {
    let best_of = |need_converged: bool| {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in cells.iter().enumerate() {
            if let Some(b) = c.bic {
                if need_converged && !c.converged {
                    continue;
                }
                if best.is_none_or(|(_, v)| b > v) {
                    best = Some((i, b));
                }
            }
        }
        best.map(|(i, _)| i)
    };
    best_of(true).or_else(|| best_of(false))
}

fn check_common(counts: &CountMatrix, g_max: usize, config: &FitConfig) -> Result<(), FitError> {
    config.validate()?;
    if counts.n() < 2 {
        return Err(FitError::InvalidInput("at least two observations are required".into()));
    }
    if g_max == 0 || g_max > counts.n() {
        return Err(FitError::InvalidInput(format!("g_max = {g_max} outside 1..={}", counts.n())));
    }
    Ok(())
}

/// Fits every `(G, K)` with `G ≤ g_max`, `K ≤ k_max` and the same `K` in all
/// components; the cell with index `t` (row-major over G then K) uses seed
/// `config.seed ^ t`.
pub fn grid_search_equal_k(
    counts: &CountMatrix,
    offsets: &OffsetVector,
    g_max: usize,
    k_max: usize,
    config: &FitConfig,
) -> Result<(FitResult, SelectionGrid), FitError> {
    check_common(counts, g_max, config)?;
    if k_max == 0 || k_max > counts.d() {
        return Err(FitError::InvalidInput(format!("k_max = {k_max} outside 1..={}", counts.d())));
    }
    let jobs = (1..=g_max)
        .flat_map(|g| (1..=k_max).map(move |k| (g, k)))
        .enumerate()
        .map(|(t, (g, k))| Job { g, k_spec: KSpec::Equal(k), seed: config.seed ^ t as u64 })
        .collect();
    let (cells, mut fits) = run_grid(counts, offsets, jobs, config);
    let best = pick_best(&cells).ok_or(FitError::AllCellsFailed)?;
    let fit = fits[best].take().expect("successful cell");
    let grid = SelectionGrid {
        g_values: (1..=g_max).collect(),
        k_values: Some((1..=k_max).collect()),
        k_max: None,
        cells,
        best,
    };
    Ok((fit, grid))
}

/// For each `G ≤ g_max`, fits with every component's `K_g` chosen by the
/// average silhouette (at most `k_max`), then selects `G` by BIC.
pub fn fit_varying_k(
    counts: &CountMatrix,
    offsets: &OffsetVector,
    g_max: usize,
    k_max: usize,
    config: &FitConfig,
) -> Result<(FitResult, SelectionGrid), FitError> {
    check_common(counts, g_max, config)?;
    if k_max < 2 || k_max > counts.d() {
        return Err(FitError::InvalidInput(format!("k_max = {k_max} outside 2..={}", counts.d())));
    }
    let jobs = (1..=g_max)
        .map(|g| Job { g, k_spec: KSpec::Auto { k_max }, seed: config.seed ^ (g - 1) as u64 })
        .collect();
    let (cells, mut fits) = run_grid(counts, offsets, jobs, config);
    let best = pick_best(&cells).ok_or(FitError::AllCellsFailed)?;
    let fit = fits[best].take().expect("successful cell");
    let grid = SelectionGrid { g_values: (1..=g_max).collect(), k_values: None, k_max: Some(k_max), cells, best };
    Ok((fit, grid))
}
