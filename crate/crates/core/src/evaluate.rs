//! Clustering and recovery metrics against a known truth.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colgroup::csv_field;
use crate::linalg::SymMatrix;
use crate::model::{ColumnPartition, MixtureModel};
use crate::simulate::GroundTruth;
use crate::vem::FitDoc;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least two observations are needed")]
    TooFew,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("component count mismatch: {0} vs {1}")]
    ComponentMismatch(usize, usize),
    #[error("no estimates given")]
    Empty,
}

fn pairs(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<u64>>, usize, usize) {
    let ra = a.iter().max().map_or(0, |m| m + 1);
    let rb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0u64; rb]; ra];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1;
    }
    (t, ra, rb)
}

/// Hubert–Arabie adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFew);
    }
    let (t, _, _) = contingency(a, b);
    let index: f64 = t.iter().flatten().map(|&c| pairs(c)).sum();
    let sa: f64 = t.iter().map(|r| pairs(r.iter().sum())).sum();
    let sb: f64 = (0..t[0].len()).map(|j| pairs(t.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both partitions trivial in the same way
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Assignment maximizing total agreement in a (possibly rectangular) table.
/// Returns, for every row, the matched column if it is a real column.
fn best_assignment(table: &[Vec<u64>], cols: usize) -> (Vec<Option<usize>>, u64) {
    let size = table.len().max(cols).max(1);
    let weights = Matrix::from_fn(size, size, |(i, j)| {
        table.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as i64
    });
    let (total, assign) = kuhn_munkres(&weights);
    let rows = table.len();
    let map = assign[..rows].iter().map(|&j| (j < cols).then_some(j)).collect();
    (map, total as u64)
}

/// Fraction of variables in the wrong group under the best bijection of
/// group labels.
pub fn column_misclassification(truth: &ColumnPartition, est: &ColumnPartition) -> Result<f64, EvalError> {
    if truth.d() != est.d() {
        return Err(EvalError::DimMismatch(truth.d(), est.d()));
    }
    let (t, _, cols) = contingency(truth.labels(), est.labels());
    let (_, agree) = best_assignment(&t, cols);
    Ok(1.0 - agree as f64 / truth.d() as f64)
}

/// Matches each true component to an estimated one by maximizing the number
/// of observations the two share.
pub fn align_components(true_labels: &[usize], est_labels: &[usize], g_true: usize, g_est: usize) -> Result<Vec<Option<usize>>, EvalError> {
    if true_labels.len() != est_labels.len() {
        return Err(EvalError::LengthMismatch(true_labels.len(), est_labels.len()));
    }
    let mut t = vec![vec![0u64; g_est]; g_true];
    for (&a, &b) in true_labels.iter().zip(est_labels) {
        t[a][b] += 1;
    }
    Ok(best_assignment(&t, g_est).0)
}

/// Entry `(i, j)` counts the estimates with a nonzero `(i, j)` element.
pub fn support_count_heatmap(estimates: &[&SymMatrix]) -> Result<Vec<Vec<u32>>, EvalError> {
    let first = estimates.first().ok_or(EvalError::Empty)?;
    let d = first.dim();
    let mut out = vec![vec![0u32; d]; d];
    for e in estimates {
        if e.dim() != d {
            return Err(EvalError::DimMismatch(d, e.dim()));
        }
        for (i, row) in out.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                if e.get(i, j).abs() > 0.0 {
                    *c += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Per-component `mean_j (μ̂_gj − μ_gj)²` and `(π̂_g − π_g)²`, with components
/// aligned through the row labels.
pub fn param_mse(
    truth: &MixtureModel,
    est: &MixtureModel,
    true_labels: &[usize],
    est_labels: &[usize],
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    if truth.g() != est.g() {
        return Err(EvalError::ComponentMismatch(truth.g(), est.g()));
    }
    if truth.d() != est.d() {
        return Err(EvalError::DimMismatch(truth.d(), est.d()));
    }
    let align = align_components(true_labels, est_labels, truth.g(), est.g())?;
    let mut mu = Vec::new();
    let mut pi = Vec::new();
    for (g, a) in align.iter().enumerate() {
        let h = a.expect("square assignment");
        let sq: f64 = truth.mu[g].iter().zip(&est.mu[h]).map(|(x, y)| (x - y).powi(2)).sum();
        mu.push(sq / truth.d() as f64);
        pi.push((truth.pi[g] - est.pi[h]).powi(2));
    }
    Ok((mu, pi))
}

/// Metrics for one fitted replicate. Per-component entries follow the true
/// component order and are present only when the fitted G equals the true G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateEval {
    pub name: String,
    pub true_g: usize,
    pub true_k: Vec<usize>,
    pub selected_g: usize,
    pub selected_k: Vec<usize>,
    pub correct_selection: bool,
    pub row_ari: f64,
    pub col_misclass: Option<Vec<f64>>,
    pub col_misclass_mean: Option<f64>,
    pub mu_mse: Option<Vec<f64>>,
    pub pi_mse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation; 0 for fewer than two values.
    pub fn of(values: &[f64]) -> Option<MeanSd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanSd { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub replicates: usize,
    pub true_g: usize,
    pub true_k: Vec<usize>,
    pub correct_selections: usize,
    /// `"G=2;K=2,2"` → number of replicates.
    pub selection_counts: BTreeMap<String, usize>,
    pub row_ari: MeanSd,
    pub col_misclass: Option<MeanSd>,
    pub zero_col_misclass: usize,
    pub mu_mse: Option<Vec<MeanSd>>,
    pub pi_mse: Option<Vec<MeanSd>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub name: String,
    pub replicates: Vec<ReplicateEval>,
    pub summary: EvalSummary,
    /// Per true component, over the replicates whose fitted G matches.
    pub support_counts: Vec<Vec<Vec<u32>>>,
}

fn selection_key(g: usize, k: &[usize]) -> String {
    format!("G={g};K={}", k.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
}

/// Compares one fit against the truth it was simulated from.
pub fn evaluate_replicate(name: &str, truth: &GroundTruth, fit: &FitDoc) -> Result<ReplicateEval, EvalError> {
    let n = truth.row_labels.len();
    if fit.labels.len() != n {
        return Err(EvalError::LengthMismatch(n, fit.labels.len()));
    }
    if fit.model.d() != truth.model.d() {
        return Err(EvalError::DimMismatch(truth.model.d(), fit.model.d()));
    }
    let row_ari = ari(&truth.row_labels, &fit.labels)?;
    let true_k = truth.model.k_per_component();
    let same_g = fit.model.g() == truth.model.g();
    let (mut col, mut mu_mse, mut pi_mse) = (None, None, None);
    let mut correct = false;
    if same_g {
        let align = align_components(&truth.row_labels, &fit.labels, truth.model.g(), fit.model.g())?;
        let rates = align
            .iter()
            .enumerate()
            .map(|(g, h)| column_misclassification(&truth.column_partitions[g], &fit.model.grouping[h.expect("square")]))
            .collect::<Result<Vec<_>, _>>()?;
        correct = align.iter().enumerate().all(|(g, h)| fit.model.grouping[h.unwrap()].k() == true_k[g]);
        col = Some(rates);
        let (m, p) = param_mse(&truth.model, &fit.model, &truth.row_labels, &fit.labels)?;
        mu_mse = Some(m);
        pi_mse = Some(p);
    }
    Ok(ReplicateEval {
        name: name.to_string(),
        true_g: truth.model.g(),
        true_k,
        selected_g: fit.model.g(),
        selected_k: fit.model.k_per_component(),
        correct_selection: correct,
        row_ari,
        col_misclass_mean: col.as_ref().map(|c: &Vec<f64>| c.iter().sum::<f64>() / c.len() as f64),
        col_misclass: col,
        mu_mse,
        pi_mse,
    })
}

fn per_component(reps: &[&ReplicateEval], get: impl Fn(&ReplicateEval) -> Option<&Vec<f64>>, g: usize) -> Option<Vec<MeanSd>> {
    let rows: Vec<&Vec<f64>> = reps.iter().filter_map(|r| get(r)).collect();
    if rows.is_empty() {
        return None;
    }
    (0..g).map(|c| MeanSd::of(&rows.iter().map(|r| r[c]).collect::<Vec<_>>())).collect()
}

/// Evaluates a set of replicates sharing the same generative structure.
pub fn evaluate_replicates(name: &str, runs: &[(String, GroundTruth, FitDoc)]) -> Result<EvalReport, EvalError> {
    let (_, first, _) = runs.first().ok_or(EvalError::Empty)?;
    let g = first.model.g();
    let d = first.model.d();
    let mut reps = Vec::with_capacity(runs.len());
    let mut support: Vec<Vec<&SymMatrix>> = vec![Vec::new(); g];
    for (rep_name, truth, fit) in runs {
        if truth.model.g() != g {
            return Err(EvalError::ComponentMismatch(g, truth.model.g()));
        }
        if truth.model.d() != d {
            return Err(EvalError::DimMismatch(d, truth.model.d()));
        }
        let r = evaluate_replicate(rep_name, truth, fit)?;
        if r.selected_g == g {
            let align = align_components(&truth.row_labels, &fit.labels, g, g)?;
            for (c, h) in align.iter().enumerate() {
                support[c].push(&fit.model.sigma[h.expect("square")]);
            }
        }
        reps.push(r);
    }
    let refs: Vec<&ReplicateEval> = reps.iter().collect();
    let mut selection_counts = BTreeMap::new();
    for r in &reps {
        *selection_counts.entry(selection_key(r.selected_g, &r.selected_k)).or_insert(0) += 1;
    }
    let misclass: Vec<f64> = reps.iter().filter_map(|r| r.col_misclass_mean).collect();
    let summary = EvalSummary {
        replicates: reps.len(),
        true_g: g,
        true_k: first.model.k_per_component(),
        correct_selections: reps.iter().filter(|r| r.correct_selection).count(),
        selection_counts,
        row_ari: MeanSd::of(&reps.iter().map(|r| r.row_ari).collect::<Vec<_>>()).expect("nonempty"),
        col_misclass: MeanSd::of(&misclass),
        zero_col_misclass: misclass.iter().filter(|&&m| m == 0.0).count(),
        mu_mse: per_component(&refs, |r| r.mu_mse.as_ref(), g),
        pi_mse: per_component(&refs, |r| r.pi_mse.as_ref(), g),
    };
    let support_counts = support
        .iter()
        .map(|s| if s.is_empty() { Ok(vec![vec![0; d]; d]) } else { support_count_heatmap(s) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport { name: name.to_string(), replicates: reps, summary, support_counts })
}

pub fn counts_csv(counts: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for row in counts {
        out.push_str(&row.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Binary P5 image; the largest count maps to 255.
pub fn counts_pgm(counts: &[Vec<u32>]) -> Vec<u8> {
    let h = counts.len();
    let w = counts.first().map_or(0, Vec::len);
    let max = counts.iter().flatten().copied().max().unwrap_or(0);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in counts {
        for &c in row {
            out.push(if max == 0 { 0 } else { ((c as f64 * 255.0 / max as f64).round()) as u8 });
        }
    }
    out
}

const TABLE_HEADER: [&str; 10] =
    ["study", "G", "K", "replicates", "ARI", "selected", "col_misclass_pct", "zero_misclass", "mu_mse", "pi_mse"];

fn table_row(r: &EvalReport) -> Vec<String> {
    let s = &r.summary;
    let ks = s.true_k.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    let fmt_list = |v: &Option<Vec<MeanSd>>| match v {
        Some(v) => v.iter().map(|m| format!("{:.4}", m.mean)).collect::<Vec<_>>().join(";"),
        None => "NA".into(),
    };
    vec![
        r.name.clone(),
        s.true_g.to_string(),
        ks,
        s.replicates.to_string(),
        format!("{:.3} ({:.3})", s.row_ari.mean, s.row_ari.sd),
        s.correct_selections.to_string(),
        s.col_misclass.map_or("NA".into(), |m| format!("{:.2} ({:.2})", 100.0 * m.mean, 100.0 * m.sd)),
        s.zero_col_misclass.to_string(),
        fmt_list(&s.mu_mse),
        fmt_list(&s.pi_mse),
    ]
}

/// Plain-text and CSV summary tables, one row per report.
pub fn report_table(reports: &[EvalReport]) -> Result<(String, String), EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows: Vec<Vec<String>> = reports.iter().map(table_row).collect();
    let mut widths: Vec<usize> = TABLE_HEADER.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string() + "\n"
    };
    let mut text = line(TABLE_HEADER.iter().map(|s| s.to_string()).collect());
    let mut csv = TABLE_HEADER.join(",") + "\n";
    for row in rows {
        csv.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        csv.push('\n');
        text.push_str(&line(row));
    }
    Ok((text, csv))
}
