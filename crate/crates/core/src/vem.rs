//! Variational EM for mixtures of block-diagonal Poisson-lognormal components.
//!
//! One iteration:
//! 1. responsibilities from the current bounds and mixing proportions;
//! 2. per observation and component, alternating fixed-point updates of the
//!    variational covariance and Newton steps on the variational mean;
//! 3. mixing proportions and means;
//! 4. per component, the unrestricted scatter `W_g`, a column grouping found
//!    by hierarchical clustering of `1 − corr²`, and the block projection of
//!    `W_g` as the new covariance.
//!
//! The recorded objective is `Σ_i log Σ_g π_g exp F_ig`, which every step
//! above leaves nondecreasing as long as a proposed grouping is only accepted
//! when it does not lower the covariance term (see [`choose_grouping`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colgroup::{self, GroupCount, Linkage};
use crate::data::{CountMatrix, OffsetVector};
use crate::linalg::{block_inverse_pd, cholesky, cholesky_jittered, LinalgError, SymMatrix};
use crate::model::{
    complete_lower_bound, count_free_parameters, elbo_with, log_factorial_sum, marginal_bound,
    responsibilities, ColumnPartition, ComponentTerms, MixtureModel, VariationalState,
};
use crate::select::bic;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("component {component} is empty (restart {restart})")]
    EmptyComponent { component: usize, restart: usize },
    #[error("numerical failure in restart {restart}: {source}")]
    Numerical { restart: usize, source: LinalgError },
    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: Box<FitError> },
    #[error("every grid cell failed")]
    AllCellsFailed,
}

const fn default_max_em_iter() -> usize {
    500
}
const fn default_elbo_rel_tol() -> f64 {
    1e-6
}
const fn default_inner_iter() -> usize {
    10
}
const fn default_inner_tol() -> f64 {
    1e-6
}
const fn default_n_starts() -> usize {
    5
}
const fn default_screen_iter() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_max_em_iter")]
    pub max_em_iter: usize,
    #[serde(default = "default_elbo_rel_tol")]
    pub elbo_rel_tol: f64,
    #[serde(default = "default_inner_iter")]
    pub inner_iter: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    /// Iterations every start runs before only the best one continues;
    /// 0 runs all starts to convergence.
    #[serde(default = "default_screen_iter")]
    pub screen_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub linkage: Linkage,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iter: default_max_em_iter(),
            elbo_rel_tol: default_elbo_rel_tol(),
            inner_iter: default_inner_iter(),
            inner_tol: default_inner_tol(),
            n_starts: default_n_starts(),
            screen_iter: default_screen_iter(),
            seed: 0,
            linkage: Linkage::Average,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.max_em_iter == 0 || self.inner_iter == 0 || self.n_starts == 0 {
            return Err(FitError::InvalidConfig("iteration counts and n_starts must be at least 1".into()));
        }
        if !(self.elbo_rel_tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(FitError::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// How many column groups each component gets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KSpec {
    /// Same `K` in every component.
    Equal(usize),
    /// One fixed `K_g` per component.
    PerGroup(Vec<usize>),
    /// `K_g` re-chosen every iteration by the largest average silhouette.
    Auto { k_max: usize },
}

impl KSpec {
    fn count_for(&self, g: usize) -> GroupCount {
        match self {
            KSpec::Equal(k) => GroupCount::Fixed(*k),
            KSpec::PerGroup(ks) => GroupCount::Fixed(ks[g]),
            KSpec::Auto { k_max } => GroupCount::Silhouette { k_max: *k_max },
        }
    }

    fn validate(&self, g: usize, d: usize) -> Result<(), FitError> {
        let bad = |msg: String| Err(FitError::InvalidInput(msg));
        match self {
            KSpec::Equal(k) if *k == 0 || *k > d => bad(format!("K = {k} outside 1..={d}")),
            KSpec::PerGroup(ks) if ks.len() != g => bad(format!("{} K values for G = {g}", ks.len())),
            KSpec::PerGroup(ks) if ks.iter().any(|&k| k == 0 || k > d) => bad(format!("K values {ks:?} outside 1..={d}")),
            KSpec::Auto { k_max } if *k_max < 2 || *k_max > d => bad(format!("k_max = {k_max} outside 2..={d}")),
            _ => Ok(()),
        }
    }

    /// Short label used in reports, e.g. `2`, `2;3` or `auto<=5`.
    pub fn label(&self) -> String {
        match self {
            KSpec::Equal(k) => k.to_string(),
            KSpec::PerGroup(ks) => ks.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            KSpec::Auto { k_max } => format!("auto<={k_max}"),
        }
    }
}

/// Counts prepared for fitting: floating-point rows, log offsets and the
/// per-row `Σ log y!` constant.
#[derive(Debug, Clone)]
pub struct FitData {
    pub y: Vec<Vec<f64>>,
    pub log_c: Vec<f64>,
    pub log_fact: Vec<f64>,
}

impl FitData {
    pub fn new(counts: &CountMatrix, offsets: &OffsetVector) -> Result<Self, FitError> {
        offsets
            .check_len(counts.n())
            .map_err(|e| FitError::InvalidInput(e.to_string()))?;
        let y: Vec<Vec<f64>> = (0..counts.n())
            .map(|i| counts.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        let log_fact = y.iter().map(|r| log_factorial_sum(r)).collect();
        Ok(Self { y, log_c: offsets.log_values(), log_fact })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MixtureModel,
    pub state: VariationalState,
    pub row_labels: Vec<usize>,
    /// Objective at initialization followed by one value per iteration.
    pub elbo_trace: Vec<f64>,
    /// Complete-data bound `Σ Ẑ (log π + F)` at the final parameters.
    pub lower_bound: f64,
    pub n_params: usize,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restart: usize,
    /// Final silhouette scores per component when `K_g` was auto-selected.
    pub silhouettes: Option<Vec<BTreeMap<usize, f64>>>,
}

impl FitResult {
    pub fn g(&self) -> usize {
        self.model.g()
    }

    pub fn k_per_component(&self) -> Vec<usize> {
        self.model.k_per_component()
    }

    pub fn to_doc(&self, sample_ids: &[String]) -> FitDoc {
        FitDoc {
            g: self.g(),
            k: self.k_per_component(),
            lower_bound: self.lower_bound,
            n_params: self.n_params,
            bic: self.bic,
            converged: self.converged,
            iterations: self.iterations,
            restart: self.restart,
            sample_ids: sample_ids.to_vec(),
            labels: self.row_labels.clone(),
            elbo_trace: self.elbo_trace.clone(),
            model: self.model.clone(),
        }
    }

    /// `sample_id,cluster` with 1-based clusters.
    pub fn labels_csv(&self, sample_ids: &[String]) -> String {
        let mut out = String::from("sample_id,cluster\n");
        for (id, l) in sample_ids.iter().zip(&self.row_labels) {
            out.push_str(&format!("{},{}\n", colgroup::csv_field(id), l + 1));
        }
        out
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,elbo\n");
        for (t, v) in self.elbo_trace.iter().enumerate() {
            out.push_str(&format!("{t},{v:?}\n"));
        }
        out
    }
}

/// JSON form of a fit: the model plus selection metadata. Labels are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDoc {
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub lower_bound: f64,
    pub n_params: usize,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restart: usize,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub elbo_trace: Vec<f64>,
    pub model: MixtureModel,
}

/// SplitMix64 finalizer; used to derive independent seeds from one integer.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Step 2: variational updates

/// Result of the inner loop for one observation and component.
#[derive(Debug, Clone)]
pub struct VariationalUpdate {
    pub m: Vec<f64>,
    pub s: SymMatrix,
    pub logdet_s: f64,
    pub sweeps: usize,
}

fn expected_rates(log_c: f64, m: &[f64], s: &SymMatrix) -> Vec<f64> {
    m.iter().enumerate().map(|(j, mj)| (log_c + mj + 0.5 * s.get(j, j)).exp()).collect()
}

/// Mean step `S (exp(log C + m + ½ diag S) + Σ⁻¹(m − μ) − y)`, to be
/// subtracted from `m`; `S` acts as the inverse of the negative Hessian.
pub fn newton_mean_step(
    y: &[f64],
    log_c: f64,
    m: &[f64],
    s: &SymMatrix,
    mu: &[f64],
    sigma_inv: &SymMatrix,
) -> Vec<f64> {
    let rates = expected_rates(log_c, m, s);
    let diff: Vec<f64> = m.iter().zip(mu).map(|(a, b)| a - b).collect();
    let pd = sigma_inv.mat_vec(&diff);
    let grad: Vec<f64> = (0..m.len()).map(|j| rates[j] + pd[j] - y[j]).collect();
    s.mat_vec(&grad)
}

/// Step halvings tried before a sweep is abandoned.
pub const MAX_HALVINGS: usize = 30;

/// Inner loop with precomputed component terms. `F` never decreases: a sweep
/// that would lower it is retried with the mean step halved, up to
/// [`MAX_HALVINGS`] times, and abandoned if none of those helps.
#[allow(clippy::too_many_arguments)]
pub fn update_variational_with(
    y: &[f64],
    log_c: f64,
    m: &[f64],
    s: &SymMatrix,
    logdet_s: f64,
    mu: &[f64],
    terms: &ComponentTerms,
    inner_iter: usize,
    inner_tol: f64,
) -> Result<VariationalUpdate, LinalgError> {
    let elbo = |m: &[f64], s: &SymMatrix, ld: f64| elbo_with(y, 0.0, log_c, m, s, ld, mu, terms);
    let mut cur = VariationalUpdate { m: m.to_vec(), s: s.clone(), logdet_s, sweeps: 0 };
    let mut f_cur = elbo(&cur.m, &cur.s, cur.logdet_s);
    for _ in 0..inner_iter {
        // fixed point for S: [Σ⁻¹ + diag(exp(log C + m + ½ diag S))]⁻¹
        let mut prec = terms.sigma_inv.clone();
        prec.add_diag_vec(&expected_rates(log_c, &cur.m, &cur.s));
        let (s_new, logdet_prec) = block_inverse_pd(&prec, &terms.blocks)?;
        let logdet_new = -logdet_prec;

        let step = newton_mean_step(y, log_c, &cur.m, &s_new, mu, &terms.sigma_inv);

        let mut scale = 1.0;
        let mut m_new: Vec<f64> = cur.m.iter().zip(&step).map(|(a, b)| a - b).collect();
        let mut f_new = elbo(&m_new, &s_new, logdet_new);
        let mut halvings = 0;
        while !(f_new >= f_cur) && halvings < MAX_HALVINGS {
            scale *= 0.5;
            halvings += 1;
            m_new = cur.m.iter().zip(&step).map(|(a, b)| a - scale * b).collect();
            f_new = elbo(&m_new, &s_new, logdet_new);
        }
        if !(f_new >= f_cur) {
            break;
        }
        let dm = cur.m.iter().zip(&m_new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ds = cur.s.max_abs_diff(&s_new);
        cur = VariationalUpdate { m: m_new, s: s_new, logdet_s: logdet_new, sweeps: cur.sweeps + 1 };
        f_cur = f_new;
        if dm.max(ds) < inner_tol {
            break;
        }
    }
    Ok(cur)
}

/// Updates `(m, S)` for one observation under one component.
#[allow(clippy::too_many_arguments)]
pub fn update_variational(
    y: &[f64],
    log_c: f64,
    m: &[f64],
    s: &SymMatrix,
    mu: &[f64],
    sigma: &SymMatrix,
    inner_iter: usize,
    inner_tol: f64,
) -> Result<(Vec<f64>, SymMatrix), LinalgError> {
    let terms = ComponentTerms::new(sigma)?;
    let logdet_s = cholesky(s)?.logdet();
    let up = update_variational_with(y, log_c, m, s, logdet_s, mu, &terms, inner_iter, inner_tol)?;
    Ok((up.m, up.s))
}

// ---------------------------------------------------------------------------
// Step 3 and the covariance update

/// `π_g = Σ_i Ẑ_ig / n`.
pub fn m_step_pi(z: &[Vec<f64>]) -> Vec<f64> {
    let n = z.len() as f64;
    let g = z.first().map_or(0, Vec::len);
    (0..g).map(|c| z.iter().map(|r| r[c]).sum::<f64>() / n).collect()
}

fn column_weight(z: &[Vec<f64>], c: usize) -> f64 {
    z.iter().map(|r| r[c]).sum()
}

/// Responsibility-weighted mean of the variational means, per component.
/// `m` is indexed `[i][g][j]`.
pub fn m_step_mu(z: &[Vec<f64>], m: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>, FitError> {
    let g = z.first().map_or(0, Vec::len);
    let d = m.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut out = Vec::with_capacity(g);
    for c in 0..g {
        let w = column_weight(z, c);
        if w < 1e-10 {
            return Err(FitError::EmptyComponent { component: c, restart: 0 });
        }
        let mut mu = vec![0.0; d];
        for (zr, mr) in z.iter().zip(m) {
            let zc = zr[c];
            for (acc, v) in mu.iter_mut().zip(&mr[c]) {
                *acc += zc * v;
            }
        }
        mu.iter_mut().for_each(|v| *v /= w);
        out.push(mu);
    }
    Ok(out)
}

/// Unrestricted scatter of one component:
/// `[Σ_i z_i (m_i − μ)(m_i − μ)ᵀ + Σ_i z_i S_i] / Σ_i z_i`.
pub fn compute_w(z: &[f64], m: &[&[f64]], s: &[&SymMatrix], mu: &[f64]) -> Result<SymMatrix, FitError> {
    let d = mu.len();
    let total: f64 = z.iter().sum();
    if total < 1e-10 {
        return Err(FitError::EmptyComponent { component: 0, restart: 0 });
    }
    let mut w = SymMatrix::zeros(d);
    let mut diff = vec![0.0; d];
    for i in 0..z.len() {
        for j in 0..d {
            diff[j] = m[i][j] - mu[j];
        }
        w.rank_one_update(z[i], &diff);
        w.axpy(z[i], s[i]);
    }
    w.scale(1.0 / total);
    Ok(w)
}

/// Picks the grouping for one component from its scatter matrix `w`.
///
/// The clustering's proposal replaces `previous` unless both have the same
/// number of groups and the proposal has the larger `log |block_project(w)|`;
/// for a fixed number of groups that is exactly the covariance part of the
/// bound, so keeping the better of the two makes the update an ascent step.
/// Returns the grouping and, in silhouette mode, the scores per `K`.
pub fn choose_grouping(
    w: &SymMatrix,
    count: GroupCount,
    linkage: Linkage,
    previous: Option<&ColumnPartition>,
) -> Result<(ColumnPartition, Option<BTreeMap<usize, f64>>), LinalgError> {
    let dist = colgroup::distance_matrix(w)?;
    let tree = colgroup::agglomerate(&dist, linkage);
    let (k, scores) = match count {
        GroupCount::Fixed(k) => (k.clamp(1, w.dim()), None),
        GroupCount::Silhouette { k_max } => {
            let (k, s) = colgroup::select_k_silhouette(&dist, &tree, k_max);
            (k, Some(s))
        }
    };
    let proposal = colgroup::cut(&tree, k).expect("k clamped to range");
    let chosen = match previous {
        Some(prev) if prev.k() == proposal.k() && *prev != proposal => {
            let ld_new = block_logdet(w, &proposal)?;
            let ld_old = block_logdet(w, prev)?;
            if ld_new <= ld_old {
                proposal
            } else {
                prev.clone()
            }
        }
        _ => proposal,
    };
    Ok((chosen, scores))
}

/// `log |block_project(w, part)|` computed block by block.
fn block_logdet(w: &SymMatrix, part: &ColumnPartition) -> Result<f64, LinalgError> {
    let mut total = 0.0;
    for block in part.blocks() {
        let sub = SymMatrix::from_fn(block.len(), |a, b| w.get(block[a], block[b]));
        total += cholesky(&sub)?.logdet();
    }
    Ok(total)
}

/// Block projection of `w`, with the diagonal jittered once if needed.
fn project_pd(w: &SymMatrix, part: &ColumnPartition) -> Result<SymMatrix, LinalgError> {
    let mut sigma = colgroup::block_project(w, part);
    let (_, jitter) = cholesky_jittered(&sigma)?;
    if jitter > 0.0 {
        sigma.add_diag(jitter);
    }
    Ok(sigma)
}

// ---------------------------------------------------------------------------
// Initialization

/// Deterministic starting state. Variational means start at
/// `log((y + 0.5) / C)`, covariances at `0.1 I`; responsibilities come from
/// k-means on those log-counts for restart 0 and from Dirichlet(1, …, 1)
/// draws for later restarts.
pub fn initialize(
    counts: &CountMatrix,
    offsets: &OffsetVector,
    g: usize,
    config: &FitConfig,
    restart: usize,
) -> VariationalState {
    let n = counts.n();
    let d = counts.d();
    let c = offsets.values();
    let logs: Vec<Vec<f64>> = (0..n)
        .map(|i| counts.row(i).iter().map(|&y| ((y as f64 + 0.5) / c[i]).ln()).collect())
        .collect();
    let z = if g == 1 {
        vec![vec![1.0]; n]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, restart as u64));
        if restart == 0 {
            let labels = kmeans(&logs, g, &mut rng);
            labels
                .iter()
                .map(|&l| (0..g).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
                .collect()
        } else {
            (0..n)
                .map(|_| {
                    let draws: Vec<f64> = (0..g).map(|_| Exp1.sample(&mut rng)).collect();
                    let total: f64 = draws.iter().sum();
                    draws.iter().map(|v| v / total).collect()
                })
                .collect()
        }
    };
    VariationalState {
        m: logs.iter().map(|r| vec![r.clone(); g]).collect(),
        s: vec![vec![SymMatrix::from_diag(&vec![0.1; d]); g]; n],
        z,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. An emptied cluster keeps its
/// previous centre.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut centres: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centres.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &centres[centres.len() - 1]));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centres.iter().enumerate() {
                let dd = sq_dist(p, ctr);
                if dd < best.1 {
                    best = (c, dd);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, ctr) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in ctr.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// The EM loop

struct Params {
    pi: Vec<f64>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<SymMatrix>,
    grouping: Vec<ColumnPartition>,
    terms: Vec<ComponentTerms>,
    silhouettes: Option<Vec<BTreeMap<usize, f64>>>,
}

fn tag(restart: usize) -> impl Fn(FitError) -> FitError {
    move |e| match e {
        FitError::EmptyComponent { component, .. } => FitError::EmptyComponent { component, restart },
        other => other,
    }
}

fn numerical(restart: usize) -> impl Fn(LinalgError) -> FitError {
    move |source| FitError::Numerical { restart, source }
}

/// Steps 3 and 4: proportions, means and block-diagonal covariances.
fn m_step(
    state: &VariationalState,
    k_spec: &KSpec,
    linkage: Linkage,
    previous: Option<&[ColumnPartition]>,
    restart: usize,
) -> Result<Params, FitError> {
    let g = state.g();
    let pi = m_step_pi(&state.z);
    let mu = m_step_mu(&state.z, &state.m).map_err(tag(restart))?;
    let mut sigma = Vec::with_capacity(g);
    let mut grouping = Vec::with_capacity(g);
    let mut terms = Vec::with_capacity(g);
    let mut sils = Vec::new();
    for c in 0..g {
        let zc: Vec<f64> = state.z.iter().map(|r| r[c]).collect();
        let mc: Vec<&[f64]> = state.m.iter().map(|r| r[c].as_slice()).collect();
        let sc: Vec<&SymMatrix> = state.s.iter().map(|r| &r[c]).collect();
        let w = compute_w(&zc, &mc, &sc, &mu[c]).map_err(|e| match e {
            FitError::EmptyComponent { .. } => FitError::EmptyComponent { component: c, restart },
            other => other,
        })?;
        let (part, scores) = choose_grouping(&w, k_spec.count_for(c), linkage, previous.map(|p| &p[c]))
            .map_err(numerical(restart))?;
        let s = project_pd(&w, &part).map_err(numerical(restart))?;
        terms.push(ComponentTerms::new(&s).map_err(numerical(restart))?);
        sigma.push(s);
        grouping.push(part);
        if let Some(sc) = scores {
            sils.push(sc);
        }
    }
    let silhouettes = matches!(k_spec, KSpec::Auto { .. }).then_some(sils);
    Ok(Params { pi, mu, sigma, grouping, terms, silhouettes })
}

fn all_elbos(data: &FitData, state: &VariationalState, logdet_s: &[Vec<f64>], p: &Params) -> Vec<Vec<f64>> {
    (0..data.n())
        .into_par_iter()
        .with_min_len(32)
        .map(|i| {
            (0..p.pi.len())
                .map(|c| {
                    elbo_with(
                        &data.y[i],
                        data.log_fact[i],
                        data.log_c[i],
                        &state.m[i][c],
                        &state.s[i][c],
                        logdet_s[i][c],
                        &p.mu[c],
                        &p.terms[c],
                    )
                })
                .collect()
        })
        .collect()
}

/// One EM run that can be advanced a few iterations at a time.
struct EmRun<'a> {
    data: &'a FitData,
    k_spec: &'a KSpec,
    config: &'a FitConfig,
    restart: usize,
    state: VariationalState,
    logdet_s: Vec<Vec<f64>>,
    params: Params,
    elbo: Vec<Vec<f64>>,
    trace: Vec<f64>,
    converged: bool,
}

impl<'a> EmRun<'a> {
    fn new(
        data: &'a FitData,
        init: VariationalState,
        k_spec: &'a KSpec,
        config: &'a FitConfig,
        restart: usize,
    ) -> Result<Self, FitError> {
        let logdet_s: Vec<Vec<f64>> = init
            .s
            .iter()
            .map(|row| row.iter().map(|s| cholesky(s).map(|c| c.logdet())).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()
            .map_err(numerical(restart))?;
        let params = m_step(&init, k_spec, config.linkage, None, restart)?;
        let elbo = all_elbos(data, &init, &logdet_s, &params);
        let trace = vec![marginal_bound(&elbo, &params.pi)];
        Ok(EmRun { data, k_spec, config, restart, state: init, logdet_s, params, elbo, trace, converged: false })
    }

    fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    fn objective(&self) -> f64 {
        *self.trace.last().expect("nonempty")
    }

    fn done(&self) -> bool {
        self.converged || self.iterations() >= self.config.max_em_iter
    }

    fn step(&mut self) -> Result<(), FitError> {
        let (data, config, restart) = (self.data, self.config, self.restart);
        let g = self.state.g();
        // Step 1
        self.state.z = responsibilities(&self.elbo, &self.params.pi);

        // Step 2
        let (state, logdet_s, params) = (&self.state, &self.logdet_s, &self.params);
        let updates: Vec<Vec<VariationalUpdate>> = (0..data.n())
            .into_par_iter()
            .with_min_len(16)
            .map(|i| {
                (0..g)
                    .map(|c| {
                        update_variational_with(
                            &data.y[i],
                            data.log_c[i],
                            &state.m[i][c],
                            &state.s[i][c],
                            logdet_s[i][c],
                            &params.mu[c],
                            &params.terms[c],
                            config.inner_iter,
                            config.inner_tol,
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()
            .map_err(numerical(restart))?;
        for (i, row) in updates.into_iter().enumerate() {
            for (c, up) in row.into_iter().enumerate() {
                self.state.m[i][c] = up.m;
                self.state.s[i][c] = up.s;
                self.logdet_s[i][c] = up.logdet_s;
            }
        }

        // Step 3 and covariances
        self.params = m_step(&self.state, self.k_spec, config.linkage, Some(&self.params.grouping), restart)?;
        self.elbo = all_elbos(data, &self.state, &self.logdet_s, &self.params);
        let bound = marginal_bound(&self.elbo, &self.params.pi);
        let prev = self.objective();
        self.trace.push(bound);
        if !bound.is_finite() {
            return Err(FitError::Numerical {
                restart,
                source: LinalgError::NotPositiveDefinite { pivot: 0, value: bound },
            });
        }
        if (bound - prev).abs() <= config.elbo_rel_tol * prev.abs() {
            self.converged = true;
        }
        Ok(())
    }

    fn advance(&mut self, max_iterations: usize) -> Result<(), FitError> {
        while !self.done() && self.iterations() < max_iterations {
            self.step()?;
        }
        Ok(())
    }

    fn finish(self) -> FitResult {
        let n = self.data.n();
        let d = self.data.d();
        let g = self.state.g();
        let mut state = self.state;
        state.z = responsibilities(&self.elbo, &self.params.pi);
        let row_labels = state
            .z
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect();
        let params = self.params;
        let lower_bound = complete_lower_bound(&state.z, &params.pi, &self.elbo);
        let n_params = count_free_parameters(g, d, &params.grouping);
        let model = MixtureModel { pi: params.pi, mu: params.mu, sigma: params.sigma, grouping: params.grouping };
        FitResult {
            bic: bic(lower_bound, n_params, n),
            model,
            state,
            row_labels,
            iterations: self.trace.len() - 1,
            elbo_trace: self.trace,
            lower_bound,
            n_params,
            converged: self.converged,
            restart: self.restart,
            silhouettes: params.silhouettes,
        }
    }
}

/// Runs EM from a given starting state (one restart).
pub fn fit_from_state(
    data: &FitData,
    init: VariationalState,
    k_spec: &KSpec,
    config: &FitConfig,
    restart: usize,
) -> Result<FitResult, FitError> {
    config.validate()?;
    let g = init.g();
    if init.n() != data.n() || g == 0 {
        return Err(FitError::InvalidInput("initial state does not match the data".into()));
    }
    k_spec.validate(g, data.d())?;
    let mut run = EmRun::new(data, init, k_spec, config, restart)?;
    run.advance(usize::MAX)?;
    Ok(run.finish())
}

/// Fits a `G`-component model from `config.n_starts` starts.
///
/// Every start first runs `config.screen_iter` iterations; the start with the
/// largest objective at that point (earliest on ties) then runs to
/// convergence. With `screen_iter = 0` every start runs to convergence and
/// the best final objective wins.
pub fn fit(
    counts: &CountMatrix,
    offsets: &OffsetVector,
    g: usize,
    k_spec: &KSpec,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    config.validate()?;
    if g == 0 || g > counts.n() {
        return Err(FitError::InvalidInput(format!("G = {g} outside 1..={}", counts.n())));
    }
    k_spec.validate(g, counts.d())?;
    let data = FitData::new(counts, offsets)?;
    // a single component makes every start identical
    let starts = if g == 1 { 1 } else { config.n_starts };
    let screen = if config.screen_iter == 0 { usize::MAX } else { config.screen_iter };
    let runs: Vec<Result<EmRun, FitError>> = (0..starts)
        .into_par_iter()
        .map(|r| {
            let mut run = EmRun::new(&data, initialize(counts, offsets, g, config, r), k_spec, config, r)?;
            run.advance(screen)?;
            Ok(run)
        })
        .collect();
    let mut last_err = None;
    let mut ok = Vec::new();
    for run in runs {
        match run {
            Ok(run) => ok.push(run),
            Err(e) => last_err = Some(e),
        }
    }
    // stable sort keeps the earlier restart first on ties
    ok.sort_by(|a, b| b.objective().total_cmp(&a.objective()));
    for mut run in ok {
        match run.advance(usize::MAX) {
            Ok(()) => return Ok(run.finish()),
            Err(e) => last_err = Some(e),
        }
    }
    Err(FitError::AllRestartsFailed { restarts: starts, last: Box::new(last_err.expect("at least one restart")) })
}
