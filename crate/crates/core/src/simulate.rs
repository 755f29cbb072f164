//! Synthetic count data from mixtures of block-diagonal Poisson-lognormal
//! components.
//!
//! For observation `i` with label `g`: `X_i ~ N(μ_g, Σ_g)` and
//! `Y_ij ~ Poisson(C_i exp X_ij)`. Each `Σ_g` is block diagonal; every block
//! is `D^½ R D^½` with random variances `D` and a one-factor correlation
//! matrix `R_ij = λ_i λ_j`, where the loadings have random signs and
//! magnitudes chosen so that every `|R_ij|` lies in a given range.
//!
//! # Presets
//!
//! Presets 1–10 follow the equal-K study grid (n, d, G, K and mixing
//! proportions), presets 11–12 the varying-K studies. Their block sizes and
//! component means are choices of this crate:
//!
//! * blocks are contiguous and as even as possible, larger blocks first
//!   (d = 10, K = 2 → 5, 5; d = 50, K = 9 → 6, 6, 6, 6, 6, 5, 5, 5, 5);
//! * means are drawn once per preset from Uniform(1, 4) with a fixed seed and
//!   redrawn until every pair of components differs by at least 1.5 in at
//!   least d/2 coordinates;
//! * latent variances are Uniform(0.5, 1), within-block correlation
//!   magnitudes Uniform(0.4, 0.8), offsets all 1.
//!
//! The covariance matrices themselves are redrawn for every dataset seed.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CountMatrix, OffsetVector};
use crate::linalg::{cholesky, SymMatrix};
use crate::model::{ColumnPartition, MixtureModel};
use crate::vem::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("no positive definite block after {attempts} draws (block size {size})")]
    CovarianceDraw { attempts: usize, size: usize },
    #[error("unknown preset {0} (expected 1..=12)")]
    UnknownPreset(u32),
}

/// Smallest eigenvalue a drawn correlation block may have.
pub const EIGEN_FLOOR: f64 = 0.05;
/// Draws tried per block before giving up.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetSpec {
    Unit,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub n: usize,
    pub d: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    /// Per component, block sizes in variable order.
    pub block_sizes: Vec<Vec<usize>>,
    pub within_block_corr_range: (f64, f64),
    pub variance_range: (f64, f64),
    pub offsets: OffsetSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec {
    pub fn g(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        let g = self.g();
        if self.n == 0 || self.d == 0 || g == 0 {
            return bad("n, d and G must be positive".into());
        }
        if self.pi.iter().any(|&p| !(p > 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("pi {:?} is not on the simplex", self.pi));
        }
        if self.mu.len() != g || self.mu.iter().any(|m| m.len() != self.d) {
            return bad("mu must be G × d".into());
        }
        if self.block_sizes.len() != g {
            return bad("one block-size list per component required".into());
        }
        for (c, b) in self.block_sizes.iter().enumerate() {
            if b.contains(&0) || b.iter().sum::<usize>() != self.d {
                return bad(format!("component {c}: block sizes {b:?} do not partition d = {}", self.d));
            }
        }
        let (lo, hi) = self.within_block_corr_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("correlation magnitude range ({lo}, {hi}) must lie in (0, 1)"));
        }
        let (vlo, vhi) = self.variance_range;
        if !(vlo > 0.0 && vlo <= vhi && vhi.is_finite()) {
            return bad(format!("variance range ({vlo}, {vhi}) must be positive"));
        }
        if let OffsetSpec::Explicit(c) = &self.offsets {
            if c.len() != self.n || c.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return bad("explicit offsets must be n positive values".into());
            }
        }
        Ok(())
    }

    pub fn offset_vector(&self) -> OffsetVector {
        match &self.offsets {
            OffsetSpec::Unit => OffsetVector::unit(self.n),
            OffsetSpec::Explicit(c) => OffsetVector::new(c.clone()).expect("validated"),
        }
    }
}

/// True labels, column groupings and parameters behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub row_labels: Vec<usize>,
    pub column_partitions: Vec<ColumnPartition>,
    pub model: MixtureModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthDoc {
    row_labels: Vec<usize>,
    column_partitions: Vec<Vec<Vec<usize>>>,
    model: MixtureModel,
}

impl Serialize for GroundTruth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TruthDoc {
            row_labels: self.row_labels.clone(),
            column_partitions: self.column_partitions.iter().map(ColumnPartition::blocks).collect(),
            model: self.model.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroundTruth {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let doc = TruthDoc::deserialize(de)?;
        let column_partitions = doc
            .column_partitions
            .iter()
            .map(|b| ColumnPartition::from_blocks(b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        Ok(GroundTruth { row_labels: doc.row_labels, column_partitions, model: doc.model })
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_block<R: Rng>(size: usize, corr: (f64, f64), var: (f64, f64), rng: &mut R) -> Result<SymMatrix, SimError> {
    if size == 1 {
        return Ok(SymMatrix::from_diag(&[uniform(rng, var)]));
    }
    let loading_range = (corr.0.sqrt(), corr.1.sqrt());
    for _ in 0..MAX_REDRAWS {
        // one-factor correlation: r_ij = λ_i λ_j with random signs, so every
        // magnitude lies in the range and the block hangs together as a group
        let loading: Vec<f64> = (0..size)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * uniform(rng, loading_range)
            })
            .collect();
        let r = SymMatrix::from_fn(size, |i, j| if i == j { 1.0 } else { loading[i] * loading[j] });
        let mut shifted = r.clone();
        shifted.add_diag(-EIGEN_FLOOR);
        if cholesky(&shifted).is_err() {
            continue;
        }
        let sd: Vec<f64> = (0..size).map(|_| uniform(rng, var).sqrt()).collect();
        return Ok(SymMatrix::from_fn(size, |i, j| sd[i] * r.get(i, j) * sd[j]));
    }
    Err(SimError::CovarianceDraw { attempts: MAX_REDRAWS, size })
}

fn block_covariance_with<R: Rng>(
    block_sizes: &[usize],
    corr: (f64, f64),
    var: (f64, f64),
    rng: &mut R,
) -> Result<SymMatrix, SimError> {
    let d: usize = block_sizes.iter().sum();
    let mut sigma = SymMatrix::zeros(d);
    let mut start = 0;
    for &b in block_sizes {
        let block = draw_block(b, corr, var, rng)?;
        for i in 0..b {
            for j in 0..=i {
                sigma.set(start + i, start + j, block.get(i, j));
            }
        }
        start += b;
    }
    Ok(sigma)
}

/// Block-diagonal covariance with contiguous blocks of the given sizes.
pub fn sample_block_covariance(
    block_sizes: &[usize],
    corr_range: (f64, f64),
    var_range: (f64, f64),
    seed: u64,
) -> Result<SymMatrix, SimError> {
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(SimError::InvalidSpec(format!("bad block sizes {block_sizes:?}")));
    }
    let (lo, hi) = corr_range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) || !(var_range.0 > 0.0 && var_range.0 <= var_range.1) {
        return Err(SimError::InvalidSpec("invalid correlation or variance range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    block_covariance_with(block_sizes, corr_range, var_range, &mut rng)
}

/// Draws one dataset. Component covariances use seeds derived from
/// `spec.seed`, so the whole dataset is a function of the spec.
pub fn sample_dataset(spec: &SimSpec) -> Result<(CountMatrix, GroundTruth), SimError> {
    sample_with_latent(spec).map(|(counts, truth, _)| (counts, truth))
}

/// As [`sample_dataset`], also returning the latent log-rates `X` (n × d).
pub fn sample_with_latent(spec: &SimSpec) -> Result<(CountMatrix, GroundTruth, Vec<Vec<f64>>), SimError> {
    spec.validate()?;
    let g = spec.g();
    let d = spec.d;
    let mut sigma = Vec::with_capacity(g);
    let mut grouping = Vec::with_capacity(g);
    for c in 0..g {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1000 + c as u64));
        sigma.push(block_covariance_with(&spec.block_sizes[c], spec.within_block_corr_range, spec.variance_range, &mut rng)?);
        grouping.push(ColumnPartition::from_block_sizes(&spec.block_sizes[c]).expect("validated"));
    }
    let chol: Vec<_> = sigma.iter().map(|s| cholesky(s).expect("drawn PD")).collect();
    let offsets = spec.offset_vector();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    let pick = WeightedIndex::new(&spec.pi).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let mut labels = Vec::with_capacity(spec.n);
    let mut values = Vec::with_capacity(spec.n * d);
    let mut latent = Vec::with_capacity(spec.n);
    let mut z = vec![0.0; d];
    for i in 0..spec.n {
        let c = pick.sample(&mut rng);
        labels.push(c);
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let x: Vec<f64> = (0..d).map(|j| spec.mu[c][j] + (0..=j).map(|k| chol[c].l(j, k) * z[k]).sum::<f64>()).collect();
        for &xj in &x {
            let rate = offsets.values()[i] * xj.exp();
            let y = if rate > 0.0 && rate.is_finite() {
                Poisson::new(rate).map(|p| p.sample(&mut rng)).unwrap_or(0.0)
            } else {
                0.0
            };
            values.push(y as u64);
        }
        latent.push(x);
    }
    let width = spec.n.to_string().len();
    let counts = CountMatrix::new(
        values,
        (1..=spec.n).map(|i| format!("s{i:0width$}")).collect(),
        (1..=d).map(|j| format!("v{j}")).collect(),
    )
    .expect("generated ids are unique");
    let model = MixtureModel { pi: spec.pi.clone(), mu: spec.mu.clone(), sigma, grouping: grouping.clone() };
    Ok((counts, GroundTruth { row_labels: labels, column_partitions: grouping, model }, latent))
}

/// Sizes for `k` contiguous blocks over `d` variables, larger blocks first.
pub fn even_blocks(d: usize, k: usize) -> Vec<usize> {
    let base = d / k;
    let extra = d % k;
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

/// Component means from Uniform(1, 4) such that every pair of components
/// differs by at least 1.5 in at least `d / 2` coordinates.
///
/// Coordinate `j` singles out one component (`j mod G` for three
/// components, every other coordinate for two) and redraws that coordinate
/// until the chosen component is 1.5 away from all others. Supports G ≤ 3.
pub fn separated_means(g: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!((1..=3).contains(&g), "separated_means supports 1 to 3 components");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = vec![vec![0.0; d]; g];
    for j in 0..d {
        let isolate = match g {
            1 => None,
            2 => (j % 2 == 0).then_some(0),
            _ => Some(j % g),
        };
        loop {
            let col: Vec<f64> = (0..g).map(|_| rng.random_range(1.0..4.0)).collect();
            let ok = isolate.is_none_or(|p| (0..g).all(|h| h == p || (col[h] - col[p]).abs() >= 1.5));
            if ok {
                for (m, v) in mu.iter_mut().zip(col) {
                    m[j] = v;
                }
                break;
            }
        }
    }
    mu
}

const PRESET_SEED: u64 = 0x00B1_0C4D_1A60_5EED;

/// Study presets. `(n, d, per-component K)`; two components use
/// π = (0.25, 0.75), three use π = (0.35, 0.10, 0.55).
pub fn preset(study: u32) -> Result<SimSpec, SimError> {
    let (n, d, ks): (usize, usize, Vec<usize>) = match study {
        1 => (500, 10, vec![2, 2]),
        2 => (500, 20, vec![4, 4]),
        3 => (500, 50, vec![9, 9]),
        4 => (500, 50, vec![10, 10]),
        5 => (500, 50, vec![12, 12]),
        6 => (1000, 10, vec![2, 2, 2]),
        7 => (1000, 20, vec![4, 4, 4]),
        8 => (1000, 50, vec![9, 9, 9]),
        9 => (1000, 50, vec![10, 10, 10]),
        10 => (1000, 50, vec![12, 12, 12]),
        11 => (500, 10, vec![2, 3]),
        12 => (500, 20, vec![4, 5]),
        other => return Err(SimError::UnknownPreset(other)),
    };
    let g = ks.len();
    let pi = if g == 2 { vec![0.25, 0.75] } else { vec![0.35, 0.10, 0.55] };
    Ok(SimSpec {
        name: Some(format!("study {study}")),
        n,
        d,
        pi,
        mu: separated_means(g, d, derive_seed(PRESET_SEED, study as u64)),
        block_sizes: ks.iter().map(|&k| even_blocks(d, k)).collect(),
        within_block_corr_range: (0.4, 0.8),
        variance_range: (0.5, 1.0),
        offsets: OffsetSpec::Unit,
        seed: 0,
    })
}

/// A 120 × 30 two-component dataset with uneven library sizes, used as a
/// stand-in for a real RNA-seq matrix in end-to-end runs.
pub fn pseudo_tcga() -> SimSpec {
    let n = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(PRESET_SEED, 120));
    let offsets: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (0.3 * z).exp();
            (v * 1e6).round() / 1e6
        })
        .collect();
    SimSpec {
        name: Some("pseudo-TCGA".into()),
        n,
        d: 30,
        pi: vec![0.4, 0.6],
        mu: separated_means(2, 30, derive_seed(PRESET_SEED, 30)),
        block_sizes: vec![vec![10, 10, 10], vec![8, 8, 7, 7]],
        within_block_corr_range: (0.4, 0.8),
        variance_range: (0.5, 1.0),
        offsets: OffsetSpec::Explicit(offsets),
        seed: 2024,
    }
}
