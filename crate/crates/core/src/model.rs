//! Mixture parameters, variational state and the per-observation evidence
//! lower bound.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::{self, cholesky, dot, LinalgError, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid column partition: {0}")]
    InvalidPartition(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Responsibilities below this are raised to it after normalization.
pub const RESPONSIBILITY_FLOOR: f64 = 1e-300;

/// Assignment of `d` variables to `K` groups. Labels are `0..K`, each used at
/// least once, and canonical: groups are numbered by first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnPartition {
    assign: Vec<usize>,
    k: usize,
}

impl ColumnPartition {
    /// Relabels arbitrary group labels by order of first occurrence.
    pub fn from_labels<T: Eq + Clone>(labels: &[T]) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::InvalidPartition("no variables".into()));
        }
        let mut seen: Vec<T> = Vec::new();
        let assign = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(p) => p,
                None => {
                    seen.push(l.clone());
                    seen.len() - 1
                }
            })
            .collect();
        Ok(Self { assign, k: seen.len() })
    }

    /// Contiguous blocks of the given sizes.
    pub fn from_block_sizes(sizes: &[usize]) -> Result<Self, ModelError> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(ModelError::InvalidPartition(format!("bad block sizes {sizes:?}")));
        }
        let assign = sizes.iter().enumerate().flat_map(|(k, &s)| std::iter::repeat(k).take(s)).collect();
        Ok(Self { assign, k: sizes.len() })
    }

    /// Builds from explicit blocks of variable indices covering `0..d`.
    pub fn from_blocks(blocks: &[Vec<usize>]) -> Result<Self, ModelError> {
        let d: usize = blocks.iter().map(Vec::len).sum();
        let mut labels = vec![usize::MAX; d];
        for (k, b) in blocks.iter().enumerate() {
            if b.is_empty() {
                return Err(ModelError::InvalidPartition("empty block".into()));
            }
            for &j in b {
                if j >= d || labels[j] != usize::MAX {
                    return Err(ModelError::InvalidPartition(format!("variable {j} missing or repeated")));
                }
                labels[j] = k;
            }
        }
        Self::from_labels(&labels)
    }

    pub fn single(d: usize) -> Self {
        Self { assign: vec![0; d], k: 1 }
    }

    pub fn singletons(d: usize) -> Self {
        Self { assign: (0..d).collect(), k: d }
    }

    pub fn d(&self) -> usize {
        self.assign.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.assign
    }

    pub fn label(&self, j: usize) -> usize {
        self.assign[j]
    }

    /// Variable indices of each group, in label order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (j, &g) in self.assign.iter().enumerate() {
            out[g].push(j);
        }
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.k];
        for &g in &self.assign {
            out[g] += 1;
        }
        out
    }

    #[inline]
    pub fn same_group(&self, i: usize, j: usize) -> bool {
        self.assign[i] == self.assign[j]
    }
}

/// G-component mixture with block-diagonal latent covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<SymMatrix>,
    pub grouping: Vec<ColumnPartition>,
}

impl MixtureModel {
    pub fn g(&self) -> usize {
        self.pi.len()
    }

    pub fn d(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    pub fn k_per_component(&self) -> Vec<usize> {
        self.grouping.iter().map(ColumnPartition::k).collect()
    }

    /// Checks shapes, the simplex, positive definiteness and the zero pattern
    /// outside each component's blocks.
    pub fn validate(&self) -> Result<(), ModelError> {
        let g = self.g();
        let d = self.d();
        if g == 0 || d == 0 {
            return Err(ModelError::InvalidModel("empty model".into()));
        }
        if self.mu.len() != g || self.sigma.len() != g || self.grouping.len() != g {
            return Err(ModelError::InvalidModel("component count mismatch".into()));
        }
        if self.pi.iter().any(|&p| !(p > 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidModel(format!("pi {:?} is not on the simplex", self.pi)));
        }
        for c in 0..g {
            if self.mu[c].len() != d || self.sigma[c].dim() != d || self.grouping[c].d() != d {
                return Err(ModelError::InvalidModel(format!("component {c} has wrong dimension")));
            }
            cholesky(&self.sigma[c])?;
            for i in 0..d {
                for j in 0..d {
                    if !self.grouping[c].same_group(i, j) && self.sigma[c].get(i, j) != 0.0 {
                        return Err(ModelError::InvalidModel(format!(
                            "component {c}: nonzero covariance outside blocks at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Reorders components: component `c` of the result is `perm[c]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> MixtureModel {
        MixtureModel {
            pi: perm.iter().map(|&c| self.pi[c]).collect(),
            mu: perm.iter().map(|&c| self.mu[c].clone()).collect(),
            sigma: perm.iter().map(|&c| self.sigma[c].clone()).collect(),
            grouping: perm.iter().map(|&c| self.grouping[c].clone()).collect(),
        }
    }
}

/// JSON form of [`MixtureModel`]. Block lists use 0-based variable indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    #[serde(rename = "G")]
    g: usize,
    pi: Vec<f64>,
    mu: Vec<Vec<f64>>,
    blocks: Vec<Vec<Vec<usize>>>,
    sigma: Vec<Vec<Vec<f64>>>,
}

impl Serialize for MixtureModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ModelDoc {
            g: self.g(),
            pi: self.pi.clone(),
            mu: self.mu.clone(),
            blocks: self.grouping.iter().map(ColumnPartition::blocks).collect(),
            sigma: self.sigma.iter().map(SymMatrix::to_rows).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MixtureModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let doc = ModelDoc::deserialize(de)?;
        if doc.pi.len() != doc.g || doc.mu.len() != doc.g || doc.blocks.len() != doc.g || doc.sigma.len() != doc.g {
            return Err(D::Error::custom("G does not match array lengths"));
        }
        let grouping = doc
            .blocks
            .iter()
            .map(|b| ColumnPartition::from_blocks(b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        let sigma = doc
            .sigma
            .iter()
            .map(|rows| SymMatrix::from_rows(rows))
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        Ok(MixtureModel { pi: doc.pi, mu: doc.mu, sigma, grouping })
    }
}

/// Per-observation, per-component variational parameters and responsibilities.
/// Indexing is `[i][g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub m: Vec<Vec<Vec<f64>>>,
    pub s: Vec<Vec<SymMatrix>>,
    pub z: Vec<Vec<f64>>,
}

impl VariationalState {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn g(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    /// Reorders components in every observation, as [`MixtureModel::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> VariationalState {
        let pick = |row: &Vec<Vec<f64>>| perm.iter().map(|&c| row[c].clone()).collect();
        VariationalState {
            m: self.m.iter().map(pick).collect(),
            s: self.s.iter().map(|row| perm.iter().map(|&c| row[c].clone()).collect()).collect(),
            z: self.z.iter().map(|row| perm.iter().map(|&c| row[c]).collect()).collect(),
        }
    }
}

/// `Σ_j log(y_j!)`.
pub fn log_factorial_sum(y: &[f64]) -> f64 {
    y.iter().map(|&v| ln_gamma(v + 1.0)).sum()
}

/// Quantities of one component reused by every observation's bound.
#[derive(Debug, Clone)]
pub struct ComponentTerms {
    pub sigma_inv: SymMatrix,
    pub logdet_sigma: f64,
    /// Independent variable blocks of `Σ`.
    pub blocks: Vec<Vec<usize>>,
}

impl ComponentTerms {
    pub fn new(sigma: &SymMatrix) -> Result<Self, LinalgError> {
        let chol = cholesky(sigma)?;
        Ok(Self { sigma_inv: chol.inverse(), logdet_sigma: chol.logdet(), blocks: linalg::sparsity_blocks(sigma) })
    }
}

/// Evidence lower bound from precomputed pieces. `log_fact` is `Σ log(y_j!)`
/// and `logdet_s` is `log |S|`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_with(
    y: &[f64],
    log_fact: f64,
    log_c: f64,
    m: &[f64],
    s: &SymMatrix,
    logdet_s: f64,
    mu: &[f64],
    terms: &ComponentTerms,
) -> f64 {
    let d = m.len();
    let diff: Vec<f64> = m.iter().zip(mu).map(|(a, b)| a - b).collect();
    let quad = dot(&diff, &terms.sigma_inv.mat_vec(&diff));
    let tr = terms.sigma_inv.trace_product(s);
    let mut lin = 0.0;
    let mut expo = 0.0;
    let mut ysum = 0.0;
    for j in 0..d {
        lin += m[j] * y[j];
        ysum += y[j];
        expo += (log_c + m[j] + 0.5 * s.get(j, j)).exp();
    }
    -0.5 * quad - 0.5 * tr + 0.5 * logdet_s - 0.5 * terms.logdet_sigma + 0.5 * d as f64 + lin + log_c * ysum
        - expo
        - log_fact
}

/// Evidence lower bound `F(q, y)` for one observation under one component
/// with `q = N(m, S)`.
pub fn elbo_observation(
    y: &[u64],
    log_c: f64,
    m: &[f64],
    s: &SymMatrix,
    mu: &[f64],
    sigma: &SymMatrix,
) -> Result<f64, LinalgError> {
    let d = y.len();
    for len in [m.len(), mu.len(), s.dim(), sigma.dim()] {
        if len != d {
            return Err(LinalgError::DimensionMismatch { expected: d, got: len });
        }
    }
    let terms = ComponentTerms::new(sigma)?;
    let logdet_s = linalg::logdet_pd(s)?;
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    Ok(elbo_with(&yf, log_factorial_sum(&yf), log_c, m, s, logdet_s, mu, &terms))
}

/// Gradient of `F` with respect to `m`: `y − exp(log C + m + ½ diag S) − Σ⁻¹(m − μ)`.
pub fn elbo_grad_m(y: &[f64], log_c: f64, m: &[f64], s: &SymMatrix, mu: &[f64], sigma_inv: &SymMatrix) -> Vec<f64> {
    let diff: Vec<f64> = m.iter().zip(mu).map(|(a, b)| a - b).collect();
    let pd = sigma_inv.mat_vec(&diff);
    (0..m.len())
        .map(|j| y[j] - (log_c + m[j] + 0.5 * s.get(j, j)).exp() - pd[j])
        .collect()
}

/// Softmax of `log π_g + F_ig` per row, via a max-shifted log-sum-exp.
pub fn responsibilities(elbo: &[Vec<f64>], pi: &[f64]) -> Vec<Vec<f64>> {
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    elbo.iter()
        .map(|row| {
            let a: Vec<f64> = row.iter().zip(&log_pi).map(|(f, lp)| f + lp).collect();
            let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
            let total: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= total);
            if z.iter().any(|&v| v < RESPONSIBILITY_FLOOR) {
                z.iter_mut().for_each(|v| *v = v.max(RESPONSIBILITY_FLOOR));
                let total: f64 = z.iter().sum();
                z.iter_mut().for_each(|v| *v /= total);
            }
            z
        })
        .collect()
}

/// `Σ_i log Σ_g π_g exp F_ig`: the bound on the observed-data log-likelihood,
/// i.e. the complete-data bound plus the entropy of the posterior responsibilities.
pub fn marginal_bound(elbo: &[Vec<f64>], pi: &[f64]) -> f64 {
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    elbo.iter()
        .map(|row| {
            let a: Vec<f64> = row.iter().zip(&log_pi).map(|(f, lp)| f + lp).collect();
            let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mx + a.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
        })
        .sum()
}

/// `Σ_i Σ_g Ẑ_ig [log π_g + F_ig]`.
pub fn complete_lower_bound(z: &[Vec<f64>], pi: &[f64], elbo: &[Vec<f64>]) -> f64 {
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    z.iter()
        .zip(elbo)
        .map(|(zr, fr)| {
            zr.iter()
                .zip(fr)
                .zip(&log_pi)
                .map(|((z, f), lp)| if *z == 0.0 { 0.0 } else { z * (lp + f) })
                .sum::<f64>()
        })
        .sum()
}

pub fn lower_bound(state: &VariationalState, model: &MixtureModel, elbo: &[Vec<f64>]) -> f64 {
    complete_lower_bound(&state.z, &model.pi, elbo)
}

/// `(G − 1) + G d + Σ_g Σ_k b_gk (b_gk + 1) / 2`.
pub fn count_free_parameters(g: usize, d: usize, groupings: &[ColumnPartition]) -> usize {
    let cov: usize = groupings
        .iter()
        .flat_map(|p| p.block_sizes())
        .map(|b| b * (b + 1) / 2)
        .sum();
    (g - 1) + g * d + cov
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elbo_scalar_reference() {
        let one = SymMatrix::identity(1);
        let f = elbo_observation(&[0], 0.0, &[0.0], &one, &[0.0], &one).unwrap();
        assert!((f + 0.5f64.exp()).abs() < 1e-14, "{f}");
        let two = SymMatrix::identity(2);
        let f2 = elbo_observation(&[0, 0], 0.0, &[0.0, 0.0], &two, &[0.0, 0.0], &two).unwrap();
        assert!((f2 + 2.0 * 0.5f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn elbo_rejects_indefinite_sigma() {
        let bad = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let s = SymMatrix::identity(2);
        assert!(elbo_observation(&[1, 1], 0.0, &[0.0, 0.0], &s, &[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn responsibilities_examples() {
        let z = responsibilities(&[vec![-3.0], vec![10.0]], &[1.0]);
        assert_eq!(z, vec![vec![1.0], vec![1.0]]);
        let z = responsibilities(&[vec![2.0, 2.0]], &[0.25, 0.75]);
        assert!((z[0][0] - 0.25).abs() < 1e-15 && (z[0][1] - 0.75).abs() < 1e-15);
        let z = responsibilities(&[vec![-1000.0, -1001.0]], &[0.5, 0.5]);
        let e = 1f64.exp();
        assert!((z[0][0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((z[0][1] - 1.0 / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn responsibilities_floor() {
        let z = responsibilities(&[vec![0.0, -1e6]], &[0.5, 0.5]);
        assert_eq!(z[0][1], RESPONSIBILITY_FLOOR);
        assert_eq!(z[0][0], 1.0);
    }

    #[test]
    fn lower_bound_cases() {
        let elbo = vec![vec![-2.0], vec![-3.5]];
        assert_eq!(complete_lower_bound(&[vec![1.0], vec![1.0]], &[1.0], &elbo), -5.5);
        let elbo = vec![vec![-2.0, -7.0]];
        let lb = complete_lower_bound(&[vec![1.0, 0.0]], &[0.4, 0.6], &elbo);
        assert_eq!(lb, 0.4f64.ln() - 2.0);
    }

    #[test]
    fn free_parameter_examples() {
        let one = ColumnPartition::single(1);
        assert_eq!(count_free_parameters(1, 1, &[one]), 2);
        let p55 = ColumnPartition::from_block_sizes(&[5, 5]).unwrap();
        assert_eq!(count_free_parameters(2, 10, &[p55.clone(), p55.clone()]), 81);
        let p433 = ColumnPartition::from_block_sizes(&[4, 3, 3]).unwrap();
        assert_eq!(count_free_parameters(2, 10, &[p55, p433]), 73);
    }

    #[test]
    fn partition_canonical_labels() {
        let p = ColumnPartition::from_labels(&[7, 7, 2, 7, 9]).unwrap();
        assert_eq!(p.labels(), &[0, 0, 1, 0, 2]);
        assert_eq!(p.blocks(), vec![vec![0, 1, 3], vec![2], vec![4]]);
        assert_eq!(ColumnPartition::from_blocks(&p.blocks()).unwrap(), p);
        assert!(ColumnPartition::from_blocks(&[vec![0, 0]]).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let grouping = ColumnPartition::from_block_sizes(&[2, 1]).unwrap();
        let sigma = SymMatrix::from_rows(&[
            vec![1.0 / 3.0, 0.1, 0.0],
            vec![0.1, 2.0, 0.0],
            vec![0.0, 0.0, 0.7],
        ])
        .unwrap();
        let model = MixtureModel {
            pi: vec![1.0],
            mu: vec![vec![0.1, std::f64::consts::PI, -2.5e-7]],
            sigma: vec![sigma],
            grouping: vec![grouping],
        };
        model.validate().unwrap();
        let text = serde_json::to_string(&model).unwrap();
        assert!(text.contains("\"blocks\":[[[0,1],[2]]]"));
        let back: MixtureModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn validate_catches_cross_block_entry() {
        let grouping = ColumnPartition::singletons(2);
        let sigma = SymMatrix::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap();
        let model = MixtureModel { pi: vec![1.0], mu: vec![vec![0.0; 2]], sigma: vec![sigma], grouping: vec![grouping] };
        assert!(model.validate().is_err());
    }
}
