//! Column-group discovery for one mixture component.
//!
//! The unrestricted scatter matrix of a component is turned into the
//! dissimilarity `1 − corr²`, variables are merged bottom-up under a linkage
//! rule, and the resulting tree is cut into `K` groups, either at a fixed `K`
//! or at the `K` with the largest average silhouette.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{corr_from_cov, LinalgError, SymMatrix};
use crate::model::ColumnPartition;

/// Symmetric `d × d` dissimilarities in `[0, 1]` with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry, a zero diagonal and the `[0, 1]` range.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, String> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(format!("row {i} has length {}", r.len()));
            }
            for (j, &v) in r.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) || v != rows[j][i] || (i == j && v != 0.0) {
                    return Err(format!("invalid entry {v} at ({i}, {j})"));
                }
                data.push(v);
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }
}

/// `1 − r_ij²` where `r` is the correlation matrix of `w`.
pub fn distance_matrix(w: &SymMatrix) -> Result<DistanceMatrix, LinalgError> {
    let r = corr_from_cov(w)?;
    let d = w.dim();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let c = r.get(i, j);
                data[i * d + j] = (1.0 - c * c).clamp(0.0, 1.0);
            }
        }
    }
    Ok(DistanceMatrix { dim: d, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Average,
    Complete,
    Single,
}

impl FromStr for Linkage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            "single" => Ok(Linkage::Single),
            other => Err(format!("unknown linkage {other:?}")),
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Linkage::Average => "average",
            Linkage::Complete => "complete",
            Linkage::Single => "single",
        })
    }
}

/// One merge: clusters `a < b` joined at `height`. Leaves are `0..d`; the
/// cluster formed by merge `t` has id `d + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    leaves: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Merge list as CSV: `step,a,b,height,size`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,a,b,height,size\n");
        for (t, m) in self.merges.iter().enumerate() {
            out.push_str(&format!("{},{},{},{:?},{}\n", t + 1, m.a, m.b, m.height, m.size));
        }
        out
    }
}

/// Agglomerative clustering with Lance–Williams updates. Among equal
/// distances the pair with the lexicographically smallest slot indices
/// merges first; a merged cluster keeps the smaller slot, which is its
/// smallest leaf.
pub fn agglomerate(dist: &DistanceMatrix, linkage: Linkage) -> Dendrogram {
    let d = dist.dim;
    let mut dm = dist.data.clone();
    let mut active: Vec<usize> = (0..d).collect();
    let mut ids: Vec<usize> = (0..d).collect();
    let mut sizes = vec![1usize; d];
    let mut merges = Vec::with_capacity(d.saturating_sub(1));
    for t in 0..d.saturating_sub(1) {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for (p, &i) in active.iter().enumerate() {
            for &j in &active[p + 1..] {
                let v = dm[i * d + j];
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        let (i, j, h) = best;
        let (ni, nj) = (sizes[i] as f64, sizes[j] as f64);
        for &k in &active {
            if k == i || k == j {
                continue;
            }
            let (dik, djk) = (dm[i * d + k], dm[j * d + k]);
            let v = match linkage {
                Linkage::Single => dik.min(djk),
                Linkage::Complete => dik.max(djk),
                Linkage::Average => (ni * dik + nj * djk) / (ni + nj),
            };
            dm[i * d + k] = v;
            dm[k * d + i] = v;
        }
        let (a, b) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
        sizes[i] += sizes[j];
        merges.push(Merge { a, b, height: h, size: sizes[i] });
        ids[i] = d + t;
        active.retain(|&x| x != j);
    }
    Dendrogram { leaves: d, merges }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot cut {leaves} leaves into {k} groups")]
pub struct CutError {
    pub leaves: usize,
    pub k: usize,
}

/// Partition into exactly `k` groups: the tree with its last `k − 1` merges
/// undone. Labels are canonical (first occurrence).
pub fn cut(dendro: &Dendrogram, k: usize) -> Result<ColumnPartition, CutError> {
    let d = dendro.leaves;
    if k == 0 || k > d {
        return Err(CutError { leaves: d, k });
    }
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    // representative leaf of every cluster id
    let mut rep: Vec<usize> = (0..d).collect();
    for m in &dendro.merges[..d - k] {
        let (ra, rb) = (find(&mut parent, rep[m.a]), find(&mut parent, rep[m.b]));
        parent[rb] = ra;
        rep.push(ra);
    }
    let roots: Vec<usize> = (0..d).map(|j| find(&mut parent, j)).collect();
    Ok(ColumnPartition::from_labels(&roots).expect("nonempty"))
}

/// `Σ_k diag(d_k) W diag(d_k)`: within-group entries copied, the rest exactly 0.
pub fn block_project(w: &SymMatrix, part: &ColumnPartition) -> SymMatrix {
    SymMatrix::from_fn(w.dim(), |i, j| if part.same_group(i, j) { w.get(i, j) } else { 0.0 })
}

/// Average silhouette of a partition. A single group scores 0, and so does
/// every point in a singleton group.
pub fn silhouette(dist: &DistanceMatrix, part: &ColumnPartition) -> f64 {
    let d = dist.dim;
    let k = part.k();
    if k < 2 {
        return 0.0;
    }
    let sizes = part.block_sizes();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for x in 0..d {
        let own = part.label(x);
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for y in 0..d {
            if y != x {
                sums[part.label(y)] += dist.get(x, y);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / d as f64
}

/// Scores the cuts `k = 1..=k_max` (k = 1 scores 0) and returns the best `k`,
/// smallest on ties. `k_max` is clamped to the number of leaves.
pub fn select_k_silhouette(
    dist: &DistanceMatrix,
    dendro: &Dendrogram,
    k_max: usize,
) -> (usize, BTreeMap<usize, f64>) {
    let k_max = k_max.min(dendro.leaves).max(1);
    let mut scores = BTreeMap::new();
    scores.insert(1, 0.0);
    let mut best = (1, 0.0);
    for k in 2..=k_max {
        let part = cut(dendro, k).expect("k within range");
        let s = silhouette(dist, &part);
        scores.insert(k, s);
        if s > best.1 {
            best = (k, s);
        }
    }
    (best.0, scores)
}

/// How the number of groups is chosen for one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupCount {
    Fixed(usize),
    Silhouette { k_max: usize },
}

/// Full pipeline on one scatter matrix: distances, tree, cut.
pub fn group_columns(
    w: &SymMatrix,
    linkage: Linkage,
    count: GroupCount,
) -> Result<ColumnPartition, LinalgError> {
    let dist = distance_matrix(w)?;
    let tree = agglomerate(&dist, linkage);
    let k = match count {
        GroupCount::Fixed(k) => k.clamp(1, w.dim()),
        GroupCount::Silhouette { k_max } => select_k_silhouette(&dist, &tree, k_max).0,
    };
    Ok(cut(&tree, k).expect("k clamped to range"))
}

/// `variable,component,group` rows, 1-based component and group numbers.
pub fn partitions_csv(var_names: &[String], parts: &[ColumnPartition]) -> String {
    let mut out = String::from("variable,component,group\n");
    for (g, p) in parts.iter().enumerate() {
        for (j, name) in var_names.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", csv_field(name), g + 1, p.label(j) + 1));
        }
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
