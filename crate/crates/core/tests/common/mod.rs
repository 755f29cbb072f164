//! Independent reference implementations shared by the integration tests
//! and the acceptance binary. The oracles never call into the library;
//! the case generators at the end do.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Gauss–Hermite rule for the standard normal weight: nodes and weights
/// with `Σ w = 1`, from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn ln_factorial(k: u64) -> f64 {
    (1..=k).map(|v| (v as f64).ln()).sum()
}

fn log_joint(y: &[u64], log_c: f64, x: &DVector<f64>, mu: &DVector<f64>, prec: &DMatrix<f64>, logdet_sigma: f64) -> f64 {
    let d = y.len() as f64;
    let diff = x - mu;
    let mut v = -0.5 * diff.dot(&(prec * &diff)) - 0.5 * logdet_sigma - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    for (j, &yj) in y.iter().enumerate() {
        let eta = log_c + x[j];
        v += yj as f64 * eta - eta.exp() - ln_factorial(yj);
    }
    v
}

/// `log ∫ Π_j Poisson(y_j | C e^{x_j}) N(x | μ, Σ) dx` for `d ≤ 2` by
/// adaptive Gauss–Hermite quadrature centred at the posterior mode.
pub fn log_marginal_quadrature(y: &[u64], log_c: f64, mu: &[f64], sigma: &[Vec<f64>], nodes: usize) -> f64 {
    let d = y.len();
    assert!(d == 1 || d == 2);
    let sig = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
    let prec = sig.clone().try_inverse().expect("invertible sigma");
    let logdet_sigma = sig.determinant().ln();
    let mu = DVector::from_column_slice(mu);

    // Newton iterations for the mode of the log joint
    let mut x = mu.clone();
    let hessian = |x: &DVector<f64>| {
        let mut h = -prec.clone();
        for j in 0..d {
            h[(j, j)] -= (log_c + x[j]).exp();
        }
        h
    };
    for _ in 0..200 {
        let rates = DVector::from_fn(d, |j, _| (log_c + x[j]).exp());
        let yv = DVector::from_fn(d, |j, _| y[j] as f64);
        let grad = yv - rates - &prec * (&x - &mu);
        let step = (-hessian(&x)).try_inverse().expect("negative definite") * &grad;
        let mut t = 1.0;
        let f0 = log_joint(y, log_c, &x, &mu, &prec, logdet_sigma);
        while log_joint(y, log_c, &(&x + t * &step), &mu, &prec, logdet_sigma) < f0 && t > 1e-8 {
            t *= 0.5;
        }
        x += t * &step;
        if step.amax() * t < 1e-14 {
            break;
        }
    }
    let cov = (-hessian(&x)).try_inverse().expect("PD");
    let l = cov.cholesky().expect("PD").l();
    let log_det_l: f64 = (0..d).map(|j| l[(j, j)].ln()).sum();
    let (z, w) = gauss_hermite_normal(nodes);
    // ∫ e^{h(x)} dx = |L| (2π)^{d/2} Σ w e^{h(x* + L z) + |z|²/2}
    let mut terms = Vec::new();
    let mut push = |zv: DVector<f64>, wt: f64| {
        let xv = &x + &l * &zv;
        terms.push(wt.ln() + log_joint(y, log_c, &xv, &mu, &prec, logdet_sigma) + 0.5 * zv.norm_squared());
    };
    if d == 1 {
        for (zi, wi) in z.iter().zip(&w) {
            push(DVector::from_element(1, *zi), *wi);
        }
    } else {
        for (zi, wi) in z.iter().zip(&w) {
            for (zj, wj) in z.iter().zip(&w) {
                push(DVector::from_column_slice(&[*zi, *zj]), wi * wj);
            }
        }
    }
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
    lse + log_det_l + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Pair-counting ARI over all `n(n-1)/2` pairs; 1 when both partitions are
/// trivial in the same way.
pub fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut n11, mut n10, mut n01, mut n00) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let total = n11 + n10 + n01 + n00;
    let x = (n11 + n10) * (n11 + n01) + (n01 + n00) * (n10 + n00);
    let den = total * total - x;
    if den == 0.0 {
        return 1.0;
    }
    (total * (n11 + n00) - x) / den
}

/// Direct average silhouette; points in singleton groups score 0, and a
/// single group scores 0.
pub fn silhouette_direct(dist: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for x in 0..d {
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..d).filter(|&y| y != x && labels[y] == c).collect();
            if members.is_empty() {
                None
            } else {
                Some(members.iter().map(|&y| dist[x][y]).sum::<f64>() / members.len() as f64)
            }
        };
        let Some(a) = mean_to(labels[x]) else { continue };
        let b = (0..k).filter(|&c| c != labels[x]).filter_map(mean_to).fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / d as f64
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Misclassification under the best injective relabelling, by exhaustive search.
pub fn misclassification_bruteforce(truth: &[usize], est: &[usize]) -> f64 {
    let kt = truth.iter().max().unwrap() + 1;
    let ke = est.iter().max().unwrap() + 1;
    let size = kt.max(ke);
    let mut best = 0;
    for perm in permutations(size) {
        // est label e is renamed perm[e]
        let agree = truth.iter().zip(est).filter(|(t, e)| perm[**e] == **t).count();
        best = best.max(agree);
    }
    1.0 - best as f64 / truth.len() as f64
}

/// Naive average linkage: recomputes the mean pairwise distance between
/// every pair of clusters at each step. Returns merge heights and the
/// cluster memberships after each merge.
pub fn average_linkage_naive(dist: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<Vec<usize>>>) {
    let d = dist.len();
    let mut clusters: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    let mut heights = Vec::new();
    let mut states = Vec::new();
    while clusters.len() > 1 {
        let mut best = (0, 0, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut s = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        s += dist[i][j];
                    }
                }
                let v = s / (clusters[a].len() * clusters[b].len()) as f64;
                if v < best.2 {
                    best = (a, b, v);
                }
            }
        }
        let moved = clusters.remove(best.1);
        clusters[best.0].extend(moved);
        clusters[best.0].sort_unstable();
        heights.push(best.2);
        let mut snap = clusters.clone();
        snap.sort();
        states.push(snap);
    }
    (heights, states)
}

/// Groups of a label vector as sorted member lists, sorted.
pub fn groups_of(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut g: Vec<Vec<usize>> = (0..k).map(|c| (0..labels.len()).filter(|&j| labels[j] == c).collect()).collect();
    g.retain(|v| !v.is_empty());
    g.sort();
    g
}

/// Straight-line variational fit of a one-dimensional, one-component model.
/// Returns `(μ, σ², m, s)`.
pub fn scalar_vga(y: &[u64], c: &[f64], sweeps: usize) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut m: Vec<f64> = y.iter().zip(c).map(|(&v, &ci)| ((v as f64 + 0.5) / ci).ln()).collect();
    let mut s = vec![0.1; n];
    let mut mu = m.iter().sum::<f64>() / n as f64;
    let mut var = m.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64 + 0.1;
    for _ in 0..sweeps {
        for i in 0..n {
            for _ in 0..200 {
                let rate = |mi: f64, si: f64| c[i] * (mi + 0.5 * si).exp();
                let s_new = 1.0 / (1.0 / var + rate(m[i], s[i]));
                let grad = y[i] as f64 - rate(m[i], s_new) - (m[i] - mu) / var;
                let hess = rate(m[i], s_new) + 1.0 / var;
                let m_new = m[i] + grad / hess;
                let change = (m_new - m[i]).abs().max((s_new - s[i]).abs());
                m[i] = m_new;
                s[i] = s_new;
                if change < 1e-15 {
                    break;
                }
            }
        }
        let mu_new = m.iter().sum::<f64>() / n as f64;
        let var_new = m.iter().zip(&s).map(|(v, si)| (v - mu_new).powi(2) + si).sum::<f64>() / n as f64;
        let change = (mu_new - mu).abs().max((var_new - var).abs());
        mu = mu_new;
        var = var_new;
        if change < 1e-14 {
            break;
        }
    }
    (mu, var, m, s)
}

use blockmpln::linalg::SymMatrix;
use blockmpln::model;
use blockmpln::vem;
use rand::Rng;

/// Random symmetric positive definite matrix `A Aᵀ / d + floor I`.
pub fn random_pd<R: Rng>(d: usize, floor: f64, rng: &mut R) -> SymMatrix {
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    SymMatrix::from_fn(d, |i, j| {
        (0..d).map(|k| a[i][k] * a[j][k]).sum::<f64>() / d as f64 + if i == j { floor } else { 0.0 }
    })
}

/// `log f(y) − F(q, y)` for `cases` random draws with `d ∈ {1, 2}`, half with
/// a random `q` and half with `q` optimized by the inner loop.
pub fn elbo_gaps<R: Rng>(cases: usize, rng: &mut R) -> Vec<f64> {
    (0..cases)
        .map(|t| {
            let d = 1 + t % 2;
            let y: Vec<u64> = (0..d).map(|_| rng.random_range(0..15)).collect();
            let log_c = rng.random_range(-0.5..0.5);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..2.0)).collect();
            let sigma = random_pd(d, 0.2, rng);
            let mut m: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..2.5)).collect();
            let mut s = random_pd(d, 0.05, rng);
            if t % 4 >= 2 {
                let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
                let (m2, s2) = vem::update_variational(&yf, log_c, &m, &s, &mu, &sigma, 200, 1e-12).unwrap();
                m = m2;
                s = s2;
            }
            let f = model::elbo_observation(&y, log_c, &m, &s, &mu, &sigma).unwrap();
            let nodes = if d == 1 { 40 } else { 30 };
            log_marginal_quadrature(&y, log_c, &mu, &sigma.to_rows(), nodes) - f
        })
        .collect()
}

use blockmpln::colgroup::{self, DistanceMatrix};
use blockmpln::data::{CountMatrix, OffsetVector};
use blockmpln::evaluate;
use blockmpln::model::ColumnPartition;
use blockmpln::simulate::{self, OffsetSpec, SimSpec};
use blockmpln::vem::{FitConfig, KSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random symmetric distances in `[0, 1)` with a zero diagonal.
pub fn random_distances<R: Rng>(d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..i {
            let v = rng.random_range(0.0..1.0);
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    rows
}

/// All labelings of length `n` over `g` labels.
pub fn labelings(n: usize, g: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v: Vec<usize>| {
                (0..g).map(move |l| {
                    let mut w = v.clone();
                    w.push(l);
                    w
                })
            })
            .collect();
    }
    out
}

/// Largest `|ari − pair counting|` over every pair of labelings with
/// `2 ≤ n ≤ 6` items and at most three labels; also the number compared.
pub fn ari_exhaustive_error() -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in 2..=6 {
        let all = labelings(n, 3);
        for a in &all {
            for b in &all {
                let got = evaluate::ari(a, b).unwrap();
                worst = worst.max((got - ari_pairs(a, b)).abs());
                count += 1;
            }
        }
    }
    (worst, count)
}

/// Largest silhouette error against [`silhouette_direct`] on random instances with `d ≤ 8`.
pub fn silhouette_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = rng.random_range(2..9);
        let rows = random_distances(d, &mut rng);
        let dist = DistanceMatrix::from_rows(&rows).unwrap();
        let k = rng.random_range(1..=d);
        let labels: Vec<usize> = (0..d).map(|j| if j < k { j } else { rng.random_range(0..k) }).collect();
        let part = ColumnPartition::from_labels(&labels).unwrap();
        let got = colgroup::silhouette(&dist, &part);
        worst = worst.max((got - silhouette_direct(&rows, part.labels())).abs());
    }
    worst
}

/// Largest misclassification error against full permutation search, `K ≤ 5`.
pub fn misclassification_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = rng.random_range(5..12);
        let kt = rng.random_range(1..=5);
        let ke = rng.random_range(1..=5);
        let mut draw = |k: usize| -> Vec<usize> { (0..d).map(|j| if j < k { j } else { rng.random_range(0..k) }).collect() };
        let t = ColumnPartition::from_labels(&draw(kt)).unwrap();
        let e = ColumnPartition::from_labels(&draw(ke)).unwrap();
        let got = evaluate::column_misclassification(&t, &e).unwrap();
        worst = worst.max((got - misclassification_bruteforce(t.labels(), e.labels())).abs());
    }
    worst
}

/// After the inner loop at `d = 1` from a poor start: the largest `|∂F/∂m|`
/// and the largest violation of `S = 1 / (1/σ² + C e^{m + S/2})`.
pub fn stationarity_residuals(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut grad_max, mut fixed_max) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let y = rng.random_range(0..40) as f64;
        let log_c = rng.random_range(-0.5..0.5);
        let mu = rng.random_range(-1.0..3.0);
        let var = rng.random_range(0.2..2.0);
        let sigma = SymMatrix::from_diag(&[var]);
        let (m, s) = vem::update_variational(&[y], log_c, &[mu], &SymMatrix::from_diag(&[0.1]), &[mu], &sigma, 500, 1e-14).unwrap();
        let s = s.get(0, 0);
        // written out rather than taken from the library
        let grad = y - (log_c + m[0] + 0.5 * s).exp() - (m[0] - mu) / var;
        let fixed = 1.0 / (1.0 / var + (log_c + m[0] + 0.5 * s).exp());
        grad_max = grad_max.max(grad.abs());
        fixed_max = fixed_max.max((s - fixed).abs());
    }
    (grad_max, fixed_max)
}

/// Small random instance: `n ≤ 60`, `d ≤ 6`, `G ≤ 2`. Returns the true `G`.
pub fn small_instance(seed: u64) -> (CountMatrix, OffsetVector, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..=60);
    let d = rng.random_range(2..=6);
    let g = rng.random_range(1..=2);
    let k = rng.random_range(1..=d.min(3));
    let spec = SimSpec {
        name: None,
        n,
        d,
        pi: if g == 1 { vec![1.0] } else { vec![0.4, 0.6] },
        mu: (0..g).map(|c| (0..d).map(|_| rng.random_range(0.5..3.0) + 1.5 * c as f64).collect()).collect(),
        block_sizes: vec![simulate::even_blocks(d, k); g],
        within_block_corr_range: (0.3, 0.7),
        variance_range: (0.3, 1.0),
        offsets: OffsetSpec::Unit,
        seed,
    };
    let (counts, _) = simulate::sample_dataset(&spec).unwrap();
    (counts, spec.offset_vector(), g)
}

/// Fits the 20 small instances and lists every step where the trace drops
/// by more than `1e-8` relative.
pub fn monotonicity_violations() -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..20 {
        let (counts, offsets, g) = small_instance(seed);
        let k = if seed % 3 == 0 {
            KSpec::Auto { k_max: counts.d().clamp(2, 3) }
        } else {
            KSpec::Equal((1 + seed as usize % 2).min(counts.d()))
        };
        let cfg = FitConfig { seed, n_starts: 2, ..FitConfig::default() };
        let fit = vem::fit(&counts, &offsets, g, &k, &cfg).unwrap();
        for (t, w) in fit.elbo_trace.windows(2).enumerate() {
            if w[1] < w[0] - 1e-8 * w[0].abs() {
                bad.push(format!("instance {seed}, step {t}: {} -> {}", w[0], w[1]));
            }
        }
    }
    bad
}
