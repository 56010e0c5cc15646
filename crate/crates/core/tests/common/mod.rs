//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the code paths it is used to check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Well-conditioned full-rank PSD matrix `X Xᵀ / d + ridge I`.
pub fn random_psd(rng: &mut impl Rng, n: usize, d: usize, ridge: f64) -> DMatrix<f64> {
    let x = normal_matrix(rng, n, d);
    let k = &x * x.transpose() / d as f64 + DMatrix::identity(n, n) * ridge;
    (&k + k.transpose()) * 0.5
}

/// Dense solution of `(Kv + κI)⁻¹ Kt (Kt + κI)⁻¹ Kv α = λ² α`.
///
/// Left-multiplying by `Kv (Kv + κI)` turns it into the symmetric-definite
/// pencil `Kv P Kv α = λ² (Kv² + κKv) α` with `P = Kt (Kt + κI)⁻¹`, solved by
/// Cholesky reduction on the full `N x N` matrices. Each returned vector is
/// also checked against the literal nonsymmetric operator. Vectors are scaled
/// to `αᵀ(Kv² + κKv)α = 1` with the largest-magnitude entry positive.
pub struct DenseKcca {
    pub correlations: Vec<f64>,
    pub alphas: DMatrix<f64>,
}

pub fn dense_kcca(kv: &DMatrix<f64>, kt: &DMatrix<f64>, kappa: f64, m: usize) -> DenseKcca {
    let n = kv.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let cv_inv = (kv + &eye * kappa)
        .try_inverse()
        .expect("Kv + κI invertible");
    let ct_inv = (kt + &eye * kappa)
        .try_inverse()
        .expect("Kt + κI invertible");
    let literal = &cv_inv * kt * &ct_inv * kv;

    let p = kt * &ct_inv;
    let p = (&p + p.transpose()) * 0.5;
    let a = kv * &p * kv;
    let a = (&a + a.transpose()) * 0.5;
    let b = kv * kv + kv * kappa;
    let b = (&b + b.transpose()) * 0.5;
    let l = b
        .clone()
        .cholesky()
        .expect("Kv² + κKv positive definite")
        .l();
    let l_inv = l.clone().try_inverse().unwrap();
    let c = &l_inv * a * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut alphas = DMatrix::zeros(n, m);
    let mut correlations = Vec::with_capacity(m);
    for (col, &j) in order.iter().take(m).enumerate() {
        let mu = eig.eigenvalues[j];
        let mut alpha: DVector<f64> = l_inv.transpose() * eig.eigenvectors.column(j);
        let resid = (&literal * &alpha - &alpha * mu).norm() / alpha.norm();
        assert!(resid < 1e-8, "dense oracle residual {resid}");
        let norm = (alpha.transpose() * &b * &alpha)[(0, 0)].sqrt();
        alpha /= norm;
        let big = alpha
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if big < 0.0 {
            alpha.neg_mut();
        }
        alphas.set_column(col, &alpha);
        correlations.push(mu.max(0.0).sqrt());
    }
    DenseKcca {
        correlations,
        alphas,
    }
}

/// Largest principal angle (radians) between the column spaces of `a` and `b`.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let min = s.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    min.acos()
}

/// Brute-force average precision of a ranking given relevance flags in rank order.
pub fn ap_bruteforce(relevant_in_rank_order: &[bool]) -> f64 {
    let total = relevant_in_rank_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..relevant_in_rank_order.len() {
        if relevant_in_rank_order[k] {
            let hits = relevant_in_rank_order[..=k].iter().filter(|&&r| r).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total as f64
}

/// ArcCosine kernel of order 2 evaluated from its closed form.
pub fn arccos2_scalar(x: &[f64], y: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let theta = (dot / (nx * ny)).clamp(-1.0, 1.0).acos();
    let (s, c) = theta.sin_cos();
    let j2 = 3.0 * s * c + (std::f64::consts::PI - theta) * (1.0 + 2.0 * c * c);
    nx * nx * ny * ny * j2 / std::f64::consts::PI
}

/// `Σ (a−b)²/(a+b)` over dense weights, skipping `0/0` terms.
pub fn chi2_scalar(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y) * (x - y) / (x + y))
        .sum()
}

/// Random label sets: each of `d` labels present with probability `p`.
pub fn random_sets(rng: &mut impl Rng, n: usize, d: usize, p: f64) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| (0..d).filter(|_| rng.random_bool(p)).collect())
        .collect()
}

pub fn dense_of(sets: &[Vec<usize>], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(sets.len(), d);
    for (i, s) in sets.iter().enumerate() {
        for &t in s {
            m[(i, t)] = 1.0;
        }
    }
    m
}

/// Indices `0..n` ordered by `key` ascending, ties by index.
pub fn argsort_by(n: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b)));
    idx
}

pub struct MetricOracle {
    pub map: f64,
    pub prec: f64,
    pub rec: f64,
    pub n_plus: usize,
}

/// Every metric recomputed from sorted rankings and explicit counts.
pub fn metric_oracle(values: &DMatrix<f64>, sets: &[Vec<usize>], n: usize) -> MetricOracle {
    let (m, d) = values.shape();
    let mut aps = Vec::new();
    for t in 0..d {
        if sets.iter().any(|s| s.contains(&t)) {
            let order = argsort_by(m, |i| -values[(i, t)]);
            let flags: Vec<bool> = order.iter().map(|&i| sets[i].contains(&t)).collect();
            aps.push(ap_bruteforce(&flags));
        }
    }
    let top: Vec<Vec<usize>> = (0..m)
        .map(|i| argsort_by(d, |t| -values[(i, t)])[..n].to_vec())
        .collect();
    let (mut prec, mut rec, mut with_pos, mut n_plus) = (0.0, 0.0, 0, 0);
    for t in 0..d {
        let predicted = (0..m).filter(|&i| top[i].contains(&t)).count();
        let correct = (0..m)
            .filter(|&i| top[i].contains(&t) && sets[i].contains(&t))
            .count();
        let positives = (0..m).filter(|&i| sets[i].contains(&t)).count();
        if predicted > 0 {
            prec += correct as f64 / predicted as f64;
        }
        if positives > 0 {
            rec += correct as f64 / positives as f64;
            with_pos += 1;
        }
        if correct > 0 {
            n_plus += 1;
        }
    }
    MetricOracle {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        prec: prec / d as f64,
        rec: rec / with_pos as f64,
        n_plus,
    }
}

/// Exact minimizer of `(1/N)‖Xw + b − y‖² + λ‖w‖²`: center, then solve the
/// ridge normal equations.
pub fn ridge_optimum(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
    let (n, p) = x.shape();
    let xm = DVector::from_fn(p, |j, _| x.column(j).mean());
    let ym = y.mean();
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - xm[j]);
    let yc = y.map(|v| v - ym);
    let a = xc.transpose() * &xc / n as f64 + DMatrix::identity(p, p) * lambda;
    let w = a
        .cholesky()
        .unwrap()
        .solve(&(xc.transpose() * yc / n as f64));
    let b = ym - (xm.transpose() * &w)[(0, 0)];
    let resid = x * &w + DVector::from_element(n, b) - y;
    resid.norm_squared() / n as f64 + lambda * w.norm_squared()
}
