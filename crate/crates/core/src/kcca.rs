//! Regularized kernel CCA and the semantic-space projection.
//!
//! The dual problem
//!
//! ```text
//! (Kv + κI)⁻¹ Kt (Kt + κI)⁻¹ Kv α = λ² α
//! ```
//!
//! is solved on low-rank factors `Kv ≈ Gv Gvᵀ`, `Kt ≈ Gt Gtᵀ` from pivoted
//! incomplete Cholesky (partial Gram-Schmidt). In factor coordinates it is
//! ordinary regularized CCA: whiten each side by `(GᵀG + κI)^(-1/2)`, take
//! the SVD of the whitened cross-covariance, and lift the left singular
//! vectors back to dual coordinates. The singular values are the canonical
//! correlations `λ_j`.
//!
//! Dual directions are scaled so that `αᵀ(Kv² + κKv)α = 1` and signed so their
//! largest-magnitude entry is positive.

use nalgebra::{DMatrix, DVector};

use crate::data::{FeatureMatrix, GramMatrix, KernelBlock, SemanticProjector};
use crate::error::{Error, Result};

/// Singular values at or below this are treated as zero correlation.
const CORRELATION_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KccaConfig {
    pub kappa: f64,
    pub max_rank: usize,
    pub pgso_tol: f64,
    /// Retained components; `None` keeps every attainable one.
    pub m_dims: Option<usize>,
}

impl Default for KccaConfig {
    fn default() -> Self {
        KccaConfig {
            kappa: 0.5,
            max_rank: 4096,
            pgso_tol: 1e-6,
            m_dims: None,
        }
    }
}

impl KccaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!(
                "kappa must lie in [0, 1], got {}",
                self.kappa
            )));
        }
        if self.max_rank == 0 {
            return Err(Error::Config("max_rank must be at least 1".into()));
        }
        if !(self.pgso_tol > 0.0) {
            return Err(Error::Config(format!(
                "pgso_tol must be positive, got {}",
                self.pgso_tol
            )));
        }
        if self.m_dims == Some(0) {
            return Err(Error::Config("m_dims must be at least 1".into()));
        }
        Ok(())
    }
}

/// Low-rank factor `K ≈ G Gᵀ` with `G` of shape `N x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PgsoFactor {
    pub g: DMatrix<f64>,
    /// Training indices in the order they were chosen.
    pub pivots: Vec<usize>,
    /// Trace of `K − G Gᵀ` when the factorization stopped.
    pub residual_trace: f64,
}

impl PgsoFactor {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }
}

/// Pivoted incomplete Cholesky / partial Gram-Schmidt orthogonalization.
///
/// Greedily pivots on the largest remaining diagonal entry (lowest index on
/// ties) and stops once the residual trace drops to `tol · trace(K)` or the
/// rank reaches `max_rank`.
pub fn pgso(k: &DMatrix<f64>, max_rank: usize, tol: f64) -> Result<PgsoFactor> {
    let n = k.nrows();
    if !k.is_square() {
        return Err(Error::Dimension(format!(
            "pgso needs a square matrix, got {}x{}",
            n,
            k.ncols()
        )));
    }
    let mut diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    if let Some(i) = diag.iter().position(|&d| d < -1e-10) {
        return Err(Error::NotPsd(format!(
            "negative diagonal entry {} at index {i}",
            diag[i]
        )));
    }
    for d in &mut diag {
        *d = d.max(0.0);
    }
    let trace: f64 = diag.iter().sum();
    let stop = tol * trace;

    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut residual = trace;
    while pivots.len() < max_rank.min(n) && residual > stop {
        let (j, &dj) = diag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("n > 0 while residual > 0");
        if dj <= 0.0 {
            break;
        }
        let pivot = dj.sqrt();
        let mut col = vec![0.0; n];
        for (i, c) in col.iter_mut().enumerate() {
            if i == j {
                *c = pivot;
                continue;
            }
            let mut v = k[(i, j)];
            for prev in &cols {
                v -= prev[i] * prev[j];
            }
            *c = v / pivot;
        }
        for (i, c) in col.iter().enumerate() {
            diag[i] = (diag[i] - c * c).max(0.0);
        }
        diag[j] = 0.0;
        for &p in &pivots {
            diag[p] = 0.0;
        }
        cols.push(col);
        pivots.push(j);
        residual = diag.iter().sum();
    }
    let g = DMatrix::from_fn(n, cols.len(), |i, t| cols[t][i]);
    Ok(PgsoFactor {
        g,
        pivots,
        residual_trace: residual,
    })
}

/// `(S)^(-1/2)` for symmetric PSD `S`, dropping numerically null directions.
fn inv_sqrt_psd(s: DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = max * 1e-14;
    let inv = eig
        .eigenvalues
        .map(|l| if l > floor { 1.0 / l.sqrt() } else { 0.0 });
    let v = &eig.eigenvectors;
    let w = v * DMatrix::from_diagonal(&inv) * v.transpose();
    (&w + w.transpose()) * 0.5
}

fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Fits the semantic projector on paired visual/textual grams over the same
/// training images.
pub fn fit_kcca(kv: &GramMatrix, kt: &GramMatrix, cfg: &KccaConfig) -> Result<SemanticProjector> {
    cfg.validate()?;
    if kv.n() != kt.n() {
        return Err(Error::Dimension(format!(
            "visual gram has {} images, textual gram has {}",
            kv.n(),
            kt.n()
        )));
    }
    if kv.row_ids() != kt.row_ids() {
        return Err(Error::Data(
            "visual and textual grams are not aligned on image ids".into(),
        ));
    }
    let fv = pgso(kv.values(), cfg.max_rank, cfg.pgso_tol)?;
    let ft = pgso(kt.values(), cfg.max_rank, cfg.pgso_tol)?;
    if fv.rank() == 0 || ft.rank() == 0 {
        return Err(Error::Numeric("a kernel matrix has zero rank".into()));
    }
    log::debug!(
        "pgso ranks: visual {} (residual {:.3e}), textual {} (residual {:.3e})",
        fv.rank(),
        fv.residual_trace,
        ft.rank(),
        ft.residual_trace
    );
    let (gv, gt) = (&fv.g, &ft.g);
    let kappa = cfg.kappa;
    let wv = inv_sqrt_psd(gv.tr_mul(gv) + DMatrix::identity(gv.ncols(), gv.ncols()) * kappa);
    let wt = inv_sqrt_psd(gt.tr_mul(gt) + DMatrix::identity(gt.ncols(), gt.ncols()) * kappa);
    let cross = &wv * gv.tr_mul(gt) * &wt;

    let svd = cross.svd(true, false);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Numeric("SVD did not produce singular vectors".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let attainable = order
        .iter()
        .take_while(|&&j| sv[j] > CORRELATION_FLOOR)
        .count();
    if attainable == 0 {
        return Err(Error::Numeric("no positive canonical correlation".into()));
    }
    let m = match cfg.m_dims {
        Some(m) if m > attainable => {
            log::warn!("requested {m} semantic dimensions, only {attainable} attainable; clamping");
            attainable
        }
        Some(m) => m,
        None => attainable,
    };

    // Minimum-norm dual vector with Gvᵀ α = a: α = Q R⁻ᵀ a for Gv = QR.
    let qr = gv.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let rt = r.transpose();

    let n = kv.n();
    let mut basis = DMatrix::zeros(n, m);
    let mut corr = Vec::with_capacity(m);
    for (col, &j) in order.iter().take(m).enumerate() {
        let mut rho = sv[j];
        if rho > 1.0 {
            if rho > 1.0 + 1e-6 {
                return Err(Error::Numeric(format!(
                    "canonical correlation {rho} exceeds 1"
                )));
            }
            rho = 1.0;
        }
        let a = &wv * u.column(j);
        let y = rt.solve_lower_triangular(&a).ok_or_else(|| {
            Error::Numeric("singular triangular factor while lifting dual basis".into())
        })?;
        let mut alpha = &q * y;
        fix_sign(&mut alpha);
        basis.set_column(col, &alpha);
        corr.push(rho);
    }
    if basis.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite dual basis".into()));
    }
    SemanticProjector::new(basis, corr, kv.row_ids().to_vec(), kv.kernel_id())
}

/// `ψ = (K A) diag(r)` for kernel rows of query images against the training
/// images of `p`.
pub fn project(p: &SemanticProjector, rows: &KernelBlock) -> Result<FeatureMatrix> {
    if rows.values.ncols() != p.n_train() {
        return Err(Error::Dimension(format!(
            "kernel block has {} columns, projector was trained on {} images",
            rows.values.ncols(),
            p.n_train()
        )));
    }
    if rows.kernel_id != p.kernel_id() {
        if rows.kernel_id == "unknown" {
            log::warn!(
                "kernel block has no recorded kernel id; assuming `{}`",
                p.kernel_id()
            );
        } else {
            return Err(Error::Data(format!(
                "kernel block was computed with `{}`, projector expects `{}`",
                rows.kernel_id,
                p.kernel_id()
            )));
        }
    }
    if !rows.col_ids.is_empty() && rows.col_ids != p.train_row_ids() {
        return Err(Error::Data(
            "kernel block columns do not match the training images".into(),
        ));
    }
    let mut psi = &rows.values * p.dual_basis();
    for (j, &r) in p.correlations().iter().enumerate() {
        psi.column_mut(j).scale_mut(r);
    }
    FeatureMatrix::new(psi, rows.row_ids.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    #[test]
    fn pgso_identity() {
        let f = pgso(&DMatrix::identity(5, 5), 10, 1e-6).unwrap();
        assert_eq!(f.rank(), 5);
        assert_eq!(f.residual_trace, 0.0);
        assert_eq!(f.pivots, vec![0, 1, 2, 3, 4]);
        assert!((&f.g * f.g.transpose() - DMatrix::<f64>::identity(5, 5)).norm() < 1e-15);
    }

    #[test]
    fn pgso_rank_one() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let k = &v * v.transpose();
        let f = pgso(&k, 4, 1e-9).unwrap();
        assert_eq!(f.rank(), 1);
        assert_eq!(f.pivots, vec![3]);
        assert!(f.residual_trace < 1e-12);
    }

    #[test]
    fn pgso_respects_max_rank_and_rejects_negative_diagonal() {
        let f = pgso(&DMatrix::identity(6, 6), 2, 1e-9).unwrap();
        assert_eq!(f.rank(), 2);
        assert!((f.residual_trace - 4.0).abs() < 1e-12);
        let mut k = DMatrix::identity(3, 3);
        k[(1, 1)] = -1e-3;
        assert!(matches!(pgso(&k, 3, 1e-6), Err(Error::NotPsd(_))));
    }

    fn gram(m: DMatrix<f64>) -> GramMatrix {
        let n = m.nrows();
        GramMatrix::new(m, "k", ids(n)).unwrap()
    }

    #[test]
    fn identical_views_are_perfectly_correlated() {
        let x = DMatrix::from_fn(12, 4, |i, j| {
            ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * j as f64
        });
        let k = gram(&x * x.transpose());
        let cfg = KccaConfig {
            kappa: 0.0,
            pgso_tol: 1e-12,
            ..KccaConfig::default()
        };
        let p = fit_kcca(&k, &k, &cfg).unwrap();
        assert_eq!(p.m_dims(), 4);
        for &r in p.correlations() {
            assert!((r - 1.0).abs() < 1e-9, "{r}");
        }
    }

    #[test]
    fn basis_normalization_and_sign() {
        let x = DMatrix::from_fn(10, 3, |i, j| {
            ((i * 5 + j * 2) % 7) as f64 + 0.3 * (i as f64).sin()
        });
        let y = DMatrix::from_fn(10, 2, |i, j| {
            ((i * 3 + j) % 5) as f64 + 0.2 * (j as f64 + i as f64).cos()
        });
        let kv = gram(&x * x.transpose());
        let kt = gram(&y * y.transpose());
        let cfg = KccaConfig {
            kappa: 0.1,
            pgso_tol: 1e-13,
            ..KccaConfig::default()
        };
        let p = fit_kcca(&kv, &kt, &cfg).unwrap();
        let k = kv.values();
        let metric = k * k + k * 0.1;
        for j in 0..p.m_dims() {
            let a = p.dual_basis().column(j);
            let norm = (a.transpose() * &metric * a)[(0, 0)];
            assert!((norm - 1.0).abs() < 1e-8, "{norm}");
            let big = a
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
        assert!(p.correlations().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let a = GramMatrix::new(DMatrix::identity(3, 3), "k", ids(3)).unwrap();
        let b = GramMatrix::new(
            DMatrix::identity(3, 3),
            "k",
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap();
        assert!(fit_kcca(&a, &b, &KccaConfig::default()).is_err());
        let c = GramMatrix::new(DMatrix::identity(4, 4), "k", ids(4)).unwrap();
        assert!(fit_kcca(&a, &c, &KccaConfig::default()).is_err());
    }

    #[test]
    fn m_dims_is_clamped() {
        let k = gram(DMatrix::identity(4, 4) * 2.0);
        let cfg = KccaConfig {
            m_dims: Some(10),
            ..KccaConfig::default()
        };
        assert_eq!(fit_kcca(&k, &k, &cfg).unwrap().m_dims(), 4);
    }

    #[test]
    fn projection_checks_and_linearity() {
        let x = DMatrix::from_fn(8, 3, |i, j| ((i + 2 * j) % 5) as f64 + 0.5);
        let kv = gram(&x * x.transpose());
        let p = fit_kcca(&kv, &kv, &KccaConfig::default()).unwrap();
        let train = project(&p, &kv.as_block()).unwrap();
        let expected = kv.values()
            * p.dual_basis()
            * DMatrix::from_diagonal(&DVector::from_row_slice(p.correlations()));
        assert_eq!(train.values(), &expected);

        let zero = KernelBlock {
            values: DMatrix::zeros(1, 8),
            kernel_id: "k".into(),
            row_ids: vec!["q".into()],
            col_ids: vec![],
        };
        assert!(project(&p, &zero)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let mut wrong = zero.clone();
        wrong.kernel_id = "other".into();
        assert!(project(&p, &wrong).is_err());
        let short = KernelBlock {
            values: DMatrix::zeros(1, 7),
            ..zero
        };
        assert!(matches!(project(&p, &short), Err(Error::Dimension(_))));
    }
}
