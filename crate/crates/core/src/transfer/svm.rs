//! Per-label linear scorers trained with L2-regularized least squares.
//!
//! For label `t` with targets `y = +1` (image carries `t`) or `−1`, SGD
//! minimizes `(1/N) Σ_i (⟨w, x_i⟩ + b − y_i)² + λ‖w‖²` with step
//! `η_s = η₀ / (1 + η₀ λ s)`, reshuffling the samples every epoch. All labels
//! share one sample order and are updated together. The returned weights
//! are the average of the iterates over the second half of the epochs; the
//! step barely decays when λ is small, so a short window keeps too much of
//! the SGD noise. The unregularized intercept is then set to its exact
//! minimizer given those weights, `b_t = mean_i(y_it − ⟨w_t, x_i⟩)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::AnnotationSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub step0: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 20,
            step0: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// `D x P`, one row per label.
    pub weights: DMatrix<f64>,
    pub intercepts: DVector<f64>,
}

fn targets(train: &AnnotationSet) -> DMatrix<f64> {
    let mut y = DMatrix::from_element(train.len(), train.vocabulary().len(), -1.0);
    for i in 0..train.len() {
        for t in train.labels_of(i) {
            y[(i, t)] = 1.0;
        }
    }
    y
}

pub fn svm_train(x: &DMatrix<f64>, train: &AnnotationSet, cfg: &SvmConfig) -> Result<SvmModel> {
    let (n, p) = x.shape();
    if n != train.len() {
        return Err(Error::Dimension(format!(
            "{n} feature rows for {} annotated images",
            train.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("no training images".into()));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.step0 > 0.0) || cfg.epochs == 0 {
        return Err(Error::Config(
            "SVM needs lambda >= 0, step0 > 0 and at least one epoch".into(),
        ));
    }
    let y = targets(train);
    let d = y.ncols();
    let mut w = DMatrix::<f64>::zeros(d, p);
    let mut b = DVector::<f64>::zeros(d);
    let mut w_avg = DMatrix::<f64>::zeros(d, p);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = 0u64;
    let first_averaged = cfg.epochs / 2;
    let mut averaged = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let tail = epoch >= first_averaged;
        for &i in &order {
            let eta = cfg.step0 / (1.0 + cfg.step0 * cfg.lambda * s as f64);
            let xi = x.row(i);
            // residual e = W x_i + b − y_i
            let mut e = &w * xi.transpose() + &b;
            for t in 0..d {
                e[t] -= y[(i, t)];
            }
            w *= 1.0 - 2.0 * eta * cfg.lambda;
            w.ger(-2.0 * eta, &e, &xi.transpose(), 1.0);
            b.axpy(-2.0 * eta, &e, 1.0);
            if tail {
                w_avg += &w;
                averaged += 1;
            }
            s += 1;
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("SGD diverged in epoch {epoch}")));
        }
    }
    let weights = w_avg / averaged as f64;
    let fitted = x * weights.transpose();
    let intercepts = DVector::from_fn(d, |t, _| (y.column(t) - fitted.column(t)).mean());
    Ok(SvmModel {
        weights,
        intercepts,
    })
}

/// `f(t) = b_t + ⟨w_t, x⟩`.
pub fn svm_score(model: &SvmModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.weights.ncols() {
        return Err(Error::Dimension(format!(
            "query has {} features, model expects {}",
            x.len(),
            model.weights.ncols()
        )));
    }
    let xv = DVector::from_column_slice(x);
    Ok((&model.weights * xv + &model.intercepts)
        .iter()
        .copied()
        .collect())
}

/// Per-label training objective `(1/N) Σ (⟨w_t, x_i⟩ + b_t − y_it)² + λ‖w_t‖²`.
pub fn svm_objective(
    model: &SvmModel,
    x: &DMatrix<f64>,
    train: &AnnotationSet,
    lambda: f64,
) -> Vec<f64> {
    let y = targets(train);
    let n = x.nrows() as f64;
    let pred = x * model.weights.transpose();
    (0..y.ncols())
        .map(|t| {
            let loss: f64 = (0..x.nrows())
                .map(|i| {
                    let r = pred[(i, t)] + model.intercepts[t] - y[(i, t)];
                    r * r
                })
                .sum();
            loss / n + lambda * model.weights.row(t).norm_squared()
        })
        .collect()
}
