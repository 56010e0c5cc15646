//! Rank-based weighted nearest-neighbor model.
//!
//! The `j`-th neighbor gets weight `π_j` with `π` on the probability simplex;
//! `p(t | I) = Σ_j π_j 𝕀(I_j, t)` (clamped to `[ε, 1 − ε]`). Weights are fit
//! by projected gradient ascent on the Bernoulli log-likelihood of the
//! training labels, each training image using its leave-one-out neighbors.
//! A backtracking step keeps the likelihood non-decreasing.

use super::{Neighbor, NeighborIndex};
use crate::data::AnnotationSet;
use crate::error::{Error, Result};

const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagPropConfig {
    pub k: usize,
    pub epochs: usize,
    pub step: f64,
}

impl Default for TagPropConfig {
    fn default() -> Self {
        TagPropConfig {
            k: 20,
            epochs: 50,
            step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagPropModel {
    pub weights: Vec<f64>,
    pub trained: bool,
}

impl TagPropModel {
    pub fn uniform(k: usize) -> Self {
        TagPropModel {
            weights: vec![1.0 / k as f64; k],
            trained: false,
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(
                "neighbor weights must be non-negative and sum to 1".into(),
            ));
        }
        Ok(TagPropModel {
            weights,
            trained: true,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone)]
pub struct TagPropFit {
    pub model: TagPropModel,
    /// Training log-likelihood before the first epoch and after each epoch.
    pub log_likelihood: Vec<f64>,
}

/// `f(t) = Σ_j π_j 𝕀(I_j, t)` over the ranked neighbors.
pub fn tagprop_score(
    model: &TagPropModel,
    neighbors: &[Neighbor],
    train: &AnnotationSet,
) -> Vec<f64> {
    let mut f = vec![0.0; train.vocabulary().len()];
    for (nb, &w) in neighbors.iter().zip(&model.weights) {
        for t in train.labels_of(nb.index) {
            f[t] += w;
        }
    }
    f
}

/// Euclidean projection onto `{π : π ≥ 0, Σπ = 1}`.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Per training image: the labels its neighbors carry, each with the ranks
/// of the neighbors carrying it, plus whether the image itself has it.
struct Evidence {
    rows: Vec<Vec<(Vec<usize>, bool)>>,
    /// Positive labels no neighbor carries (constant `log ε` terms).
    unexplained_pos: usize,
    /// All other (image, label) negatives: constant `log(1 − ε)` terms.
    silent_neg: usize,
}

impl Evidence {
    fn build(neighbors: &[Vec<Neighbor>], train: &AnnotationSet) -> Self {
        let d = train.vocabulary().len();
        let mut rows = Vec::with_capacity(neighbors.len());
        let mut unexplained_pos = 0;
        let mut silent_neg = 0;
        for (i, nbs) in neighbors.iter().enumerate() {
            let mut ranks: Vec<Vec<usize>> = vec![Vec::new(); d];
            for (j, nb) in nbs.iter().enumerate() {
                for t in train.labels_of(nb.index) {
                    ranks[t].push(j);
                }
            }
            let mut row = Vec::new();
            for (t, r) in ranks.into_iter().enumerate() {
                let y = train.has_label(i, t);
                if r.is_empty() {
                    if y {
                        unexplained_pos += 1;
                    } else {
                        silent_neg += 1;
                    }
                } else {
                    row.push((r, y));
                }
            }
            rows.push(row);
        }
        Evidence {
            rows,
            unexplained_pos,
            silent_neg,
        }
    }

    fn log_likelihood(&self, pi: &[f64]) -> f64 {
        let mut ll =
            self.unexplained_pos as f64 * EPS.ln() + self.silent_neg as f64 * (1.0 - EPS).ln();
        for row in &self.rows {
            for (ranks, y) in row {
                let p = ranks
                    .iter()
                    .map(|&j| pi[j])
                    .sum::<f64>()
                    .clamp(EPS, 1.0 - EPS);
                ll += if *y { p.ln() } else { (1.0 - p).ln() };
            }
        }
        ll
    }

    fn gradient(&self, pi: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; pi.len()];
        for row in &self.rows {
            for (ranks, y) in row {
                let raw: f64 = ranks.iter().map(|&j| pi[j]).sum();
                if raw <= EPS || raw >= 1.0 - EPS {
                    continue;
                }
                let dp = if *y { 1.0 / raw } else { -1.0 / (1.0 - raw) };
                for &j in ranks {
                    g[j] += dp;
                }
            }
        }
        g
    }
}

/// Log-likelihood of the training labels for given weights and neighbor lists.
pub fn tagprop_log_likelihood(
    pi: &[f64],
    neighbors: &[Vec<Neighbor>],
    train: &AnnotationSet,
) -> f64 {
    Evidence::build(neighbors, train).log_likelihood(pi)
}

/// Learns rank weights from leave-one-out neighborhoods of the training images.
pub fn tagprop_train(
    index: &NeighborIndex,
    train: &AnnotationSet,
    cfg: &TagPropConfig,
) -> Result<TagPropFit> {
    if cfg.k == 0 {
        return Err(Error::Config("TagProp needs K >= 1".into()));
    }
    if index.len() != train.len() {
        return Err(Error::Dimension(format!(
            "index has {} images, annotations have {}",
            index.len(),
            train.len()
        )));
    }
    let neighbors = (0..train.len())
        .map(|i| index.knn_excluding(&index.train_query(i), cfg.k, i))
        .collect::<Result<Vec<_>>>()?;
    tagprop_train_on(&neighbors, train, cfg)
}

/// Training on precomputed neighbor lists (one per training image).
pub fn tagprop_train_on(
    neighbors: &[Vec<Neighbor>],
    train: &AnnotationSet,
    cfg: &TagPropConfig,
) -> Result<TagPropFit> {
    let k = cfg.k;
    let ev = Evidence::build(neighbors, train);
    let terms = (train.len() * train.vocabulary().len()).max(1) as f64;
    let mut pi = TagPropModel::uniform(k).weights;
    let mut ll = ev.log_likelihood(&pi);
    let mut history = vec![ll];
    let mut step = cfg.step;
    for _ in 0..cfg.epochs {
        let g = ev.gradient(&pi);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite TagProp gradient".into()));
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = pi
                .iter()
                .zip(&g)
                .map(|(p, gj)| p + step * gj / terms)
                .collect();
            let cand = project_to_simplex(&cand);
            let cand_ll = ev.log_likelihood(&cand);
            if cand_ll >= ll {
                pi = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        history.push(ll);
        if accepted {
            step *= 1.5;
        }
    }
    Ok(TagPropFit {
        model: TagPropModel {
            weights: pi,
            trained: true,
        },
        log_likelihood: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;

    #[test]
    fn simplex_projection() {
        let p = project_to_simplex(&[0.5, 0.3, 0.2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(project_to_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let q = project_to_simplex(&[0.4, 0.4, -3.0]);
        assert!((q[0] - 0.5).abs() < 1e-15 && q[2] == 0.0);
    }

    #[test]
    fn hand_set_weights() {
        let v = Vocabulary::new(["t", "u"]).unwrap();
        let train = AnnotationSet::from_label_sets(
            v,
            vec![vec![0], vec![0], vec![]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let model = TagPropModel::new(vec![0.5, 0.3, 0.2]).unwrap();
        let nbs: Vec<Neighbor> = (0..3)
            .map(|index| Neighbor {
                index,
                distance: 0.0,
            })
            .collect();
        let f = tagprop_score(&model, &nbs, &train);
        assert!((f[0] - 0.8).abs() < 1e-15);
        assert_eq!(f[1], 0.0);
        assert!(TagPropModel::new(vec![0.5, 0.6]).is_err());
    }
}
