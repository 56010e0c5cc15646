//! Label transfer: nearest-neighbor search in the semantic (or baseline
//! visual) space and relevance functions scoring every (image, label) pair.

mod svm;
mod tagprop;

use nalgebra::DMatrix;

use crate::data::{AnnotationSet, FeatureMatrix, GramMatrix, Vocabulary};
use crate::error::{Error, Result};

pub use svm::{svm_objective, svm_score, svm_train, SvmConfig, SvmModel};
pub use tagprop::{
    project_to_simplex, tagprop_log_likelihood, tagprop_score, tagprop_train, tagprop_train_on,
    TagPropConfig, TagPropFit, TagPropModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// `1 − cos(ψ_q, ψ_i)`; a zero vector is at distance 1 from everything.
    CosineOnPsi,
    /// `1 − K̃v(q, i)` with `K̃v` min-max normalized over the training gram.
    OneMinusKv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Exhaustive-scan index over the training images.
///
/// Queries are plain slices: an embedding row in semantic mode, a raw
/// (unnormalized) visual kernel row against the training images in baseline
/// mode.
#[derive(Debug, Clone)]
pub enum NeighborIndex {
    Semantic {
        embedding: FeatureMatrix,
        norms: Vec<f64>,
    },
    Baseline {
        gram: GramMatrix,
        lo: f64,
        hi: f64,
    },
}

impl NeighborIndex {
    pub fn semantic(embedding: FeatureMatrix) -> Self {
        let norms = embedding.values().row_iter().map(|r| r.norm()).collect();
        NeighborIndex::Semantic { embedding, norms }
    }

    pub fn baseline(gram: GramMatrix) -> Self {
        let lo = gram.values().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = gram
            .values()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        NeighborIndex::Baseline { gram, lo, hi }
    }

    pub fn metric(&self) -> Metric {
        match self {
            NeighborIndex::Semantic { .. } => Metric::CosineOnPsi,
            NeighborIndex::Baseline { .. } => Metric::OneMinusKv,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NeighborIndex::Semantic { embedding, .. } => embedding.n_rows(),
            NeighborIndex::Baseline { gram, .. } => gram.n(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expected query length.
    pub fn query_dim(&self) -> usize {
        match self {
            NeighborIndex::Semantic { embedding, .. } => embedding.n_cols(),
            NeighborIndex::Baseline { gram, .. } => gram.n(),
        }
    }

    /// The query that represents training image `i` itself.
    pub fn train_query(&self, i: usize) -> Vec<f64> {
        match self {
            NeighborIndex::Semantic { embedding, .. } => embedding.row(i),
            NeighborIndex::Baseline { gram, .. } => gram.values().row(i).iter().copied().collect(),
        }
    }

    /// Min-max normalization of a raw kernel value into `[0, 1]`.
    fn normalize(lo: f64, hi: f64, k: f64) -> f64 {
        if hi > lo {
            ((k - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }

    /// Distance from the query to every training image.
    pub fn distances(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.query_dim() {
            return Err(Error::Dimension(format!(
                "query has length {}, index expects {}",
                query.len(),
                self.query_dim()
            )));
        }
        Ok(match self {
            NeighborIndex::Semantic { embedding, norms } => {
                let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
                embedding
                    .values()
                    .row_iter()
                    .zip(norms)
                    .map(|(row, &n)| {
                        if qn == 0.0 || n == 0.0 {
                            return 1.0;
                        }
                        let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
                        1.0 - dot / (qn * n)
                    })
                    .collect()
            }
            NeighborIndex::Baseline { lo, hi, .. } => query
                .iter()
                .map(|&k| 1.0 - Self::normalize(*lo, *hi, k))
                .collect(),
        })
    }

    /// The `k` nearest training images, ascending distance, ties by index.
    pub fn knn_query(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let d = self.distances(query)?;
        nearest(&d, k, None)
    }

    /// As [`knn_query`](Self::knn_query) but never returns training image `exclude`.
    pub fn knn_excluding(&self, query: &[f64], k: usize, exclude: usize) -> Result<Vec<Neighbor>> {
        let d = self.distances(query)?;
        nearest(&d, k, Some(exclude))
    }
}

/// Sorts `(distance, index)` pairs and keeps the first `k`.
pub fn nearest(distances: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Neighbor>> {
    let available = distances.len() - usize::from(exclude.is_some_and(|e| e < distances.len()));
    if k == 0 || k > available {
        return Err(Error::Config(format!(
            "neighbor count K = {k} must lie in 1..={available}"
        )));
    }
    let mut all: Vec<Neighbor> = distances
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(index, &distance)| Neighbor { index, distance })
        .collect();
    let cmp = |a: &Neighbor, b: &Neighbor| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.index.cmp(&b.index))
    };
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    Ok(all)
}

/// Image-by-label scores from a relevance function.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceScores {
    pub row_ids: Vec<String>,
    pub vocabulary: Vocabulary,
    pub values: DMatrix<f64>,
}

impl RelevanceScores {
    pub fn new(row_ids: Vec<String>, vocabulary: Vocabulary, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != row_ids.len() || values.ncols() != vocabulary.len() {
            return Err(Error::Dimension(format!(
                "scores are {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                row_ids.len(),
                vocabulary.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite relevance score".into()));
        }
        Ok(RelevanceScores {
            row_ids,
            vocabulary,
            values,
        })
    }

    pub fn from_rows(
        row_ids: Vec<String>,
        vocabulary: Vocabulary,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let d = vocabulary.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension(format!(
                "score row of length {}, expected {d}",
                bad.len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(
            row_ids,
            vocabulary,
            DMatrix::from_row_slice(rows.len(), d, &flat),
        )
    }

    pub fn n_images(&self) -> usize {
        self.values.nrows()
    }
}

/// `f(t) = k_t`, the number of neighbors carrying label `t`.
pub fn f_knn(neighbors: &[Neighbor], train: &AnnotationSet) -> Vec<f64> {
    let mut f = vec![0.0; train.vocabulary().len()];
    for nb in neighbors {
        for t in train.labels_of(nb.index) {
            f[t] += 1.0;
        }
    }
    f
}

/// `f(t) = k_t − K n_t / |S|` where `n_t` counts label `t` over the whole
/// training collection of size `|S|`.
pub fn f_tagvote(
    neighbors: &[Neighbor],
    train: &AnnotationSet,
    label_counts: &[usize],
    collection_size: usize,
) -> Result<Vec<f64>> {
    if collection_size == 0 {
        return Err(Error::Data(
            "tag relevance needs a non-empty collection".into(),
        ));
    }
    let k = neighbors.len() as f64;
    let s = collection_size as f64;
    Ok(f_knn(neighbors, train)
        .into_iter()
        .zip(label_counts)
        .map(|(kt, &nt)| kt - k * nt as f64 / s)
        .collect())
}

/// Training images carrying each label, for the balanced-neighborhood phase.
#[derive(Debug, Clone)]
pub struct LabelImages(Vec<Vec<usize>>);

impl LabelImages {
    pub fn new(train: &AnnotationSet) -> Self {
        let mut per = vec![Vec::new(); train.vocabulary().len()];
        for i in 0..train.len() {
            for t in train.labels_of(i) {
                per[t].push(i);
            }
        }
        LabelImages(per)
    }

    pub fn images(&self, label: usize) -> &[usize] {
        &self.0[label]
    }
}

/// Two-phase balanced-neighborhood relevance.
///
/// Phase one gathers, for every label, the `m_per_label` nearest training
/// images annotated with it; phase two sums `exp(−d)` over the union of those
/// pools for every label the pooled images carry. `distances` holds the query
/// distance to every training image.
pub fn f_2pknn(
    distances: &[f64],
    train: &AnnotationSet,
    pools: &LabelImages,
    m_per_label: usize,
) -> Result<Vec<f64>> {
    let d = train.vocabulary().len();
    if d == 0 {
        return Err(Error::Data("empty vocabulary".into()));
    }
    if distances.len() != train.len() {
        return Err(Error::Dimension(format!(
            "{} distances for {} training images",
            distances.len(),
            train.len()
        )));
    }
    let mut in_union = vec![false; train.len()];
    for t in 0..d {
        let mut pool: Vec<usize> = pools.images(t).to_vec();
        let cmp = |&a: &usize, &b: &usize| distances[a].total_cmp(&distances[b]).then(a.cmp(&b));
        if m_per_label < pool.len() {
            if m_per_label == 0 {
                pool.clear();
            } else {
                pool.select_nth_unstable_by(m_per_label - 1, cmp);
                pool.truncate(m_per_label);
            }
        }
        for i in pool {
            in_union[i] = true;
        }
    }
    let mut f = vec![0.0; d];
    for (i, _) in in_union.iter().enumerate().filter(|(_, &u)| u) {
        let w = (-distances[i]).exp();
        for t in train.labels_of(i) {
            f[t] += w;
        }
    }
    Ok(f)
}

/// Top-`n` labels per image by score, ties broken by ascending label index.
/// `n` is capped at the vocabulary size.
pub fn annotate_topn(scores: &RelevanceScores, n: usize) -> Vec<Vec<usize>> {
    let d = scores.values.ncols();
    let n = n.min(d);
    scores
        .values
        .row_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(n);
            idx
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    fn vocab(d: usize) -> Vocabulary {
        Vocabulary::new((0..d).map(|i| format!("l{i}"))).unwrap()
    }

    fn nbs(idx: &[usize]) -> Vec<Neighbor> {
        idx.iter()
            .map(|&index| Neighbor {
                index,
                distance: 0.0,
            })
            .collect()
    }

    #[test]
    fn stored_row_is_its_own_nearest() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let idx = NeighborIndex::semantic(FeatureMatrix::from_values(m).unwrap());
        let nn = idx.knn_query(&[0.0, 2.0], 2).unwrap();
        assert_eq!(nn[0].index, 1);
        assert!(nn[0].distance.abs() < 1e-15);
        assert_eq!(idx.distances(&[0.0, 0.0]).unwrap(), vec![1.0; 3]);
        assert!(idx.knn_query(&[1.0], 1).is_err());
        assert!(idx.knn_query(&[1.0, 0.0], 4).is_err());
        let ex = idx.knn_excluding(&idx.train_query(1), 2, 1).unwrap();
        assert!(ex.iter().all(|n| n.index != 1));
    }

    #[test]
    fn baseline_all_ones_ties_in_index_order() {
        let g = GramMatrix::new(
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.2, 0.5, 0.2, 1.0]),
            "k",
            ids(3),
        )
        .unwrap();
        let idx = NeighborIndex::baseline(g);
        assert_eq!(idx.metric(), Metric::OneMinusKv);
        let nn = idx.knn_query(&[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(
            nn.iter().map(|n| n.index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(nn.iter().all(|n| n.distance == 0.0));
    }

    #[test]
    fn knn_and_tagvote_counts() {
        let train =
            AnnotationSet::from_label_sets(vocab(3), vec![vec![0, 1], vec![1], vec![2]], ids(3))
                .unwrap();
        assert_eq!(f_knn(&nbs(&[0]), &train), vec![1.0, 1.0, 0.0]);
        assert_eq!(f_knn(&nbs(&[0, 1, 2]), &train), vec![1.0, 2.0, 1.0]);
        let tv = f_tagvote(&nbs(&[0, 1]), &train, &[1, 2, 1], 3).unwrap();
        assert_eq!(tv, vec![1.0 - 2.0 / 3.0, 2.0 - 4.0 / 3.0, -2.0 / 3.0]);
        assert!(f_tagvote(&nbs(&[0]), &train, &[0, 0, 0], 0).is_err());
    }

    #[test]
    fn tagvote_hand_value() {
        // k_t = 5 of K = 10, n_t = 100 of |S| = 1000
        let v = vocab(1);
        let sets: Vec<Vec<usize>> = (0..10)
            .map(|i| if i < 5 { vec![0] } else { vec![] })
            .collect();
        let train = AnnotationSet::from_label_sets(v, sets, ids(10)).unwrap();
        let f = f_tagvote(&nbs(&(0..10).collect::<Vec<_>>()), &train, &[100], 1000).unwrap();
        assert!((f[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_phase_edge_cases() {
        let train =
            AnnotationSet::from_label_sets(vocab(3), vec![vec![0], vec![1], vec![1]], ids(3))
                .unwrap();
        let pools = LabelImages::new(&train);
        let f = f_2pknn(&[0.0, 0.5, 1.0], &train, &pools, 1).unwrap();
        assert_eq!(f[0], 1.0);
        assert!((f[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(f[2], 0.0);
    }

    #[test]
    fn topn_ties_by_index() {
        let s = RelevanceScores::from_rows(ids(1), vocab(3), &[vec![0.9, 0.1, 0.9]]).unwrap();
        assert_eq!(annotate_topn(&s, 2), vec![vec![0, 2]]);
        assert_eq!(annotate_topn(&s, 3), vec![vec![0, 2, 1]]);
        assert_eq!(annotate_topn(&s, 5)[0].len(), 3);
    }
}
