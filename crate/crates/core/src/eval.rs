//! Label-centric evaluation metrics and the neighborhood Jaccard diagnostic.
//!
//! Averages run over labels, not images. Labels with no positive test image
//! have no defined AP or recall and are left out of MAP and Rec@n.

use std::fmt;

use crate::data::AnnotationSet;
use crate::error::{Error, Result};
use crate::transfer::{NeighborIndex, RelevanceScores};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMetrics {
    /// `None` when the label has no positive test image.
    pub average_precision: Option<f64>,
    pub precision: f64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub map: f64,
    pub n: usize,
    pub prec_at_n: f64,
    pub rec_at_n: f64,
    pub n_plus: usize,
    pub n_labels: usize,
    /// Labels that entered the MAP and recall averages.
    pub labels_with_positives: usize,
    pub per_label: Vec<LabelMetrics>,
}

impl MetricReport {
    /// Fixed-order `key\tvalue` lines.
    pub fn to_tsv(&self) -> String {
        format!(
            "map\t{:.6}\nprec_at_n\t{:.6}\nrec_at_n\t{:.6}\nn_plus\t{}\nn\t{}\nlabels\t{}\nlabels_with_positives\t{}\n",
            self.map, self.prec_at_n, self.rec_at_n, self.n_plus, self.n, self.n_labels, self.labels_with_positives
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MAP {:.4}  P@{} {:.4}  R@{} {:.4}  N+ {}",
            self.map, self.n, self.prec_at_n, self.n, self.rec_at_n, self.n_plus
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecRec {
    pub precision: f64,
    pub recall: f64,
    pub per_label_precision: Vec<f64>,
    pub per_label_recall: Vec<Option<f64>>,
}

struct Counts {
    tp: Vec<usize>,
    predicted: Vec<usize>,
    positives: Vec<usize>,
}

fn counts(predicted: &[Vec<usize>], truth: &AnnotationSet) -> Result<Counts> {
    let d = truth.vocabulary().len();
    if predicted.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} prediction lists for {} test images",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = Counts {
        tp: vec![0; d],
        predicted: vec![0; d],
        positives: truth.label_frequencies(),
    };
    for (i, labels) in predicted.iter().enumerate() {
        for &t in labels {
            if t >= d {
                return Err(Error::Dimension(format!(
                    "predicted label {t} outside vocabulary of {d}"
                )));
            }
            c.predicted[t] += 1;
            if truth.has_label(i, t) {
                c.tp[t] += 1;
            }
        }
    }
    Ok(c)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Label-averaged precision and recall of top-`n` annotations.
pub fn prec_rec_at_n(predicted: &[Vec<usize>], truth: &AnnotationSet, n: usize) -> Result<PrecRec> {
    let d = truth.vocabulary().len();
    if n > d {
        return Err(Error::Config(format!(
            "n = {n} exceeds the vocabulary size {d}"
        )));
    }
    let c = counts(predicted, truth)?;
    let per_label_precision: Vec<f64> = (0..d)
        .map(|t| {
            if c.predicted[t] == 0 {
                0.0
            } else {
                c.tp[t] as f64 / c.predicted[t] as f64
            }
        })
        .collect();
    let per_label_recall: Vec<Option<f64>> = (0..d)
        .map(|t| (c.positives[t] > 0).then(|| c.tp[t] as f64 / c.positives[t] as f64))
        .collect();
    Ok(PrecRec {
        precision: mean(per_label_precision.iter().copied()).unwrap_or(0.0),
        recall: mean(per_label_recall.iter().flatten().copied()).unwrap_or(0.0),
        per_label_precision,
        per_label_recall,
    })
}

/// Number of labels with at least one correct prediction.
pub fn n_plus(predicted: &[Vec<usize>], truth: &AnnotationSet) -> Result<usize> {
    Ok(counts(predicted, truth)?
        .tp
        .iter()
        .filter(|&&tp| tp > 0)
        .count())
}

/// Average precision of one label's ranking over all images.
///
/// Images are sorted by descending score, ties by ascending index. Returns
/// `None` when no image is relevant.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Per-label AP (`None` for labels without positives).
pub fn ap_per_label(scores: &RelevanceScores, truth: &AnnotationSet) -> Result<Vec<Option<f64>>> {
    if scores.n_images() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} scored images, {} annotated",
            scores.n_images(),
            truth.len()
        )));
    }
    if truth.vocabulary() != &scores.vocabulary {
        return Err(Error::VocabularyMismatch(
            "scores and truth use different vocabularies".into(),
        ));
    }
    let d = truth.vocabulary().len();
    let mut relevant = vec![false; truth.len()];
    Ok((0..d)
        .map(|t| {
            for (i, r) in relevant.iter_mut().enumerate() {
                *r = truth.has_label(i, t);
            }
            let col: Vec<f64> = scores.values.column(t).iter().copied().collect();
            average_precision(&col, &relevant)
        })
        .collect())
}

/// Mean AP over the labels with at least one positive test image.
pub fn map_labels(scores: &RelevanceScores, truth: &AnnotationSet) -> Result<f64> {
    mean(ap_per_label(scores, truth)?.into_iter().flatten())
        .ok_or_else(|| Error::Data("no label has a positive test image".into()))
}

/// All metrics for one scored test set, with top-`n` annotation.
pub fn evaluate(scores: &RelevanceScores, truth: &AnnotationSet, n: usize) -> Result<MetricReport> {
    let ap = ap_per_label(scores, truth)?;
    let map = mean(ap.iter().flatten().copied())
        .ok_or_else(|| Error::Data("no label has a positive test image".into()))?;
    let predicted = crate::transfer::annotate_topn(scores, n);
    let pr = prec_rec_at_n(&predicted, truth, n)?;
    let np = n_plus(&predicted, truth)?;
    let per_label = (0..ap.len())
        .map(|t| LabelMetrics {
            average_precision: ap[t],
            precision: pr.per_label_precision[t],
            recall: pr.per_label_recall[t],
        })
        .collect();
    Ok(MetricReport {
        map,
        n,
        prec_at_n: pr.precision,
        rec_at_n: pr.recall,
        n_plus: np,
        n_labels: ap.len(),
        labels_with_positives: ap.iter().flatten().count(),
        per_label,
    })
}

/// `|A ∩ B| / |A ∪ B|` on sorted label lists; two empty sets give 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Mean over queries of the mean Jaccard between each query's labels and
/// the labels of its `k` nearest training images.
///
/// `queries[q]` is in the index's query format; `query_truth` row `q` holds
/// its labels. With `exclude_self`, query `q` is training image `q` and is
/// skipped as its own neighbor.
pub fn jaccard_neighborhood(
    index: &NeighborIndex,
    queries: &[Vec<f64>],
    query_truth: &AnnotationSet,
    train_truth: &AnnotationSet,
    k: usize,
    exclude_self: bool,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("Jaccard neighborhood needs K >= 1".into()));
    }
    if queries.len() != query_truth.len() || queries.is_empty() {
        return Err(Error::Dimension(format!(
            "{} queries with {} label rows",
            queries.len(),
            query_truth.len()
        )));
    }
    query_truth.check_same_vocabulary(train_truth)?;
    let train_sets: Vec<Vec<usize>> = (0..train_truth.len())
        .map(|i| train_truth.labels_of(i).collect())
        .collect();
    let mut total = 0.0;
    for (q, query) in queries.iter().enumerate() {
        let nbs = if exclude_self {
            index.knn_excluding(query, k, q)?
        } else {
            index.knn_query(query, k)?
        };
        let mine: Vec<usize> = query_truth.labels_of(q).collect();
        let s: f64 = nbs
            .iter()
            .map(|nb| jaccard(&mine, &train_sets[nb.index]))
            .sum();
        total += s / nbs.len() as f64;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMatrix, Vocabulary};
    use nalgebra::DMatrix;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    fn truth(sets: Vec<Vec<usize>>, d: usize) -> AnnotationSet {
        let v = Vocabulary::new((0..d).map(|t| format!("l{t}"))).unwrap();
        let n = sets.len();
        AnnotationSet::from_label_sets(v, sets, ids(n)).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let tr = truth(vec![vec![0, 1], vec![1, 2], vec![0, 2]], 3);
        let pred: Vec<Vec<usize>> = (0..3).map(|i| tr.labels_of(i).collect()).collect();
        let pr = prec_rec_at_n(&pred, &tr, 2).unwrap();
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
        assert_eq!(n_plus(&pred, &tr).unwrap(), 3);
    }

    #[test]
    fn precision_ratio_and_unpredicted_labels() {
        let tr = truth(vec![vec![0], vec![1], vec![1], vec![1]], 3);
        let pred = vec![vec![0], vec![0], vec![0], vec![0]];
        let pr = prec_rec_at_n(&pred, &tr, 1).unwrap();
        assert_eq!(pr.per_label_precision, vec![0.25, 0.0, 0.0]);
        // label 2 has no positives: out of the recall average
        assert_eq!(pr.per_label_recall, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(pr.recall, 0.5);
        assert!(prec_rec_at_n(&pred, &tr, 4).is_err());
    }

    #[test]
    fn all_wrong_gives_zero_n_plus() {
        let tr = truth(vec![vec![0], vec![0]], 2);
        assert_eq!(n_plus(&[vec![1], vec![1]], &tr).unwrap(), 0);
    }

    #[test]
    fn ap_hand_values() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[true, true, false]),
            Some(1.0)
        );
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
        // tie goes to the lower index
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, false]), None);
    }

    #[test]
    fn map_skips_labels_without_positives() {
        let tr = truth(vec![vec![0], vec![]], 2);
        let s = RelevanceScores::new(
            ids(2),
            tr.vocabulary().clone(),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.9, 0.0]),
        )
        .unwrap();
        assert_eq!(map_labels(&s, &tr).unwrap(), 0.5);
        let empty = truth(vec![vec![], vec![]], 2);
        assert!(map_labels(&s, &empty).is_err());
    }

    #[test]
    fn jaccard_conventions() {
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert_eq!(jaccard(&[1], &[]), 0.0);
        assert_eq!(jaccard(&[0, 1, 2], &[1, 2, 3]), 0.5);
    }

    #[test]
    fn neighborhood_extremes() {
        let emb = FeatureMatrix::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9]),
            ids(4),
        )
        .unwrap();
        let index = NeighborIndex::semantic(emb.clone());
        let queries: Vec<Vec<f64>> = (0..4).map(|i| emb.row(i)).collect();
        let same = truth(vec![vec![0]; 4], 2);
        assert_eq!(
            jaccard_neighborhood(&index, &queries, &same, &same, 3, true).unwrap(),
            1.0
        );
        let split = truth(vec![vec![0], vec![0], vec![1], vec![1]], 2);
        let alt = truth(vec![vec![1], vec![1], vec![0], vec![0]], 2);
        // nearest neighbor of each query is its pair partner
        assert_eq!(
            jaccard_neighborhood(&index, &queries, &split, &split, 1, true).unwrap(),
            1.0
        );
        assert_eq!(
            jaccard_neighborhood(&index, &queries, &alt, &split, 1, true).unwrap(),
            0.0
        );
    }
}
