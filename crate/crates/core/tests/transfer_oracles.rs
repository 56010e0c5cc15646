#![allow(clippy::needless_range_loop)]

mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use semspace::transfer::*;
use semspace::{AnnotationSet, FeatureMatrix, GramMatrix, Vocabulary};

use common::*;

fn vocab(d: usize) -> Vocabulary {
    Vocabulary::new((0..d).map(|t| format!("w{t}"))).unwrap()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[test]
fn knn_matches_exhaustive_scan() {
    let mut r = rng(20);
    let x = normal_matrix(&mut r, 50, 6);
    let index = NeighborIndex::semantic(FeatureMatrix::new(x.clone(), ids("t", 50)).unwrap());
    for _ in 0..20 {
        let q: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..50)
            .map(|i| cosine_distance(&q, &x.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        let order = argsort_by(50, |i| d[i]);
        let got = index.knn_query(&q, 7).unwrap();
        assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), order[..7]);
    }
    let own = index
        .knn_query(&x.row(13).iter().copied().collect::<Vec<_>>(), 1)
        .unwrap();
    assert_eq!(own[0].index, 13);
    assert!(own[0].distance.abs() < 1e-12);
}

#[test]
fn baseline_ties_follow_index_order() {
    let mut k = DMatrix::from_element(6, 6, 0.2);
    k.fill_diagonal(1.0);
    let index = NeighborIndex::baseline(GramMatrix::new(k, "k", ids("t", 6)).unwrap());
    let got = index.knn_query(&[1.0; 6], 4).unwrap();
    assert_eq!(
        got.iter().map(|n| n.index).collect::<Vec<_>>(),
        [0, 1, 2, 3]
    );
    assert!(got.iter().all(|n| n.distance == 0.0));
}

#[test]
fn hand_checked_relevance_values() {
    let train =
        AnnotationSet::from_label_sets(vocab(3), vec![vec![0], vec![0], vec![]], ids("t", 3))
            .unwrap();
    let nbrs: Vec<Neighbor> = (0..3)
        .map(|i| Neighbor {
            index: i,
            distance: i as f64,
        })
        .collect();
    let model = TagPropModel::new(vec![0.5, 0.3, 0.2]).unwrap();
    assert!((tagprop_score(&model, &nbrs, &train)[0] - 0.8).abs() < 1e-15);

    let uniform = TagPropModel::uniform(3);
    let knn = f_knn(&nbrs, &train);
    for (s, c) in tagprop_score(&uniform, &nbrs, &train).iter().zip(&knn) {
        assert!((s - c / 3.0).abs() < 1e-15);
    }

    // k_t = 5, K = 10, n_t = 100, |S| = 1000
    let sets: Vec<Vec<usize>> = (0..1000)
        .map(|i| if i < 100 { vec![0] } else { vec![] })
        .collect();
    let big = AnnotationSet::from_label_sets(vocab(1), sets, ids("s", 1000)).unwrap();
    let ten: Vec<Neighbor> = (95..105)
        .map(|i| Neighbor {
            index: i,
            distance: 0.0,
        })
        .collect();
    assert_eq!(f_tagvote(&ten, &big, &[100], 1000).unwrap(), vec![4.0]);

    let scores = RelevanceScores::new(
        ids("q", 1),
        vocab(3),
        DMatrix::from_row_slice(1, 3, &[0.9, 0.1, 0.9]),
    )
    .unwrap();
    assert_eq!(annotate_topn(&scores, 2), vec![vec![0, 2]]);
}

#[test]
fn knn_and_tagvote_rank_alike_under_uniform_label_counts() {
    let mut r = rng(22);
    let d = 6;
    // every label carried by exactly 10 of 60 images
    let sets: Vec<Vec<usize>> = (0..60).map(|i| vec![i % d]).collect();
    let train = AnnotationSet::from_label_sets(vocab(d), sets, ids("t", 60)).unwrap();
    let counts = train.label_frequencies();
    for _ in 0..20 {
        let dist: Vec<f64> = (0..60).map(|_| r.random::<f64>()).collect();
        let nbrs = nearest(&dist, 15, None).unwrap();
        let a = f_knn(&nbrs, &train);
        let b = f_tagvote(&nbrs, &train, &counts, 60).unwrap();
        let rank = |v: &[f64]| argsort_by(d, |t| -v[t]);
        assert_eq!(rank(&a), rank(&b));
    }
}

#[test]
fn tagprop_likelihood_never_decreases() {
    let mut r = rng(23);
    for _ in 0..10 {
        let n = 60;
        let x = normal_matrix(&mut r, n, 4);
        let sets = random_sets(&mut r, n, 8, 0.3);
        let train = AnnotationSet::from_label_sets(vocab(8), sets, ids("t", n)).unwrap();
        let index = NeighborIndex::semantic(FeatureMatrix::new(x, ids("t", n)).unwrap());
        let fit = tagprop_train(
            &index,
            &train,
            &TagPropConfig {
                k: 10,
                epochs: 30,
                step: 1.0,
            },
        )
        .unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let s: f64 = fit.model.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12 && fit.model.weights.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn tagprop_concentrates_on_an_informative_first_rank() {
    // pairs of images share a label set; the first neighbor is always the twin
    let n = 40;
    let mut x = DMatrix::zeros(n, 2);
    let mut sets = Vec::new();
    for i in 0..n {
        let a = (i / 2) as f64 * 0.3;
        x[(i, 0)] = a.cos();
        x[(i, 1)] = a.sin() + if i % 2 == 1 { 1e-4 } else { 0.0 };
        sets.push(vec![i / 2 % 10]);
    }
    let train = AnnotationSet::from_label_sets(vocab(10), sets, ids("t", n)).unwrap();
    let index = NeighborIndex::semantic(FeatureMatrix::new(x, ids("t", n)).unwrap());
    let fit = tagprop_train(
        &index,
        &train,
        &TagPropConfig {
            k: 5,
            epochs: 200,
            step: 1.0,
        },
    )
    .unwrap();
    assert!(fit.model.weights[0] >= 0.9, "{:?}", fit.model.weights);
    let uniform_ll = tagprop_log_likelihood(
        &TagPropModel::uniform(5).weights,
        &index_neighbors(&index, 5),
        &train,
    );
    assert!(fit.log_likelihood.last().unwrap() > &uniform_ll);
}

fn index_neighbors(index: &NeighborIndex, k: usize) -> Vec<Vec<Neighbor>> {
    (0..index.len())
        .map(|i| index.knn_excluding(&index.train_query(i), k, i).unwrap())
        .collect()
}

#[test]
fn svm_objective_is_near_the_exact_optimum() {
    let mut r = rng(24);
    for _ in 0..5 {
        let (n, p, d) = (40, 5, 4);
        let mut x = normal_matrix(&mut r, n, p);
        for mut row in x.row_iter_mut() {
            let norm = row.norm();
            row /= norm;
        }
        let w_true = normal_matrix(&mut r, d, p);
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..d)
                    .filter(|&t| (x.row(i) * w_true.row(t).transpose())[(0, 0)] > 0.0)
                    .collect()
            })
            .collect();
        let train = AnnotationSet::from_label_sets(vocab(d), sets.clone(), ids("t", n)).unwrap();
        let cfg = SvmConfig {
            seed: 9,
            ..SvmConfig::default()
        };
        let model = svm_train(&x, &train, &cfg).unwrap();
        let got = svm_objective(&model, &x, &train, cfg.lambda);
        for t in 0..d {
            let y = DVector::from_fn(n, |i, _| if sets[i].contains(&t) { 1.0 } else { -1.0 });
            let best = ridge_optimum(&x, &y, cfg.lambda);
            assert!(
                got[t] >= best - 1e-12,
                "below the optimum: {} < {best}",
                got[t]
            );
            assert!(
                got[t] <= best * 1.01,
                "label {t}: {} vs optimum {best}",
                got[t]
            );
        }
    }
}
