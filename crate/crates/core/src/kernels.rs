//! Visual and textual kernels.
//!
//! Every kernel comes in two shapes: a `*_gram` over one image set, which
//! evaluates the upper triangle and mirrors it so the result is exactly
//! symmetric, and a `*_block` for query-versus-reference rectangles. Entries
//! are computed independently (in parallel), so output does not depend on
//! scheduling.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::{
    AnnotationSet, FeatureMatrix, GramMatrix, KernelBlock, SimilarityMatrix, WordVectorTable,
};
use crate::error::{Error, Result};

/// Bandwidth of the exp-χ² kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChiScale {
    /// Mean χ² distance over all distinct pairs of the input block.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// ArcCosine kernel of order 2 on visual features.
    ArcCos2,
    LinearLabels,
    OntologyLabels,
    WordVecLabels,
    ExpChi2(ChiScale),
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::ArcCos2 => write!(f, "arccos2(n=2)"),
            KernelSpec::LinearLabels => write!(f, "linear_labels"),
            KernelSpec::OntologyLabels => write!(f, "ontology_labels"),
            KernelSpec::WordVecLabels => write!(f, "wordvec_labels"),
            KernelSpec::ExpChi2(ChiScale::Auto) => write!(f, "exp_chi2(C=auto)"),
            KernelSpec::ExpChi2(ChiScale::Fixed(c)) => write!(f, "exp_chi2(C={c:e})"),
        }
    }
}

impl std::str::FromStr for KernelSpec {
    type Err = Error;

    /// Accepts `arccos2`, `linear_labels`, `ontology_labels`,
    /// `wordvec_labels`, `exp_chi2` and `exp_chi2:<C>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (s, None),
        };
        let spec = match kind {
            "arccos2" => KernelSpec::ArcCos2,
            "linear_labels" | "linear" => KernelSpec::LinearLabels,
            "ontology_labels" | "ontology" => KernelSpec::OntologyLabels,
            "wordvec_labels" | "wordvec" => KernelSpec::WordVecLabels,
            "exp_chi2" => match param {
                None | Some("auto") => KernelSpec::ExpChi2(ChiScale::Auto),
                Some(c) => {
                    let c: f64 = c
                        .parse()
                        .map_err(|_| Error::Config(format!("bad exp_chi2 scale `{c}`")))?;
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(Error::Config(format!(
                            "exp_chi2 scale must be positive, got {c}"
                        )));
                    }
                    KernelSpec::ExpChi2(ChiScale::Fixed(c))
                }
            },
            other => return Err(Error::Config(format!("unknown kernel kind `{other}`"))),
        };
        if param.is_some() && !matches!(spec, KernelSpec::ExpChi2(_)) {
            return Err(Error::Config(format!("kernel `{kind}` takes no parameter")));
        }
        Ok(spec)
    }
}

fn fill_block<F>(rows: usize, cols: usize, f: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let flat: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| f(i, j))
        .collect();
    DMatrix::from_row_slice(rows, cols, &flat)
}

fn fill_symmetric<F>(n: usize, f: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| f(i, j)).collect())
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in upper.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn gram(values: DMatrix<f64>, spec: impl ToString, ids: &[String]) -> Result<GramMatrix> {
    GramMatrix::new(values, spec.to_string(), ids.to_vec())
}

fn block(
    values: DMatrix<f64>,
    spec: impl ToString,
    rows: &[String],
    cols: &[String],
) -> KernelBlock {
    KernelBlock {
        values,
        kernel_id: spec.to_string(),
        row_ids: rows.to_vec(),
        col_ids: cols.to_vec(),
    }
}

/// `J_2(θ) = 3 sinθ cosθ + (π − θ)(1 + 2 cos²θ)`.
pub fn arccos2_angular(theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    3.0 * s * c + (PI - theta) * (1.0 + 2.0 * c * c)
}

struct Rows<'a> {
    m: &'a DMatrix<f64>,
    sq_norms: Vec<f64>,
}

impl<'a> Rows<'a> {
    fn new(x: &'a FeatureMatrix) -> Result<Self> {
        let m = x.values();
        let sq_norms: Vec<f64> = m
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        if let Some(i) = sq_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroNorm(x.row_ids()[i].clone()));
        }
        Ok(Rows { m, sq_norms })
    }

    fn arccos2(&self, i: usize, other: &Rows, j: usize) -> f64 {
        let a = self.m.row(i);
        let b = other.m.row(j);
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let (na, nb) = (self.sq_norms[i], other.sq_norms[j]);
        let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
        na * nb * arccos2_angular(cos.acos()) / PI
    }
}

fn check_cols(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<()> {
    if x.n_cols() != y.n_cols() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            x.n_cols(),
            y.n_cols()
        )));
    }
    Ok(())
}

pub fn arccos2_gram(x: &FeatureMatrix) -> Result<GramMatrix> {
    let rx = Rows::new(x)?;
    let values = fill_symmetric(x.n_rows(), |i, j| rx.arccos2(i, &rx, j));
    gram(values, KernelSpec::ArcCos2, x.row_ids())
}

pub fn arccos2_block(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<KernelBlock> {
    check_cols(x, y)?;
    let (rx, ry) = (Rows::new(x)?, Rows::new(y)?);
    let values = fill_block(x.n_rows(), y.n_rows(), |i, j| rx.arccos2(i, &ry, j));
    Ok(block(values, KernelSpec::ArcCos2, x.row_ids(), y.row_ids()))
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Number of shared labels (weighted dot product for real annotations).
pub fn linear_label_gram(a: &AnnotationSet) -> Result<GramMatrix> {
    let values = fill_symmetric(a.len(), |i, j| sparse_dot(a.row(i), a.row(j)));
    gram(values, KernelSpec::LinearLabels, a.row_ids())
}

pub fn linear_label_block(a: &AnnotationSet, b: &AnnotationSet) -> Result<KernelBlock> {
    a.check_same_vocabulary(b)?;
    let values = fill_block(a.len(), b.len(), |i, j| sparse_dot(a.row(i), b.row(j)));
    Ok(block(
        values,
        KernelSpec::LinearLabels,
        a.row_ids(),
        b.row_ids(),
    ))
}

fn check_similarity(a: &AnnotationSet, s: &SimilarityMatrix) -> Result<()> {
    if a.vocabulary() != s.vocabulary() {
        return Err(Error::VocabularyMismatch(
            "similarity matrix vocabulary differs from annotations".into(),
        ));
    }
    Ok(())
}

fn bilinear(a: &[(usize, f64)], s: &DMatrix<f64>, b: &[(usize, f64)]) -> f64 {
    a.iter()
        .map(|&(k, w)| w * b.iter().map(|&(l, v)| s[(k, l)] * v).sum::<f64>())
        .sum()
}

/// `φ_i S φ_jᵀ` with `S` a label similarity matrix.
pub fn ontology_label_gram(a: &AnnotationSet, s: &SimilarityMatrix) -> Result<GramMatrix> {
    check_similarity(a, s)?;
    let sv = s.values();
    let values = fill_symmetric(a.len(), |i, j| bilinear(a.row(i), sv, a.row(j)));
    gram(values, KernelSpec::OntologyLabels, a.row_ids())
}

pub fn ontology_label_block(
    a: &AnnotationSet,
    b: &AnnotationSet,
    s: &SimilarityMatrix,
) -> Result<KernelBlock> {
    a.check_same_vocabulary(b)?;
    check_similarity(a, s)?;
    let sv = s.values();
    let values = fill_block(a.len(), b.len(), |i, j| bilinear(a.row(i), sv, b.row(j)));
    Ok(block(
        values,
        KernelSpec::OntologyLabels,
        a.row_ids(),
        b.row_ids(),
    ))
}

/// Average of the word vectors of each image's labels; unlabeled images map
/// to the zero vector.
pub fn wordvec_pool(a: &AnnotationSet, w: &WordVectorTable) -> Result<FeatureMatrix> {
    let vocab = a.vocabulary();
    let missing: Vec<&str> = vocab
        .labels()
        .iter()
        .filter(|l| w.get(l).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing word vectors for labels: {}",
            missing.join(", ")
        )));
    }
    let p = w.dim();
    let mut values = DMatrix::zeros(a.len(), p);
    for i in 0..a.len() {
        let row = a.row(i);
        if row.is_empty() {
            continue;
        }
        let n = row.len() as f64;
        for &(k, wk) in row {
            let z = w.get(vocab.label(k)).expect("checked above");
            for (c, zc) in z.iter().enumerate() {
                values[(i, c)] += wk * zc;
            }
        }
        for c in 0..p {
            values[(i, c)] /= n;
        }
    }
    FeatureMatrix::new(values, a.row_ids().to_vec())
}

fn dense_dot(m: &DMatrix<f64>, i: usize, n: &DMatrix<f64>, j: usize) -> f64 {
    m.row(i)
        .iter()
        .zip(n.row(j).iter())
        .map(|(x, y)| x * y)
        .sum()
}

pub fn wordvec_label_gram(a: &AnnotationSet, w: &WordVectorTable) -> Result<GramMatrix> {
    let p = wordvec_pool(a, w)?;
    let pv = p.values();
    let values = fill_symmetric(a.len(), |i, j| dense_dot(pv, i, pv, j));
    gram(values, KernelSpec::WordVecLabels, a.row_ids())
}

pub fn wordvec_label_block(
    a: &AnnotationSet,
    b: &AnnotationSet,
    w: &WordVectorTable,
) -> Result<KernelBlock> {
    a.check_same_vocabulary(b)?;
    let (pa, pb) = (wordvec_pool(a, w)?, wordvec_pool(b, w)?);
    let values = fill_block(a.len(), b.len(), |i, j| {
        dense_dot(pa.values(), i, pb.values(), j)
    });
    Ok(block(
        values,
        KernelSpec::WordVecLabels,
        a.row_ids(),
        b.row_ids(),
    ))
}

/// `Σ_k (a_k − b_k)² / (a_k + b_k)`, with vanishing denominators contributing 0.
pub fn chi2_distance(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    // a label present on one side only contributes (w − 0)² / w = w
    while i < a.len() || j < b.len() {
        let ka = a.get(i).map_or(usize::MAX, |e| e.0);
        let kb = b.get(j).map_or(usize::MAX, |e| e.0);
        if ka < kb {
            s += a[i].1;
            i += 1;
        } else if kb < ka {
            s += b[j].1;
            j += 1;
        } else {
            let (x, y) = (a[i].1, b[j].1);
            if x + y > 0.0 {
                s += (x - y) * (x - y) / (x + y);
            }
            i += 1;
            j += 1;
        }
    }
    s
}

fn check_nonnegative(a: &AnnotationSet) -> Result<()> {
    // AnnotationSet construction already rejects negative weights; this
    // guards future constructors.
    if a.rows().iter().flatten().any(|&(_, w)| w < 0.0) {
        return Err(Error::Data(
            "exp-chi2 kernel requires non-negative weights".into(),
        ));
    }
    Ok(())
}

/// Mean χ² distance over distinct pairs `i < j`.
pub fn mean_chi2_distance(a: &AnnotationSet) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::Data(
            "automatic exp-chi2 scale needs at least two images".into(),
        ));
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| chi2_distance(a.row(i), a.row(j)))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / (n * (n - 1) / 2) as f64)
}

fn resolve_scale(c: ChiScale, auto: impl FnOnce() -> Result<f64>) -> Result<f64> {
    let c = match c {
        ChiScale::Fixed(c) => c,
        ChiScale::Auto => {
            let m = auto()?;
            if m > 0.0 {
                m
            } else {
                log::warn!("all chi2 distances are zero; using C = 1");
                1.0
            }
        }
    };
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!(
            "exp-chi2 scale must be positive, got {c}"
        )));
    }
    Ok(c)
}

/// `exp(−χ²(a_i, a_j) / 2C)`. Returns the gram and the scale `C` used.
pub fn exp_chi2_gram(a: &AnnotationSet, c: ChiScale) -> Result<(GramMatrix, f64)> {
    check_nonnegative(a)?;
    let c = resolve_scale(c, || mean_chi2_distance(a))?;
    let values = fill_symmetric(a.len(), |i, j| {
        (-chi2_distance(a.row(i), a.row(j)) / (2.0 * c)).exp()
    });
    Ok((
        gram(values, KernelSpec::ExpChi2(ChiScale::Fixed(c)), a.row_ids())?,
        c,
    ))
}

/// Rectangular exp-χ² block. `Auto` averages over all cross pairs.
pub fn exp_chi2_block(
    a: &AnnotationSet,
    b: &AnnotationSet,
    c: ChiScale,
) -> Result<(KernelBlock, f64)> {
    a.check_same_vocabulary(b)?;
    check_nonnegative(a)?;
    check_nonnegative(b)?;
    let c = resolve_scale(c, || {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Data("empty annotation block".into()));
        }
        let total: f64 = (0..a.len())
            .map(|i| {
                (0..b.len())
                    .map(|j| chi2_distance(a.row(i), b.row(j)))
                    .sum::<f64>()
            })
            .sum();
        Ok(total / (a.len() * b.len()) as f64)
    })?;
    let values = fill_block(a.len(), b.len(), |i, j| {
        (-chi2_distance(a.row(i), b.row(j)) / (2.0 * c)).exp()
    });
    Ok((
        block(
            values,
            KernelSpec::ExpChi2(ChiScale::Fixed(c)),
            a.row_ids(),
            b.row_ids(),
        ),
        c,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;

    fn features(rows: &[&[f64]]) -> FeatureMatrix {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::from_values(DMatrix::from_row_slice(rows.len(), cols, &flat)).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    #[test]
    fn arccos2_parallel_and_orthogonal_units() {
        let x = features(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = arccos2_gram(&x).unwrap();
        assert!((g.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.5).abs() < 1e-12);
        assert!((arccos2_angular(0.0) - 3.0 * PI).abs() < 1e-12);
        assert!((arccos2_angular(PI / 2.0) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn arccos2_rejects_zero_rows_and_mismatch() {
        let x = features(&[&[1.0, 0.0], &[0.0, 0.0]]);
        match arccos2_gram(&x) {
            Err(Error::ZeroNorm(id)) => assert_eq!(id, "1"),
            other => panic!("{other:?}"),
        }
        let y = features(&[&[1.0, 0.0, 2.0]]);
        let z = features(&[&[1.0, 0.0]]);
        assert!(matches!(arccos2_block(&y, &z), Err(Error::Dimension(_))));
    }

    #[test]
    fn arccos2_nearly_parallel_is_clamped() {
        let v = [0.1, 0.2, 0.3];
        let x = features(&[&v, &v.map(|a| a * 3.0)]);
        let g = arccos2_gram(&x).unwrap();
        assert!(g.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_labels() {
        let v = Vocabulary::new(["a", "b", "c"]).unwrap();
        let a = AnnotationSet::from_label_sets(
            v.clone(),
            vec![vec![0, 1], vec![2], vec![0, 1]],
            ids(3),
        )
        .unwrap();
        let g = linear_label_gram(&a).unwrap();
        assert_eq!(g.get(0, 2), 2.0);
        assert_eq!(g.get(0, 1), 0.0);
        for i in 0..3 {
            assert_eq!(g.get(i, i), a.label_count(i) as f64);
        }
        let other =
            AnnotationSet::from_label_sets(Vocabulary::new(["x"]).unwrap(), vec![vec![0]], ids(1))
                .unwrap();
        assert!(matches!(
            linear_label_block(&a, &other),
            Err(Error::VocabularyMismatch(_))
        ));
    }

    #[test]
    fn ontology_identity_reduces_to_linear() {
        let v = Vocabulary::new(["a", "b", "c"]).unwrap();
        let a =
            AnnotationSet::from_label_sets(v.clone(), vec![vec![0, 1], vec![1, 2], vec![]], ids(3))
                .unwrap();
        let s = SimilarityMatrix::identity(v.clone());
        assert_eq!(
            ontology_label_gram(&a, &s).unwrap().values(),
            linear_label_gram(&a).unwrap().values()
        );
        let mut sv = DMatrix::zeros(3, 3);
        sv[(2, 2)] = 0.7;
        let s = SimilarityMatrix::new(v.clone(), sv).unwrap();
        let b = AnnotationSet::from_label_sets(v, vec![vec![2], vec![2]], ids(2)).unwrap();
        assert_eq!(ontology_label_gram(&b, &s).unwrap().get(0, 1), 0.7);
    }

    #[test]
    fn wordvec_pooling() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        let w = WordVectorTable::new(
            [
                ("a".to_string(), vec![1.0, 0.0]),
                ("b".to_string(), vec![0.0, 3.0]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        let a =
            AnnotationSet::from_label_sets(v.clone(), vec![vec![0], vec![0, 1], vec![]], ids(3))
                .unwrap();
        let p = wordvec_pool(&a, &w).unwrap();
        assert_eq!(p.row(0), vec![1.0, 0.0]);
        assert_eq!(p.row(1), vec![0.5, 1.5]);
        assert_eq!(p.row(2), vec![0.0, 0.0]);
        let g = wordvec_label_gram(&a, &w).unwrap();
        assert_eq!(g.get(1, 1), 0.25 + 2.25);

        let partial =
            WordVectorTable::new([("a".to_string(), vec![1.0])].into_iter().collect()).unwrap();
        let err = wordvec_pool(&a, &partial).unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");
    }

    #[test]
    fn exp_chi2_hand_values() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        let a = AnnotationSet::from_label_sets(v.clone(), vec![vec![0], vec![1], vec![0]], ids(3))
            .unwrap();
        let (g, c) = exp_chi2_gram(&a, ChiScale::Fixed(1.0)).unwrap();
        assert_eq!(c, 1.0);
        assert!((g.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(g.get(0, 2), 1.0);
        assert_eq!(g.get(1, 1), 1.0);
        // pairs: (0,1)=2, (0,2)=0, (1,2)=2
        let (_, c) = exp_chi2_gram(&a, ChiScale::Auto).unwrap();
        assert!((c - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn chi2_zero_denominator_contributes_nothing() {
        assert_eq!(chi2_distance(&[(0, 0.5)], &[(0, 0.5)]), 0.0);
        assert_eq!(chi2_distance(&[], &[]), 0.0);
        assert!(
            (chi2_distance(&[(0, 0.5), (2, 0.2)], &[(1, 0.3), (2, 0.6)])
                - (0.5 + 0.3 + 0.16 / 0.8))
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "arccos2".parse::<KernelSpec>().unwrap(),
            KernelSpec::ArcCos2
        );
        assert_eq!(
            "exp_chi2:2.5".parse::<KernelSpec>().unwrap(),
            KernelSpec::ExpChi2(ChiScale::Fixed(2.5))
        );
        assert!("exp_chi2:-1".parse::<KernelSpec>().is_err());
        assert!("rbf".parse::<KernelSpec>().is_err());
        assert!("linear:3".parse::<KernelSpec>().is_err());
    }
}
