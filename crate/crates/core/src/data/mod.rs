//! Typed containers for features, annotations, kernels and vocabularies,
//! together with their on-disk formats.

pub mod fmat;
mod projector;
mod text;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use fmat::Dtype;
pub use projector::SemanticProjector;
pub use text::{
    load_annotations, load_vocabulary, load_word_vectors, save_annotations, save_vocabulary,
};

/// Ordered, duplicate-free list of labels.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl Vocabulary {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Data(format!("empty label at index {i}")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate label `{l}`")));
            }
        }
        Ok(Vocabulary { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate image id `{id}`")));
        }
    }
    Ok(())
}

/// Dense real matrix with one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    row_ids: Vec<String>,
}

/// Storage format selector for [`FeatureMatrix::load`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Binary,
    Csv,
}

impl MatrixFormat {
    /// Guess from the file extension: `.csv` is CSV, anything else FMAT.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, row_ids: Vec<String>) -> Result<Self> {
        if values.nrows() != row_ids.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} row ids",
                values.nrows(),
                row_ids.len()
            )));
        }
        check_unique_ids(&row_ids)?;
        for i in 0..values.nrows() {
            for j in 0..values.ncols() {
                if !values[(i, j)].is_finite() {
                    return Err(Error::NonFinite {
                        row: i,
                        row_id: row_ids[i].clone(),
                        col: j,
                    });
                }
            }
        }
        Ok(FeatureMatrix { values, row_ids })
    }

    /// Ids default to the decimal row index.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        Self::new(values, ids)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let values = self.values.select_rows(indices);
        let row_ids = indices.iter().map(|&i| self.row_ids[i].clone()).collect();
        FeatureMatrix { values, row_ids }
    }

    /// Copy with every row scaled to unit Euclidean norm. Zero rows stay zero.
    pub fn l2_normalized(&self) -> FeatureMatrix {
        let mut values = self.values.clone();
        for mut row in values.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        FeatureMatrix {
            values,
            row_ids: self.row_ids.clone(),
        }
    }

    pub fn load(path: &Path, format: MatrixFormat) -> Result<Self> {
        match format {
            MatrixFormat::Binary => {
                let stored = fmat::read_file(path)?;
                Self::new(stored.values, stored.row_ids)
            }
            MatrixFormat::Csv => text::load_feature_csv(path),
        }
    }

    /// Writes FMAT, using 32-bit storage whenever that is lossless.
    pub fn save(&self, path: &Path) -> Result<()> {
        fmat::write_file(
            path,
            &self.values,
            &self.row_ids,
            Dtype::lossless_for(&self.values),
        )
    }
}

/// Sparse image-by-label incidence, binary or real-valued.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    vocabulary: Vocabulary,
    rows: Vec<Vec<(usize, f64)>>,
    binary: bool,
    row_ids: Vec<String>,
}

impl AnnotationSet {
    /// Builds a set from per-image `(label_index, weight)` entries.
    ///
    /// Entries are sorted by label; zero weights are dropped.
    pub fn new(
        vocabulary: Vocabulary,
        rows: Vec<Vec<(usize, f64)>>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        if rows.len() != row_ids.len() {
            return Err(Error::Dimension(format!(
                "{} annotation rows but {} ids",
                rows.len(),
                row_ids.len()
            )));
        }
        check_unique_ids(&row_ids)?;
        let d = vocabulary.len();
        let mut binary = true;
        let mut clean = Vec::with_capacity(rows.len());
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(k, _)| k);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Data(format!(
                        "duplicate label index {} in row {}",
                        w[0].0, row_ids[i]
                    )));
                }
            }
            for &(k, w) in &row {
                if k >= d {
                    return Err(Error::Data(format!(
                        "label index {k} out of range for vocabulary of size {d}"
                    )));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Data(format!(
                        "invalid weight {w} for label {k} in row {}",
                        row_ids[i]
                    )));
                }
                if w != 1.0 && w != 0.0 {
                    binary = false;
                }
            }
            row.retain(|&(_, w)| w != 0.0);
            clean.push(row);
        }
        Ok(AnnotationSet {
            vocabulary,
            rows: clean,
            binary,
            row_ids,
        })
    }

    /// Binary set from label-index lists.
    pub fn from_label_sets(
        vocabulary: Vocabulary,
        sets: Vec<Vec<usize>>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        let rows = sets
            .into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s.dedup();
                s.into_iter().map(|k| (k, 1.0)).collect()
            })
            .collect();
        Self::new(vocabulary, rows, row_ids)
    }

    /// Real-valued set from a dense images-by-labels matrix.
    pub fn from_dense(
        vocabulary: Vocabulary,
        dense: &DMatrix<f64>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        if dense.ncols() != vocabulary.len() {
            return Err(Error::Dimension(format!(
                "dense annotations have {} columns, vocabulary has {} labels",
                dense.ncols(),
                vocabulary.len()
            )));
        }
        let rows = dense
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(k, &w)| (k, w))
                    .collect()
            })
            .collect();
        Self::new(vocabulary, rows, row_ids)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    /// Nonzero `(label, weight)` entries of image `i`, sorted by label.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Labels carried by image `i` (weight > 0), ascending.
    pub fn labels_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().map(|&(k, _)| k)
    }

    pub fn has_label(&self, i: usize, label: usize) -> bool {
        self.rows[i]
            .binary_search_by_key(&label, |&(k, _)| k)
            .is_ok()
    }

    pub fn label_count(&self, i: usize) -> usize {
        self.rows[i].len()
    }

    /// Per-label number of images carrying the label.
    pub fn label_frequencies(&self) -> Vec<usize> {
        let mut n = vec![0; self.vocabulary.len()];
        for row in &self.rows {
            for &(k, _) in row {
                n[k] += 1;
            }
        }
        n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.vocabulary.len());
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, w) in row {
                m[(i, k)] = w;
            }
        }
        m
    }

    pub fn select_rows(&self, indices: &[usize]) -> AnnotationSet {
        AnnotationSet {
            vocabulary: self.vocabulary.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            binary: indices
                .iter()
                .all(|&i| self.rows[i].iter().all(|&(_, w)| w == 1.0)),
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }

    /// Full-scan recomputation of the binary flag.
    pub fn scan_binary(&self) -> bool {
        self.rows
            .iter()
            .flatten()
            .all(|&(_, w)| w == 0.0 || w == 1.0)
    }

    pub(crate) fn check_same_vocabulary(&self, other: &AnnotationSet) -> Result<()> {
        if self.vocabulary != other.vocabulary {
            return Err(Error::VocabularyMismatch(format!(
                "annotation vocabularies differ ({} vs {} labels)",
                self.vocabulary.len(),
                other.vocabulary.len()
            )));
        }
        Ok(())
    }
}

/// Symmetric kernel matrix over a single image set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    kernel_id: String,
    row_ids: Vec<String>,
}

impl GramMatrix {
    /// Symmetrizes `values` as `(K + K^T) / 2`.
    pub fn new(
        values: DMatrix<f64>,
        kernel_id: impl Into<String>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Dimension(format!(
                "gram matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.nrows() != row_ids.len() {
            return Err(Error::Dimension(format!(
                "gram of size {} with {} row ids",
                values.nrows(),
                row_ids.len()
            )));
        }
        check_unique_ids(&row_ids)?;
        let mut values = values;
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (values[(i, j)] + values[(j, i)]);
                values[(i, j)] = s;
                values[(j, i)] = s;
            }
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite kernel value {bad}")));
        }
        Ok(GramMatrix {
            values,
            kernel_id: kernel_id.into(),
            row_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn kernel_id(&self) -> &str {
        &self.kernel_id
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Principal submatrix over `indices`.
    pub fn select(&self, indices: &[usize]) -> GramMatrix {
        GramMatrix {
            values: self.values.select_rows(indices).select_columns(indices),
            kernel_id: self.kernel_id.clone(),
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }

    /// Rows `rows` against columns `cols` as a rectangular block.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> KernelBlock {
        KernelBlock {
            values: self.values.select_rows(rows).select_columns(cols),
            kernel_id: self.kernel_id.clone(),
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            col_ids: cols.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }

    pub fn as_block(&self) -> KernelBlock {
        KernelBlock {
            values: self.values.clone(),
            kernel_id: self.kernel_id.clone(),
            row_ids: self.row_ids.clone(),
            col_ids: self.row_ids.clone(),
        }
    }

    /// Smallest eigenvalue, via a dense symmetric eigendecomposition.
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes values (f64) and a `.meta` sidecar carrying the kernel id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fmat::write_file(path, &self.values, &self.row_ids, Dtype::F64)?;
        crate::provenance::Sidecar::new("gram")
            .with("kernel_id", &self.kernel_id)
            .with("rows", self.n())
            .write_for(path)
    }

    /// Reads an FMAT gram; the kernel id comes from the sidecar when present.
    pub fn load(path: &Path) -> Result<Self> {
        let stored = fmat::read_file(path)?;
        let kernel_id = crate::provenance::Sidecar::read_for(path)
            .ok()
            .and_then(|s| s.get("kernel_id").map(str::to_owned))
            .unwrap_or_else(|| "unknown".to_owned());
        GramMatrix::new(stored.values, kernel_id, stored.row_ids)
    }
}

/// Rectangular kernel block: query images (rows) against reference images
/// (columns). `col_ids` is empty when the reference ids are unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    pub values: DMatrix<f64>,
    pub kernel_id: String,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

impl KernelBlock {
    pub fn save(&self, path: &Path) -> Result<()> {
        fmat::write_file(path, &self.values, &self.row_ids, Dtype::F64)?;
        crate::provenance::Sidecar::new("kernel_block")
            .with("kernel_id", &self.kernel_id)
            .with("rows", self.values.nrows())
            .with("cols", self.values.ncols())
            .with("col_ids", self.col_ids.join(","))
            .write_for(path)
    }

    /// Column ids and kernel id are restored from the sidecar when it exists.
    pub fn load(path: &Path) -> Result<Self> {
        let stored = fmat::read_file(path)?;
        let side = crate::provenance::Sidecar::read_for(path).ok();
        let kernel_id = side
            .as_ref()
            .and_then(|s| s.get("kernel_id").map(str::to_owned))
            .unwrap_or_else(|| "unknown".to_owned());
        let col_ids = side
            .as_ref()
            .and_then(|s| s.get("col_ids"))
            .map(|c| c.split(',').map(str::to_owned).collect::<Vec<_>>())
            .filter(|c| c.len() == stored.values.ncols())
            .unwrap_or_default();
        Ok(KernelBlock {
            values: stored.values,
            kernel_id,
            row_ids: stored.row_ids,
            col_ids,
        })
    }
}

/// Label embeddings of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(entries: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = entries.values().next().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Data(
                "word vectors must have positive dimension".into(),
            ));
        }
        for (label, v) in &entries {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "word vector for `{label}` has length {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("non-finite word vector for `{label}`")));
            }
        }
        Ok(WordVectorTable { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.entries.get(label).map(Vec::as_slice)
    }
}

/// Label-by-label similarity, stored symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    vocabulary: Vocabulary,
    values: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn new(vocabulary: Vocabulary, values: DMatrix<f64>) -> Result<Self> {
        let d = vocabulary.len();
        if values.nrows() != d || values.ncols() != d {
            return Err(Error::Dimension(format!(
                "similarity matrix is {}x{}, vocabulary has {d} labels",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite similarity value".into()));
        }
        let values = (&values + values.transpose()) * 0.5;
        Ok(SimilarityMatrix { vocabulary, values })
    }

    pub fn identity(vocabulary: Vocabulary) -> Self {
        let d = vocabulary.len();
        SimilarityMatrix {
            vocabulary,
            values: DMatrix::identity(d, d),
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Copy with negative eigenvalues clipped to zero.
    pub fn clip_to_psd(&self) -> SimilarityMatrix {
        let eig = self.values.clone().symmetric_eigen();
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let values =
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let values = (&values + values.transpose()) * 0.5;
        SimilarityMatrix {
            vocabulary: self.vocabulary.clone(),
            values,
        }
    }

    /// Loads FMAT or headerless CSV (`D` rows of `D` floats).
    pub fn load(path: &Path, vocabulary: Vocabulary) -> Result<Self> {
        let values = match MatrixFormat::from_path(path) {
            MatrixFormat::Binary => fmat::read_file(path)?.values,
            MatrixFormat::Csv => text::load_plain_csv(path)?,
        };
        Self::new(vocabulary, values)
    }
}
