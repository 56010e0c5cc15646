//! End-to-end experiments.
//!
//! The in-memory API here builds a label-transfer space over the training
//! images ([`embed`]), scores the test images with one relevance method
//! ([`score`]) and evaluates them. [`config`] reads the INI run file and
//! [`run`] drives the same stages from files, writing every artifact with a
//! sidecar.

pub mod config;
pub mod run;

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::WordVectorTable;
use crate::data::{
    AnnotationSet, FeatureMatrix, GramMatrix, KernelBlock, SemanticProjector, SimilarityMatrix,
};
use crate::denoise::{pre_propagate_tags, DenoiseConfig};
use crate::error::{Error, Result, StageExt};
use crate::eval::{evaluate, MetricReport};
use crate::kcca::{fit_kcca, project, KccaConfig};
use crate::kernels::{self, ChiScale};
use crate::rng;
use crate::transfer::{
    f_2pknn, f_knn, f_tagvote, svm_score, svm_train, tagprop_score, tagprop_train, LabelImages,
    NeighborIndex, RelevanceScores, SvmConfig, TagPropConfig,
};

pub use config::PipelineConfig;
pub use run::{annotation_tsv, load_inputs, read_split, run_pipeline, Inputs, RunOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Semantic,
    /// Bare visual kernel, `d = 1 − K̃v`.
    Baseline,
}

impl FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Space::Semantic),
            "baseline" => Ok(Space::Baseline),
            _ => Err(Error::Config(format!(
                "unknown space `{s}` (semantic|baseline)"
            ))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Semantic => "semantic",
            Space::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    NnVot,
    TagVote,
    TagProp,
    TwoPknn,
    Svm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::NnVot,
        Method::TagVote,
        Method::TagProp,
        Method::TwoPknn,
        Method::Svm,
    ];
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nnvot" => Ok(Method::NnVot),
            "tagvote" => Ok(Method::TagVote),
            "tagprop" => Ok(Method::TagProp),
            "2pknn" => Ok(Method::TwoPknn),
            "svm" => Ok(Method::Svm),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (nnvot|tagvote|tagprop|2pknn|svm)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::NnVot => "nnvot",
            Method::TagVote => "tagvote",
            Method::TagProp => "tagprop",
            Method::TwoPknn => "2pknn",
            Method::Svm => "svm",
        })
    }
}

/// Rescaling applied to both kernels before the KCCA solve.
///
/// The regularizer `κ` is added to the kernels as is, so its strength
/// depends on their scale. `Trace` divides each gram by its trace; the
/// factor is folded back into the dual basis, so the stored projector still
/// takes raw visual kernel rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelNorm {
    None,
    Trace,
}

impl FromStr for KernelNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KernelNorm::None),
            "trace" => Ok(KernelNorm::Trace),
            _ => Err(Error::Config(format!(
                "unknown kernel normalization `{s}` (none|trace)"
            ))),
        }
    }
}

impl fmt::Display for KernelNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelNorm::None => "none",
            KernelNorm::Trace => "trace",
        })
    }
}

fn normalized(g: &GramMatrix, norm: KernelNorm) -> Result<(GramMatrix, f64)> {
    let c = match norm {
        KernelNorm::None => return Ok((g.clone(), 1.0)),
        KernelNorm::Trace => {
            let t = g.trace();
            if !(t > 0.0) {
                return Err(Error::Numeric(format!(
                    "cannot trace-normalize a gram with trace {t}"
                )));
            }
            1.0 / t
        }
    };
    Ok((
        GramMatrix::new(g.values() * c, g.kernel_id(), g.row_ids().to_vec())?,
        c,
    ))
}

/// Fits KCCA on the rescaled kernels. The visual factor is folded back into
/// the dual basis, so the projector takes raw visual kernel rows.
pub fn fit_normalized(
    kv: &GramMatrix,
    kt: &GramMatrix,
    kcca: &KccaConfig,
    norm: KernelNorm,
) -> Result<SemanticProjector> {
    let (kv_n, cv) = normalized(kv, norm)?;
    let (kt_n, _) = normalized(kt, norm)?;
    let p = fit_kcca(&kv_n, &kt_n, kcca)?;
    if cv == 1.0 {
        return Ok(p);
    }
    SemanticProjector::new(
        p.dual_basis() * cv,
        p.correlations().to_vec(),
        p.train_row_ids().to_vec(),
        p.kernel_id().to_owned(),
    )
}

/// Textual view fed to KCCA.
#[derive(Debug, Clone)]
pub enum TextKernel {
    Linear,
    Ontology(SimilarityMatrix),
    WordVec(WordVectorTable),
    /// exp-χ² over tags, optionally pre-propagated first.
    Tags {
        chi: ChiScale,
        denoise: Option<DenoiseConfig>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    pub method: Method,
    pub k: usize,
    pub m_per_label: usize,
    pub tagprop: TagPropConfig,
    pub svm: SvmConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            method: Method::NnVot,
            k: 20,
            m_per_label: 5,
            tagprop: TagPropConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub space: Space,
    pub text: TextKernel,
    pub kcca: KccaConfig,
    pub kernel_norm: KernelNorm,
    /// Fit KCCA on this many randomly drawn training images only. For a
    /// fixed seed, smaller subsets are prefixes of larger ones.
    pub kcca_subset: Option<usize>,
    pub transfer: TransferConfig,
    /// Labels per image for Prec@n / Rec@n / N+.
    pub n: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            space: Space::Semantic,
            text: TextKernel::Linear,
            kcca: KccaConfig::default(),
            kernel_norm: KernelNorm::None,
            kcca_subset: None,
            transfer: TransferConfig::default(),
            n: 5,
            seed: 0,
        }
    }
}

/// All images with their three annotation roles.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: FeatureMatrix,
    /// Labels or tags feeding the textual view of KCCA.
    pub text: AnnotationSet,
    /// Labels transferred from training neighbors.
    pub transfer: AnnotationSet,
    /// Labels the test images are evaluated against.
    pub truth: AnnotationSet,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.features.n_rows();
        for (name, a) in [
            ("text", &self.text),
            ("transfer", &self.transfer),
            ("truth", &self.truth),
        ] {
            if a.len() != n {
                return Err(Error::Dimension(format!(
                    "{name} annotations have {} rows, features {n}",
                    a.len()
                )));
            }
            if a.row_ids() != self.features.row_ids() {
                return Err(Error::Data(format!(
                    "{name} annotation ids do not match feature ids"
                )));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Data(
                "train and test splits must both be non-empty".into(),
            ));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::Data(format!(
                    "split index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// View with `train`/`test` replaced, sharing everything else.
    pub fn with_split(&self, train: Vec<usize>, test: Vec<usize>) -> Dataset {
        Dataset {
            train,
            test,
            ..self.clone()
        }
    }
}

/// Visual kernel over the training images and between test and training images.
#[derive(Debug, Clone)]
pub struct VisualKernels {
    pub train: GramMatrix,
    pub test: KernelBlock,
}

pub fn visual_kernels(data: &Dataset) -> Result<VisualKernels> {
    let tr = data.features.select_rows(&data.train);
    let te = data.features.select_rows(&data.test);
    Ok(VisualKernels {
        train: kernels::arccos2_gram(&tr)?,
        test: kernels::arccos2_block(&te, &tr)?,
    })
}

/// A space to transfer labels in: the neighbor index over the training
/// images plus the query rows and feature rows for both sides.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub space: Space,
    pub index: NeighborIndex,
    pub train_queries: Vec<Vec<f64>>,
    pub test_queries: Vec<Vec<f64>>,
    /// Inputs to the linear scorers, rows at unit length.
    pub train_features: DMatrix<f64>,
    pub test_features: DMatrix<f64>,
    pub projector: Option<SemanticProjector>,
    /// KCCA training images, as positions within the training split.
    pub fit_rows: Vec<usize>,
    /// Pre-propagated tags of the fit rows, when denoising ran.
    pub denoised: Option<AnnotationSet>,
}

impl Embedded {
    /// Bare visual space from the training gram, the test x train block and
    /// the raw features of both sides.
    pub fn baseline(
        kv: GramMatrix,
        test: &KernelBlock,
        x_train: &DMatrix<f64>,
        x_test: &DMatrix<f64>,
    ) -> Result<Self> {
        if test.values.ncols() != kv.n()
            || x_train.nrows() != kv.n()
            || x_test.nrows() != test.values.nrows()
        {
            return Err(Error::Dimension(
                "baseline inputs disagree on image counts".into(),
            ));
        }
        Ok(Embedded {
            space: Space::Baseline,
            train_queries: rows_of(kv.values()),
            test_queries: rows_of(&test.values),
            train_features: unit_rows(x_train),
            test_features: unit_rows(x_test),
            index: NeighborIndex::baseline(kv),
            projector: None,
            fit_rows: Vec::new(),
            denoised: None,
        })
    }

    /// Semantic space from projected training and test images.
    pub fn semantic(psi_train: FeatureMatrix, psi_test: &FeatureMatrix) -> Result<Self> {
        if psi_train.n_cols() != psi_test.n_cols() {
            return Err(Error::Dimension(format!(
                "training embedding has {} dims, test {}",
                psi_train.n_cols(),
                psi_test.n_cols()
            )));
        }
        Ok(Embedded {
            space: Space::Semantic,
            train_queries: rows_of(psi_train.values()),
            test_queries: rows_of(psi_test.values()),
            train_features: unit_rows(psi_train.values()),
            test_features: unit_rows(psi_test.values()),
            index: NeighborIndex::semantic(psi_train),
            projector: None,
            fit_rows: Vec::new(),
            denoised: None,
        })
    }
}

/// Rows scaled to unit length (zero rows stay zero), so the linear scorers
/// see inputs of a fixed scale in either space.
fn unit_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m.clone();
    for mut r in m.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    m
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Positions within the training split used to fit KCCA.
pub fn fit_rows(n_train: usize, subset: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    match subset {
        None => Ok((0..n_train).collect()),
        Some(s) if s == 0 || s > n_train => Err(Error::Config(format!(
            "KCCA subset of {s} images from a training split of {n_train}"
        ))),
        Some(s) => {
            let mut perm: Vec<usize> = (0..n_train).collect();
            perm.shuffle(&mut rng::stream(seed, rng::SUBSAMPLE));
            let mut rows = perm[..s].to_vec();
            rows.sort_unstable();
            Ok(rows)
        }
    }
}

/// Textual gram over the given images.
pub fn text_gram(
    text: &TextKernel,
    labels: &AnnotationSet,
    kv: &GramMatrix,
) -> Result<(GramMatrix, Option<AnnotationSet>)> {
    Ok(match text {
        TextKernel::Linear => (kernels::linear_label_gram(labels).stage("kernel")?, None),
        TextKernel::Ontology(s) => (
            kernels::ontology_label_gram(labels, s).stage("kernel")?,
            None,
        ),
        TextKernel::WordVec(w) => (
            kernels::wordvec_label_gram(labels, w).stage("kernel")?,
            None,
        ),
        TextKernel::Tags { chi, denoise } => {
            let tags = match denoise {
                Some(cfg) => {
                    let mut cfg = *cfg;
                    if cfg.neighbors >= labels.len() {
                        let r = labels.len().saturating_sub(1).max(1);
                        warn!(
                            "denoise R = {} clamped to {r} for {} images",
                            cfg.neighbors,
                            labels.len()
                        );
                        cfg.neighbors = r;
                    }
                    Some(pre_propagate_tags(labels, kv, &cfg).stage("denoise")?)
                }
                None => None,
            };
            let (g, _) =
                kernels::exp_chi2_gram(tags.as_ref().unwrap_or(labels), *chi).stage("kernel")?;
            (g, tags)
        }
    })
}

/// Builds the transfer space for the configured split.
pub fn embed(data: &Dataset, vk: &VisualKernels, cfg: &ExperimentConfig) -> Result<Embedded> {
    data.validate().stage("split")?;
    let n_train = data.train.len();
    if vk.train.n() != n_train
        || vk.test.values.nrows() != data.test.len()
        || vk.test.values.ncols() != n_train
    {
        return Err(Error::Dimension(
            "visual kernels do not match the split".into(),
        ))
        .stage("kernel");
    }
    match cfg.space {
        Space::Baseline => {
            let x_train = data.features.select_rows(&data.train).into_values();
            let x_test = data.features.select_rows(&data.test).into_values();
            Embedded::baseline(vk.train.clone(), &vk.test, &x_train, &x_test)
        }
        Space::Semantic => {
            let rows = fit_rows(n_train, cfg.kcca_subset, cfg.seed).stage("fit")?;
            let kv_fit = vk.train.select(&rows);
            let fit_images: Vec<usize> = rows.iter().map(|&r| data.train[r]).collect();
            let labels = data.text.select_rows(&fit_images);
            let (kt, denoised) = text_gram(&cfg.text, &labels, &kv_fit)?;
            let projector =
                fit_normalized(&kv_fit, &kt, &cfg.kcca, cfg.kernel_norm).stage("fit")?;
            let all_train: Vec<usize> = (0..n_train).collect();
            let psi_train =
                project(&projector, &vk.train.block(&all_train, &rows)).stage("project")?;
            let test_block = KernelBlock {
                values: vk.test.values.select_columns(&rows),
                kernel_id: vk.test.kernel_id.clone(),
                row_ids: vk.test.row_ids.clone(),
                col_ids: rows
                    .iter()
                    .map(|&r| vk.train.row_ids()[r].clone())
                    .collect(),
            };
            let psi_test = project(&projector, &test_block).stage("project")?;
            Ok(Embedded {
                projector: Some(projector),
                fit_rows: rows,
                denoised,
                ..Embedded::semantic(psi_train, &psi_test)?
            })
        }
    }
}

/// Relevance of every label for every test image.
///
/// `train_labels` holds the transferred labels of the training images in
/// split order; `test_ids` names the output rows.
pub fn score(
    emb: &Embedded,
    train_labels: &AnnotationSet,
    test_ids: Vec<String>,
    cfg: &TransferConfig,
    seed: u64,
) -> Result<RelevanceScores> {
    let vocab = train_labels.vocabulary().clone();
    if train_labels.len() != emb.index.len() {
        return Err(Error::Dimension(format!(
            "{} transfer label rows for {} training images",
            train_labels.len(),
            emb.index.len()
        )));
    }
    let queries = &emb.test_queries;
    let rows: Vec<Vec<f64>> = match cfg.method {
        Method::NnVot => queries
            .par_iter()
            .map(|q| Ok(f_knn(&emb.index.knn_query(q, cfg.k)?, train_labels)))
            .collect::<Result<_>>()?,
        Method::TagVote => {
            let counts = train_labels.label_frequencies();
            queries
                .par_iter()
                .map(|q| {
                    f_tagvote(
                        &emb.index.knn_query(q, cfg.k)?,
                        train_labels,
                        &counts,
                        train_labels.len(),
                    )
                })
                .collect::<Result<_>>()?
        }
        Method::TagProp => {
            let tp = TagPropConfig {
                k: cfg.k,
                ..cfg.tagprop
            };
            let fit = tagprop_train(&emb.index, train_labels, &tp)?;
            queries
                .par_iter()
                .map(|q| {
                    Ok(tagprop_score(
                        &fit.model,
                        &emb.index.knn_query(q, cfg.k)?,
                        train_labels,
                    ))
                })
                .collect::<Result<_>>()?
        }
        Method::TwoPknn => {
            let pools = LabelImages::new(train_labels);
            queries
                .par_iter()
                .map(|q| {
                    f_2pknn(
                        &emb.index.distances(q)?,
                        train_labels,
                        &pools,
                        cfg.m_per_label,
                    )
                })
                .collect::<Result<_>>()?
        }
        Method::Svm => {
            let svm = SvmConfig {
                seed: rng::stream_seed(seed, rng::SVM_SHUFFLE),
                ..cfg.svm
            };
            let model = svm_train(&emb.train_features, train_labels, &svm)?;
            (0..emb.test_features.nrows())
                .into_par_iter()
                .map(|i| {
                    svm_score(
                        &model,
                        emb.test_features
                            .row(i)
                            .iter()
                            .copied()
                            .collect::<Vec<_>>()
                            .as_slice(),
                    )
                })
                .collect::<Result<_>>()?
        }
    };
    RelevanceScores::from_rows(test_ids, vocab, &rows)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub embedded: Embedded,
    pub scores: RelevanceScores,
    pub report: MetricReport,
}

fn test_ids(data: &Dataset) -> Vec<String> {
    data.test
        .iter()
        .map(|&i| data.features.row_ids()[i].clone())
        .collect()
}

/// Scores and evaluates the test split with an already built space.
pub fn score_and_evaluate(
    data: &Dataset,
    emb: &Embedded,
    cfg: &ExperimentConfig,
) -> Result<(RelevanceScores, MetricReport)> {
    let train_labels = data.transfer.select_rows(&data.train);
    let scores =
        score(emb, &train_labels, test_ids(data), &cfg.transfer, cfg.seed).stage("annotate")?;
    let truth = data.truth.select_rows(&data.test);
    let report = evaluate(&scores, &truth, cfg.n).stage("evaluate")?;
    Ok((scores, report))
}

pub fn run_experiment(
    data: &Dataset,
    vk: &VisualKernels,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let embedded = embed(data, vk, cfg)?;
    let (scores, report) = score_and_evaluate(data, &embedded, cfg)?;
    Ok(ExperimentOutput {
        embedded,
        scores,
        report,
    })
}

/// Grid searched by [`cross_validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub k: Vec<usize>,
    pub svm_lambda: Vec<f64>,
}

impl Default for CvGrid {
    fn default() -> Self {
        CvGrid {
            k: vec![5, 10, 20, 50],
            svm_lambda: vec![1e-6, 1e-4, 1e-2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best: TransferConfig,
    /// Every candidate with its mean validation MAP over the folds.
    pub table: Vec<(TransferConfig, f64)>,
}

/// Three-fold selection of `K` (neighbor methods) or `λ` (SVM) on the
/// training split. Each fold rebuilds the space from its own training part
/// and is scored against the truth labels of its held-out part. Candidate
/// order breaks ties.
pub fn cross_validate(data: &Dataset, cfg: &ExperimentConfig, grid: &CvGrid) -> Result<CvResult> {
    const FOLDS: usize = 3;
    data.validate().stage("split")?;
    if data.train.len() < FOLDS {
        return Err(Error::Data(
            "cross-validation needs at least 3 training images".into(),
        ));
    }
    let candidates: Vec<TransferConfig> = match cfg.transfer.method {
        Method::Svm => grid
            .svm_lambda
            .iter()
            .map(|&lambda| TransferConfig {
                svm: SvmConfig {
                    lambda,
                    ..cfg.transfer.svm
                },
                ..cfg.transfer
            })
            .collect(),
        _ => grid
            .k
            .iter()
            .map(|&k| TransferConfig { k, ..cfg.transfer })
            .collect(),
    };
    if candidates.is_empty() {
        return Err(Error::Config("empty cross-validation grid".into()));
    }
    let mut order = data.train.clone();
    order.shuffle(&mut rng::stream(cfg.seed, rng::CV_FOLDS));
    let mut totals = vec![0.0; candidates.len()];
    for f in 0..FOLDS {
        let mut val: Vec<usize> = order.iter().skip(f).step_by(FOLDS).copied().collect();
        let mut fit: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(p, _)| p % FOLDS != f)
            .map(|(_, &i)| i)
            .collect();
        val.sort_unstable();
        fit.sort_unstable();
        let fold = data.with_split(fit, val);
        let vk = visual_kernels(&fold).stage("kernel")?;
        let emb = embed(&fold, &vk, cfg)?;
        for (c, cand) in candidates.iter().enumerate() {
            if cand.k > fold.train.len() {
                totals[c] = f64::NEG_INFINITY;
                continue;
            }
            let run = ExperimentConfig {
                transfer: *cand,
                ..cfg.clone()
            };
            totals[c] += score_and_evaluate(&fold, &emb, &run)?.1.map;
        }
    }
    let table: Vec<(TransferConfig, f64)> = candidates
        .into_iter()
        .zip(totals)
        .map(|(c, t)| (c, t / FOLDS as f64))
        .collect();
    let mut best: Option<&(TransferConfig, f64)> = None;
    for e in table.iter().filter(|e| e.1.is_finite()) {
        if best.is_none_or(|b| e.1 > b.1) {
            best = Some(e);
        }
    }
    let best = best
        .map(|e| e.0)
        .ok_or_else(|| Error::Config("no cross-validation candidate fits the fold size".into()))?;
    Ok(CvResult { best, table })
}
