//! Joint visual/textual semantic space for automatic image annotation.
//!
//! Visual features and label annotations are turned into kernel matrices,
//! related by regularized kernel canonical correlation analysis, and every
//! image is projected into the resulting semantic space using only its
//! visual kernel row. Labels are then transferred from nearest neighbors in
//! that space (or scored by per-label linear models) and evaluated with
//! label-centric retrieval metrics.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`data`] | containers, FMAT / text formats, projector persistence |
//! | [`kernels`] | ArcCosine, label, word-vector and exp-χ² kernels |
//! | [`denoise`] | tag pre-propagation over visual neighbors |
//! | [`kcca`] | incomplete Cholesky, KCCA fit, projection |
//! | [`transfer`] | neighbor index, relevance functions, top-n annotation |
//! | [`eval`] | Prec@n, Rec@n, MAP, N+, neighborhood Jaccard |
//! | [`synth`] | seeded synthetic multimodal datasets |
//! | [`pipeline`] | end-to-end runs, configuration, kernel cache |
//! | [`provenance`] | artifact sidecars and input hashes |
//! | [`rng`] | named random streams derived from one seed |

// Validation is written `!(x > 0.0)` so that NaN fails it too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod kcca;
pub mod kernels;
pub mod pipeline;
pub mod provenance;
pub mod rng;
pub mod synth;
pub mod transfer;

pub use data::{
    AnnotationSet, FeatureMatrix, GramMatrix, KernelBlock, MatrixFormat, SemanticProjector,
    SimilarityMatrix, Vocabulary, WordVectorTable,
};
pub use error::{Error, Result};
