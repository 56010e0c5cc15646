//! File-driven pipeline run.
//!
//! Stages: `features`, `annotations`, `split`, `kernel`, (`denoise`), `fit`,
//! `project`, `annotate`, `evaluate`, `write`. Any failure aborts with the
//! stage name. Artifacts written to the output directory:
//!
//! | file | contents |
//! |---|---|
//! | `kv_train.gram` | visual gram over the training images |
//! | `kv_test.block` | visual kernel, test x train |
//! | `denoised.fmat` | pre-propagated tags of the KCCA images (dense) |
//! | `projector.sspj` | KCCA dual basis and correlations |
//! | `psi_train.fmat`, `psi_test.fmat` | semantic embeddings |
//! | `scores.fmat` | test x label relevance, columns in vocabulary order |
//! | `annotations.tsv` | `id<TAB>label:score,...`, top `n` per image |
//! | `report.tsv` | metrics |
//!
//! Each carries a `.meta` sidecar with the input hashes and a hash of the
//! configuration. With a cache directory, the visual kernels are stored
//! under a key hashing the feature file, kernel id and split ids, and reused
//! when the key matches.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::{
    embed, score_and_evaluate, Dataset, ExperimentConfig, PipelineConfig, TextKernel, VisualKernels,
};
use crate::data::{
    load_annotations, load_vocabulary, load_word_vectors, AnnotationSet, FeatureMatrix, GramMatrix,
    KernelBlock, MatrixFormat, SimilarityMatrix, Vocabulary,
};
use crate::error::{Error, Result, StageExt};
use crate::eval::MetricReport;
use crate::kernels::KernelSpec;
use crate::provenance::{hash_file, hash_parts, Sidecar};
use crate::transfer::{annotate_topn, RelevanceScores};

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricReport,
    pub scores: RelevanceScores,
    pub output: PathBuf,
    pub kernel_cache_hit: bool,
}

/// Reads `id<TAB>train|test` lines into sorted row positions within `ids`.
pub fn read_split(path: &Path, ids: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pos: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let (id, role) = line
            .split_once('\t')
            .ok_or_else(|| parse("expected `id<TAB>train|test`".into()))?;
        let &i = pos
            .get(id)
            .ok_or_else(|| parse(format!("unknown image id `{id}`")))?;
        match role.trim() {
            "train" => train.push(i),
            "test" => test.push(i),
            other => return Err(parse(format!("role `{other}` is neither train nor test"))),
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Reorders annotations to the feature row order.
fn align(set: AnnotationSet, ids: &[String]) -> Result<AnnotationSet> {
    let pos: HashMap<&str, usize> = set
        .row_ids()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let order = ids
        .iter()
        .map(|id| {
            pos.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("image `{id}` has no annotation line")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(set.select_rows(&order))
}

fn load_labels(path: &Path, vocab: &Vocabulary, ids: &[String]) -> Result<AnnotationSet> {
    let (set, dropped) = load_annotations(path, vocab)?;
    if dropped > 0 {
        info!("{}: {dropped} unknown labels dropped", path.display());
    }
    align(set, ids)
}

fn cached_visual_kernels(
    data: &Dataset,
    features_hash: &str,
    cache: Option<&Path>,
) -> Result<(VisualKernels, bool)> {
    let Some(dir) = cache else {
        return Ok((super::visual_kernels(data)?, false));
    };
    let ids = data.features.row_ids();
    let train_ids: Vec<&str> = data.train.iter().map(|&i| ids[i].as_str()).collect();
    let test_ids: Vec<&str> = data.test.iter().map(|&i| ids[i].as_str()).collect();
    let spec = KernelSpec::ArcCos2.to_string();
    let key = hash_parts([
        features_hash,
        spec.as_str(),
        hash_parts(train_ids.iter().copied()).as_str(),
        hash_parts(test_ids.iter().copied()).as_str(),
    ]);
    let gram_path = dir.join(format!("{key}.gram"));
    let block_path = dir.join(format!("{key}.block"));
    if gram_path.exists() && block_path.exists() {
        let train = GramMatrix::load(&gram_path)?;
        let test = KernelBlock::load(&block_path)?;
        if train.kernel_id() == spec && test.kernel_id == spec {
            info!("visual kernels from cache {key}");
            return Ok((VisualKernels { train, test }, true));
        }
    }
    let vk = super::visual_kernels(data)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vk.train.save(&gram_path)?;
    vk.test.save(&block_path)?;
    Ok((vk, false))
}

/// Adds provenance keys to the sidecar already next to `path` (if any).
fn stamp(path: &Path, artifact: &str, stage: &str, common: &[(String, String)]) -> Result<()> {
    let mut side = Sidecar::read_for(path).unwrap_or_else(|_| Sidecar::new(artifact));
    side.set("artifact", artifact);
    side.set("stage", stage);
    for (k, v) in common {
        side.set(k, v);
    }
    side.write_for(path)
}

/// `id<TAB>label:score,...` with the top `n` labels of every image.
pub fn annotation_tsv(scores: &RelevanceScores, n: usize) -> String {
    let top = annotate_topn(scores, n);
    let mut out = String::new();
    for (i, labels) in top.iter().enumerate() {
        let cells: Vec<String> = labels
            .iter()
            .map(|&t| format!("{}:{}", scores.vocabulary.label(t), scores.values[(i, t)]))
            .collect();
        out.push_str(&format!("{}\t{}\n", scores.row_ids[i], cells.join(",")));
    }
    out
}

/// Everything read from disk before the kernels are built.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub data: Dataset,
    pub text_kernel: TextKernel,
    /// Content hash of every input file, keyed by its config name.
    pub hashes: Vec<(&'static str, String)>,
}

impl PipelineConfig {
    pub fn experiment(&self, text: TextKernel) -> ExperimentConfig {
        ExperimentConfig {
            space: self.space,
            text,
            kcca: self.kcca,
            kernel_norm: self.kernel_norm,
            kcca_subset: self.kcca_subset,
            transfer: self.transfer,
            n: self.n,
            seed: self.seed,
        }
    }
}

/// Loads and aligns the features, annotations, split and textual-kernel
/// side data named by `cfg`.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let paths = &cfg.data;
    let mut features =
        FeatureMatrix::load(&paths.features, MatrixFormat::from_path(&paths.features))
            .stage("features")?;
    if paths.l2_normalize {
        features = features.l2_normalized();
    }
    let ids = features.row_ids().to_vec();

    let (vocab, text, transfer, truth) = (|| {
        let vocab = load_vocabulary(&paths.vocabulary)?;
        let text = load_labels(&paths.annotations, &vocab, &ids)?;
        let transfer = match &paths.transfer {
            Some(p) => load_labels(p, &vocab, &ids)?,
            None => text.clone(),
        };
        let truth = match &paths.truth {
            Some(p) => load_labels(p, &vocab, &ids)?,
            None => transfer.clone(),
        };
        Ok((vocab, text, transfer, truth))
    })()
    .stage("annotations")?;

    let (train, test) = read_split(&paths.split, &ids).stage("split")?;
    let data = Dataset {
        features,
        text,
        transfer,
        truth,
        train,
        test,
    };
    data.validate().stage("split")?;

    let text_kernel = (|| {
        let tk = match cfg.text_kernel {
            KernelSpec::LinearLabels => TextKernel::Linear,
            KernelSpec::OntologyLabels => {
                let p = paths.similarity.as_ref().ok_or_else(|| {
                    Error::Config("ontology_labels needs [data] similarity".into())
                })?;
                let s = SimilarityMatrix::load(p, vocab.clone())?;
                TextKernel::Ontology(if cfg.clip_similarity {
                    s.clip_to_psd()
                } else {
                    s
                })
            }
            KernelSpec::WordVecLabels => {
                let p = paths.word_vectors.as_ref().ok_or_else(|| {
                    Error::Config("wordvec_labels needs [data] word_vectors".into())
                })?;
                TextKernel::WordVec(load_word_vectors(p)?)
            }
            KernelSpec::ExpChi2(chi) => TextKernel::Tags {
                chi,
                denoise: cfg.denoise,
            },
            KernelSpec::ArcCos2 => {
                return Err(Error::Config("the textual kernel cannot be arccos2".into()))
            }
        };
        if cfg.denoise.is_some() && !matches!(tk, TextKernel::Tags { .. }) {
            return Err(Error::Config(
                "denoising applies to the exp_chi2 tag kernel only".into(),
            ));
        }
        Ok(tk)
    })()
    .stage("kernel")?;

    let mut input_hashes = vec![("features", hash_file(&paths.features).stage("features")?)];
    for (name, p) in [
        ("vocabulary", Some(&paths.vocabulary)),
        ("annotations", Some(&paths.annotations)),
        ("transfer", paths.transfer.as_ref()),
        ("truth", paths.truth.as_ref()),
        ("split", Some(&paths.split)),
        ("word_vectors", paths.word_vectors.as_ref()),
        ("similarity", paths.similarity.as_ref()),
    ] {
        if let Some(p) = p {
            input_hashes.push((name, hash_file(p).stage("annotations")?));
        }
    }
    Ok(Inputs {
        data,
        text_kernel,
        hashes: input_hashes,
    })
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    let Inputs {
        data,
        text_kernel,
        hashes: input_hashes,
    } = load_inputs(cfg)?;
    let ids = data.features.row_ids().to_vec();
    let (vk, cache_hit) =
        cached_visual_kernels(&data, &input_hashes[0].1, cfg.cache.as_deref()).stage("kernel")?;
    let exp = cfg.experiment(text_kernel);
    let emb = embed(&data, &vk, &exp)?;
    let (scores, report) = score_and_evaluate(&data, &emb, &exp)?;

    let out = &cfg.output;
    let mut common: Vec<(String, String)> = input_hashes
        .iter()
        .map(|(k, v)| (format!("input.{k}"), v.clone()))
        .collect();
    common.push(("config".into(), hash_parts([format!("{cfg:?}").as_str()])));
    common.push(("seed".into(), cfg.seed.to_string()));
    common.push(("space".into(), cfg.space.to_string()));
    common.push(("text_kernel".into(), cfg.text_kernel.to_string()));
    common.push(("method".into(), cfg.transfer.method.to_string()));
    (|| {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("kv_train.gram");
        vk.train.save(&p)?;
        stamp(&p, "kv_train", "kernel", &common)?;
        let p = out.join("kv_test.block");
        vk.test.save(&p)?;
        stamp(&p, "kv_test", "kernel", &common)?;
        if let Some(d) = &emb.denoised {
            let p = out.join("denoised.fmat");
            FeatureMatrix::new(d.to_dense(), d.row_ids().to_vec())?.save(&p)?;
            stamp(&p, "denoised", "denoise", &common)?;
        }
        if let Some(proj) = &emb.projector {
            let p = out.join("projector.sspj");
            proj.save(&p)?;
            stamp(&p, "projector", "fit", &common)?;
            let train_ids: Vec<String> = data.train.iter().map(|&i| ids[i].clone()).collect();
            let test_ids: Vec<String> = data.test.iter().map(|&i| ids[i].clone()).collect();
            let p = out.join("psi_train.fmat");
            FeatureMatrix::new(emb.train_features.clone(), train_ids)?.save(&p)?;
            stamp(&p, "psi_train", "project", &common)?;
            let p = out.join("psi_test.fmat");
            FeatureMatrix::new(emb.test_features.clone(), test_ids)?.save(&p)?;
            stamp(&p, "psi_test", "project", &common)?;
        }
        let p = out.join("scores.fmat");
        FeatureMatrix::new(scores.values.clone(), scores.row_ids.clone())?.save(&p)?;
        stamp(&p, "scores", "annotate", &common)?;
        let p = out.join("annotations.tsv");
        fs::write(&p, annotation_tsv(&scores, cfg.n)).map_err(|e| Error::io(&p, e))?;
        stamp(&p, "annotations", "annotate", &common)?;
        let p = out.join("report.tsv");
        fs::write(&p, report.to_tsv()).map_err(|e| Error::io(&p, e))?;
        stamp(&p, "report", "evaluate", &common)
    })()
    .stage("write")?;

    Ok(RunOutput {
        report,
        scores,
        output: out.clone(),
        kernel_cache_hit: cache_hit,
    })
}
