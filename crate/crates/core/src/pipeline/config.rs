//! INI run configuration.
//!
//! ```ini
//! seed = 7
//! output = out            ; relative paths resolve against the file's directory
//! cache = cache           ; optional kernel cache
//!
//! [data]
//! features = features.fmat
//! l2_normalize = false    ; scale every feature row to unit length
//! vocabulary = vocab.txt
//! annotations = tags.txt  ; textual view for KCCA
//! transfer = tags.txt     ; optional, defaults to annotations
//! truth = labels.txt      ; optional, defaults to transfer
//! split = split.txt       ; `id<TAB>train|test`
//! word_vectors = wv.txt   ; wordvec_labels only
//! similarity = s.csv      ; ontology_labels only
//!
//! [kernels]
//! text = exp_chi2         ; linear_labels | ontology_labels | wordvec_labels | exp_chi2[:C]
//! clip_similarity = false
//!
//! [denoise]
//! enabled = true
//! neighbors = 100
//! sigma = auto
//!
//! [kcca]
//! kappa = 0.5
//! max_rank = 4096
//! pgso_tol = 1e-6
//! dims = 64               ; optional
//! subset = 1000           ; optional
//! normalize = none        ; none | trace
//!
//! [transfer]
//! space = semantic
//! method = 2pknn
//! k = 20
//! m_per_label = 5
//! tagprop_epochs = 50
//! tagprop_step = 1
//! svm_lambda = 1e-4
//! svm_epochs = 20
//! svm_step0 = 0.1
//!
//! [eval]
//! n = 5
//! ```
//!
//! Every key is optional except the data paths; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use super::{KernelNorm, Method, Space, TransferConfig};
use crate::denoise::{DenoiseConfig, Sigma};
use crate::error::{Error, Result};
use crate::kcca::KccaConfig;
use crate::kernels::{ChiScale, KernelSpec};
use crate::transfer::{SvmConfig, TagPropConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub features: PathBuf,
    pub vocabulary: PathBuf,
    pub annotations: PathBuf,
    pub transfer: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub split: PathBuf,
    pub word_vectors: Option<PathBuf>,
    pub similarity: Option<PathBuf>,
    pub l2_normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub cache: Option<PathBuf>,
    pub data: DataPaths,
    pub text_kernel: KernelSpec,
    pub clip_similarity: bool,
    pub denoise: Option<DenoiseConfig>,
    pub space: Space,
    pub kcca: KccaConfig,
    pub kcca_subset: Option<usize>,
    pub kernel_norm: KernelNorm,
    pub transfer: TransferConfig,
    pub n: usize,
}

struct Entries {
    map: BTreeMap<(String, String), String>,
    base: PathBuf,
}

impl Entries {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.map
            .remove(&(section.to_string(), key.to_string()))
            .filter(|v| !v.is_empty())
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.take(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("[{section}] {key} = `{v}` is not valid"))),
        }
    }

    fn or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.parse(section, key)?.unwrap_or(default))
    }

    fn path(&mut self, section: &str, key: &str) -> Option<PathBuf> {
        self.take(section, key).map(|v| self.base.join(v))
    }

    fn required_path(&mut self, section: &str, key: &str) -> Result<PathBuf> {
        self.path(section, key)
            .ok_or_else(|| Error::Config(format!("missing [{section}] {key}")))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses INI text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut map = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                map.insert(
                    (section.unwrap_or("").to_string(), k.to_string()),
                    v.trim().to_string(),
                );
            }
        }
        let mut e = Entries {
            map,
            base: base.to_path_buf(),
        };

        let seed = e.or("", "seed", 0u64)?;
        let output = e.path("", "output").unwrap_or_else(|| base.join("out"));
        let cache = e.path("", "cache");
        let data = DataPaths {
            features: e.required_path("data", "features")?,
            vocabulary: e.required_path("data", "vocabulary")?,
            annotations: e.required_path("data", "annotations")?,
            transfer: e.path("data", "transfer"),
            truth: e.path("data", "truth"),
            split: e.required_path("data", "split")?,
            word_vectors: e.path("data", "word_vectors"),
            similarity: e.path("data", "similarity"),
            l2_normalize: e.or("data", "l2_normalize", false)?,
        };
        let text_kernel = e.or("kernels", "text", KernelSpec::LinearLabels)?;
        if text_kernel == KernelSpec::ArcCos2 {
            return Err(Error::Config("the textual kernel cannot be arccos2".into()));
        }
        let clip_similarity = e.or("kernels", "clip_similarity", false)?;

        let denoise = if e.or("denoise", "enabled", false)? {
            let sigma =
                match e.take("denoise", "sigma").as_deref() {
                    None | Some("auto") => Sigma::Auto,
                    Some(v) => Sigma::Fixed(v.parse().map_err(|_| {
                        Error::Config(format!("[denoise] sigma = `{v}` is not valid"))
                    })?),
                };
            let cfg = DenoiseConfig {
                neighbors: e.or("denoise", "neighbors", DenoiseConfig::default().neighbors)?,
                sigma,
            };
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };

        let d = KccaConfig::default();
        let kcca = KccaConfig {
            kappa: e.or("kcca", "kappa", d.kappa)?,
            max_rank: e.or("kcca", "max_rank", d.max_rank)?,
            pgso_tol: e.or("kcca", "pgso_tol", d.pgso_tol)?,
            m_dims: e.parse("kcca", "dims")?,
        };
        kcca.validate()?;
        let kcca_subset = e.parse("kcca", "subset")?;
        let kernel_norm = e.or("kcca", "normalize", KernelNorm::None)?;

        let space = e.or("transfer", "space", Space::Semantic)?;
        let t = TransferConfig::default();
        let tp = TagPropConfig::default();
        let sv = SvmConfig::default();
        let transfer = TransferConfig {
            method: e.or("transfer", "method", Method::NnVot)?,
            k: e.or("transfer", "k", t.k)?,
            m_per_label: e.or("transfer", "m_per_label", t.m_per_label)?,
            tagprop: TagPropConfig {
                k: tp.k,
                epochs: e.or("transfer", "tagprop_epochs", tp.epochs)?,
                step: e.or("transfer", "tagprop_step", tp.step)?,
            },
            svm: SvmConfig {
                lambda: e.or("transfer", "svm_lambda", sv.lambda)?,
                epochs: e.or("transfer", "svm_epochs", sv.epochs)?,
                step0: e.or("transfer", "svm_step0", sv.step0)?,
                seed: sv.seed,
            },
        };
        if transfer.k == 0 {
            return Err(Error::Config("[transfer] k must be at least 1".into()));
        }
        let n = e.or("eval", "n", 5usize)?;
        if n == 0 {
            return Err(Error::Config("[eval] n must be at least 1".into()));
        }

        if let Some(((s, k), _)) = e.map.iter().next() {
            let place = if s.is_empty() {
                String::new()
            } else {
                format!("[{s}] ")
            };
            return Err(Error::Config(format!("unknown key {place}{k}")));
        }
        Ok(PipelineConfig {
            seed,
            output,
            cache,
            data,
            text_kernel,
            clip_similarity,
            denoise,
            space,
            kcca,
            kcca_subset,
            kernel_norm,
            transfer,
            n,
        })
    }

    pub fn chi_scale(&self) -> ChiScale {
        match self.text_kernel {
            KernelSpec::ExpChi2(c) => c,
            _ => ChiScale::Auto,
        }
    }
}
