use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use semspace::data::{load_annotations, load_vocabulary, load_word_vectors};
use semspace::denoise::{pre_propagate_tags, DenoiseConfig, Sigma};
use semspace::eval::evaluate;
use semspace::kcca::{project, KccaConfig};
use semspace::kernels::{self, KernelSpec};
use semspace::pipeline::{
    annotation_tsv, cross_validate, fit_normalized, load_inputs, read_split, run_pipeline, score, CvGrid, Embedded, KernelNorm,
    Method, PipelineConfig, Space, TransferConfig,
};
use semspace::provenance::{hash_file, hash_parts, Sidecar};
use semspace::synth::{synth_dataset, SynthSpec};
use semspace::transfer::{SvmConfig, TagPropConfig};
use semspace::{
    AnnotationSet, Error, FeatureMatrix, GramMatrix, KernelBlock, MatrixFormat, Result, SemanticProjector,
    SimilarityMatrix, Vocabulary,
};

/// Image annotation by label transfer in a KCCA semantic space.
#[derive(Parser)]
#[command(name = "semspace", version)]
struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for cached visual kernels.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a gram matrix, or a kernel block against a second input.
    Kernel(KernelArgs),
    /// Pre-propagate noisy tags over visual neighbors.
    Denoise(DenoiseArgs),
    /// Fit KCCA on a visual and a textual gram.
    Fit(FitArgs),
    /// Embed images from their visual kernel rows against the training set.
    Project(ProjectArgs),
    /// Score test images and write the top labels as TSV.
    Annotate(AnnotateArgs),
    /// Compare a score matrix with ground truth.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Run the whole pipeline from a config file.
    Run(ConfigArgs),
    /// Three-fold selection of K (or the SVM λ) on the training split.
    Cv(CvArgs),
}

#[derive(Args)]
struct KernelArgs {
    /// arccos2 | linear_labels | ontology_labels | wordvec_labels | exp_chi2[:C]
    #[arg(long)]
    kind: KernelSpec,
    /// Feature file (arccos2).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    l2_normalize: bool,
    /// Annotation file or dense tag matrix (label kernels).
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    #[arg(long)]
    similarity: Option<PathBuf>,
    /// Clip negative eigenvalues of the label similarity matrix.
    #[arg(long)]
    clip_similarity: bool,
    /// Column-side input of the same kind; writes a block instead of a gram.
    #[arg(long)]
    against: Option<PathBuf>,
    /// Split file (`id<TAB>train|test`) for `--rows` / `--cols`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Keep only the images of this split role as rows.
    #[arg(long)]
    rows: Option<Role>,
    /// Columns from the same input, restricted to this role; writes a block.
    #[arg(long)]
    cols: Option<Role>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Role {
    Train,
    Test,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    tags: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Visual gram over the tagged images.
    #[arg(long)]
    gram: PathBuf,
    #[arg(long = "R", default_value_t = 100)]
    r: usize,
    /// `auto` or a positive number.
    #[arg(long, default_value = "auto")]
    sigma: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    kv: PathBuf,
    #[arg(long)]
    kt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    #[arg(long, default_value_t = 4096)]
    max_rank: usize,
    #[arg(long, default_value_t = 1e-6)]
    pgso_tol: f64,
    #[arg(long)]
    dims: Option<usize>,
    /// none | trace
    #[arg(long, default_value = "none")]
    normalize: KernelNorm,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Visual kernel rows (block or gram) against the KCCA training images.
    #[arg(long)]
    kv_rows: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long, default_value = "nnvot")]
    method: Method,
    #[arg(long, default_value = "semantic")]
    space: Space,
    #[arg(long = "K", default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// 2PKNN images per label.
    #[arg(long, default_value_t = 5)]
    m_per_label: usize,
    #[arg(long, default_value_t = 50)]
    tagprop_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    svm_lambda: f64,
    #[arg(long, default_value_t = 20)]
    svm_epochs: usize,
    /// Labels of the training images.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Semantic space: embedded training images.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Semantic space: embedded test images.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Baseline space: visual gram over the training images.
    #[arg(long)]
    kv: Option<PathBuf>,
    /// Baseline space: visual kernel block, test x train.
    #[arg(long)]
    kv_rows: Option<PathBuf>,
    /// Baseline space: raw features of (at least) all train and test images.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    l2_normalize: bool,
    /// Also write the full score matrix.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Defaults to `vocab.txt` next to the truth file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    n: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    images_per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 24)]
    vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    labels_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    visual_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    tag_noise: f64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    config: PathBuf,
    /// Candidate neighbor counts.
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20, 50])]
    k: Vec<usize>,
    /// Candidate SVM regularizers.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-6, 1e-4, 1e-2])]
    svm_lambda: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Kernel(a) => kernel(a, cli.cache_dir.as_deref()),
        Command::Denoise(a) => denoise(a),
        Command::Fit(a) => fit(a),
        Command::Project(a) => project_cmd(a),
        Command::Annotate(a) => annotate(a, cli.seed.unwrap_or(0)),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0)),
        Command::Run(a) => {
            let cfg = load_config(&a.config, cli)?;
            let out = run_pipeline(&cfg)?;
            info!("artifacts in {}", out.output.display());
            print!("{}", out.report.to_tsv());
            Ok(())
        }
        Command::Cv(a) => cv(a, cli),
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = &cli.cache_dir {
        cfg.cache = Some(c.clone());
    }
    Ok(cfg)
}

fn load_features(path: &Path, l2: bool) -> Result<FeatureMatrix> {
    let f = FeatureMatrix::load(path, MatrixFormat::from_path(path))?;
    Ok(if l2 { f.l2_normalized() } else { f })
}

/// Positions of `wanted` within `ids`.
fn positions(ids: &[String], wanted: &[String], what: &str) -> Result<Vec<usize>> {
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    wanted
        .iter()
        .map(|id| {
            pos.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("image `{id}` is missing from the {what}")))
        })
        .collect()
}

/// Binary annotation file, or a dense `.fmat`/`.csv` tag matrix.
fn load_tags(path: &Path, vocab: &Vocabulary) -> Result<AnnotationSet> {
    let dense = matches!(path.extension().and_then(|e| e.to_str()), Some("fmat" | "csv"));
    if dense {
        let m = FeatureMatrix::load(path, MatrixFormat::from_path(path))?;
        return AnnotationSet::from_dense(vocab.clone(), m.values(), m.row_ids().to_vec());
    }
    let (set, dropped) = load_annotations(path, vocab)?;
    if dropped > 0 {
        info!("{}: {dropped} unknown labels dropped", path.display());
    }
    Ok(set)
}

fn aligned_tags(path: &Path, vocab: &Vocabulary, ids: &[String]) -> Result<AnnotationSet> {
    let set = load_tags(path, vocab)?;
    let order = positions(set.row_ids(), ids, "annotations")?;
    Ok(set.select_rows(&order))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required here")))
}

/// Row and column selections for `kernel`: `None` keeps every image.
struct Selection {
    rows: Option<Vec<usize>>,
    cols: Option<Vec<usize>>,
}

fn selection(a: &KernelArgs, ids: &[String]) -> Result<Selection> {
    if a.cols.is_some() && a.against.is_some() {
        return Err(Error::Config("--cols and --against are mutually exclusive".into()));
    }
    if a.rows.is_none() && a.cols.is_none() {
        return Ok(Selection { rows: None, cols: None });
    }
    let split = need(&a.split, "split")?;
    let (train, test) = read_split(split, ids)?;
    let pick = |r: Option<Role>| {
        r.map(|r| match r {
            Role::Train => train.clone(),
            Role::Test => test.clone(),
        })
    };
    Ok(Selection {
        rows: pick(a.rows),
        cols: pick(a.cols),
    })
}

fn kernel(a: &KernelArgs, cache: Option<&Path>) -> Result<()> {
    if let KernelSpec::ArcCos2 = a.kind {
        let f = need(&a.features, "features")?;
        let role = |r: Option<Role>| match r {
            None => "all",
            Some(Role::Train) => "train",
            Some(Role::Test) => "test",
        };
        let mut parts = vec![
            hash_file(f)?,
            a.kind.to_string(),
            a.l2_normalize.to_string(),
            role(a.rows).to_owned(),
            role(a.cols).to_owned(),
        ];
        for p in [&a.against, &a.split].into_iter().flatten() {
            parts.push(hash_file(p)?);
        }
        let key = hash_parts(parts.iter().map(String::as_str));
        let is_block = a.against.is_some() || a.cols.is_some();
        let cached = cache.map(|d| d.join(format!("{key}.{}", if is_block { "block" } else { "gram" })));
        if let Some(c) = cached.as_ref().filter(|c| c.exists()) {
            info!("kernel from cache {key}");
            return copy_with_sidecar(c, &a.out);
        }
        let x = load_features(f, a.l2_normalize)?;
        let sel = selection(a, x.row_ids())?;
        let rows = sel.rows.as_ref().map_or_else(|| x.clone(), |r| x.select_rows(r));
        let cols = match (&sel.cols, &a.against) {
            (Some(c), _) => Some(x.select_rows(c)),
            (None, Some(b)) => Some(load_features(b, a.l2_normalize)?),
            (None, None) => None,
        };
        match cols {
            None => kernels::arccos2_gram(&rows)?.save(&a.out)?,
            Some(c) => kernels::arccos2_block(&rows, &c)?.save(&a.out)?,
        }
        if let Some(c) = cached {
            if let Some(dir) = c.parent() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            copy_with_sidecar(&a.out, &c)?;
        }
        return Ok(());
    }

    let vocab = load_vocabulary(need(&a.vocab, "vocab")?)?;
    let all = load_tags(need(&a.annotations, "annotations")?, &vocab)?;
    let sel = selection(a, all.row_ids())?;
    let rows = sel.rows.as_ref().map_or_else(|| all.clone(), |r| all.select_rows(r));
    let cols = match (&sel.cols, &a.against) {
        (Some(c), _) => Some(all.select_rows(c)),
        (None, Some(b)) => Some(load_tags(b, &vocab)?),
        (None, None) => None,
    };
    let sim = || -> Result<SimilarityMatrix> {
        let s = SimilarityMatrix::load(need(&a.similarity, "similarity")?, vocab.clone())?;
        Ok(if a.clip_similarity { s.clip_to_psd() } else { s })
    };
    match (a.kind, &cols) {
        (KernelSpec::LinearLabels, None) => kernels::linear_label_gram(&rows)?.save(&a.out),
        (KernelSpec::LinearLabels, Some(c)) => kernels::linear_label_block(&rows, c)?.save(&a.out),
        (KernelSpec::OntologyLabels, None) => kernels::ontology_label_gram(&rows, &sim()?)?.save(&a.out),
        (KernelSpec::OntologyLabels, Some(c)) => kernels::ontology_label_block(&rows, c, &sim()?)?.save(&a.out),
        (KernelSpec::WordVecLabels, cols) => {
            let w = load_word_vectors(need(&a.word_vectors, "word-vectors")?)?;
            match cols {
                None => kernels::wordvec_label_gram(&rows, &w)?.save(&a.out),
                Some(c) => kernels::wordvec_label_block(&rows, c, &w)?.save(&a.out),
            }
        }
        (KernelSpec::ExpChi2(c), None) => {
            let (g, used) = kernels::exp_chi2_gram(&rows, c)?;
            info!("exp_chi2 scale C = {used}");
            g.save(&a.out)
        }
        (KernelSpec::ExpChi2(c), Some(cols)) => kernels::exp_chi2_block(&rows, cols, c)?.0.save(&a.out),
        (KernelSpec::ArcCos2, _) => unreachable!("handled above"),
    }
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn copy_with_sidecar(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map_err(|e| io_err(to, e))?;
    let (sf, st) = (Sidecar::path_for(from), Sidecar::path_for(to));
    if sf.exists() {
        fs::copy(&sf, &st).map_err(|e| io_err(&st, e))?;
    }
    Ok(())
}

fn denoise(a: &DenoiseArgs) -> Result<()> {
    let sigma = match a.sigma.as_str() {
        "auto" => Sigma::Auto,
        s => Sigma::Fixed(
            s.parse()
                .map_err(|_| Error::Config(format!("--sigma `{s}` is neither auto nor a number")))?,
        ),
    };
    let cfg = DenoiseConfig { neighbors: a.r, sigma };
    let kv = GramMatrix::load(&a.gram)?;
    let vocab = load_vocabulary(&a.vocab)?;
    let tags = aligned_tags(&a.tags, &vocab, kv.row_ids())?;
    let out = pre_propagate_tags(&tags, &kv, &cfg)?;
    FeatureMatrix::new(out.to_dense(), out.row_ids().to_vec())?.save(&a.out)?;
    Sidecar::new("denoised")
        .with("neighbors", a.r)
        .with("sigma", &a.sigma)
        .with("vocabulary", vocab.labels().join(","))
        .write_for(&a.out)
}

fn fit(a: &FitArgs) -> Result<()> {
    let cfg = KccaConfig {
        kappa: a.kappa,
        max_rank: a.max_rank,
        pgso_tol: a.pgso_tol,
        m_dims: a.dims,
    };
    cfg.validate()?;
    let kv = GramMatrix::load(&a.kv)?;
    let kt = GramMatrix::load(&a.kt)?;
    let p = fit_normalized(&kv, &kt, &cfg, a.normalize)?;
    info!("{} components, r_1 = {:?}", p.m_dims(), p.correlations().first());
    p.save(&a.out)
}

fn project_cmd(a: &ProjectArgs) -> Result<()> {
    let p = SemanticProjector::load(&a.model)?;
    let rows = KernelBlock::load(&a.kv_rows)?;
    project(&p, &rows)?.save(&a.out)
}

fn annotate(a: &AnnotateArgs, seed: u64) -> Result<()> {
    let vocab = load_vocabulary(&a.vocab)?;
    let (emb, train_ids, test_ids) = match a.space {
        Space::Semantic => {
            let train = load_features(need(&a.train, "train")?, false)?;
            let test = load_features(need(&a.test, "test")?, false)?;
            let ids = (train.row_ids().to_vec(), test.row_ids().to_vec());
            (Embedded::semantic(train, &test)?, ids.0, ids.1)
        }
        Space::Baseline => {
            let kv = GramMatrix::load(need(&a.kv, "kv")?)?;
            let block = KernelBlock::load(need(&a.kv_rows, "kv-rows")?)?;
            let x = load_features(need(&a.features, "features")?, a.l2_normalize)?;
            let tr = x.select_rows(&positions(x.row_ids(), kv.row_ids(), "features")?);
            let te = x.select_rows(&positions(x.row_ids(), &block.row_ids, "features")?);
            let ids = (kv.row_ids().to_vec(), block.row_ids.clone());
            (Embedded::baseline(kv, &block, tr.values(), te.values())?, ids.0, ids.1)
        }
    };
    let labels = aligned_tags(&a.labels, &vocab, &train_ids)?;
    let cfg = TransferConfig {
        method: a.method,
        k: a.k,
        m_per_label: a.m_per_label,
        tagprop: TagPropConfig {
            epochs: a.tagprop_epochs,
            ..TagPropConfig::default()
        },
        svm: SvmConfig {
            lambda: a.svm_lambda,
            epochs: a.svm_epochs,
            ..SvmConfig::default()
        },
    };
    let scores = score(&emb, &labels, test_ids, &cfg, seed)?;
    if let Some(p) = &a.scores {
        FeatureMatrix::new(scores.values.clone(), scores.row_ids.clone())?.save(p)?;
        Sidecar::new("scores")
            .with("method", a.method)
            .with("space", a.space)
            .with("vocabulary", vocab.labels().join(","))
            .write_for(p)?;
    }
    fs::write(&a.out, annotation_tsv(&scores, a.n)).map_err(|e| io_err(&a.out, e))
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.truth.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = load_vocabulary(&vocab_path)?;
    let m = FeatureMatrix::load(&a.scores, MatrixFormat::from_path(&a.scores))?;
    if m.n_cols() != vocab.len() {
        return Err(Error::Dimension(format!(
            "score matrix has {} columns, vocabulary {} labels",
            m.n_cols(),
            vocab.len()
        )));
    }
    let scores = semspace::transfer::RelevanceScores::new(m.row_ids().to_vec(), vocab.clone(), m.values().clone())?;
    let truth = aligned_tags(&a.truth, &vocab, m.row_ids())?;
    print!("{}", evaluate(&scores, &truth, a.n)?.to_tsv());
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        images_per_class: a.images_per_class,
        feature_dim: a.dim,
        vocab_size: a.vocab_size,
        labels_per_class: a.labels_per_class,
        visual_noise: a.visual_noise,
        tag_noise_rate: a.tag_noise,
        test_fraction: a.test_fraction,
        seed,
    };
    let d = synth_dataset(&spec)?;
    d.write_to(&a.out)?;
    eprintln!(
        "{} images ({} train, {} test) written to {}",
        spec.n_images(),
        d.train.len(),
        d.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cv(a: &CvArgs, cli: &Cli) -> Result<()> {
    let cfg = load_config(&a.config, cli)?;
    let inputs = load_inputs(&cfg)?;
    let exp = cfg.experiment(inputs.text_kernel);
    let grid = CvGrid {
        k: a.k.clone(),
        svm_lambda: a.svm_lambda.clone(),
    };
    let res = cross_validate(&inputs.data, &exp, &grid)?;
    println!("k\tsvm_lambda\tmap");
    for (c, map) in &res.table {
        println!("{}\t{:e}\t{map:.6}", c.k, c.svm.lambda);
    }
    println!("best\t{}\t{:e}", res.best.k, res.best.svm.lambda);
    Ok(())
}
