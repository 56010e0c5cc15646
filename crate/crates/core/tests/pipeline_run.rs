use std::fs;
use std::path::Path;

use semspace::data::FeatureMatrix;
use semspace::pipeline::{run_pipeline, PipelineConfig};
use semspace::provenance::Sidecar;
use semspace::synth::{synth_dataset, SynthSpec};
use semspace::Error;

fn write_data(dir: &Path) {
    let spec = SynthSpec {
        n_classes: 4,
        images_per_class: 20,
        feature_dim: 8,
        vocab_size: 10,
        labels_per_class: 2,
        tag_noise_rate: 0.1,
        seed: 3,
        ..SynthSpec::default()
    };
    synth_dataset(&spec).unwrap().write_to(dir).unwrap();
}

fn config(dir: &Path, out: &str, extra: &str) -> PipelineConfig {
    let text = format!(
        "seed = 11\noutput = {out}\ncache = cache\n\
         [data]\nfeatures = features.fmat\nl2_normalize = true\nvocabulary = vocab.txt\n\
         annotations = noisy.txt\ntruth = clean.txt\nsplit = split.txt\n\
         [kernels]\ntext = exp_chi2\n[denoise]\nenabled = true\nneighbors = 10\n\
         [kcca]\nnormalize = trace\n{extra}"
    );
    PipelineConfig::parse(&text, dir).unwrap()
}

#[test]
fn repeated_runs_are_bit_identical_and_reuse_the_kernel_cache() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let first = run_pipeline(&config(dir.path(), "a", "[transfer]\nmethod = svm\n")).unwrap();
    let second = run_pipeline(&config(dir.path(), "b", "[transfer]\nmethod = svm\n")).unwrap();
    assert!(!first.kernel_cache_hit);
    assert!(second.kernel_cache_hit);

    let bits = |m: &nalgebra::DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first.scores.values), bits(&second.scores.values));
    let a = FeatureMatrix::load(
        &dir.path().join("a/scores.fmat"),
        semspace::MatrixFormat::Binary,
    )
    .unwrap();
    let b = FeatureMatrix::load(
        &dir.path().join("b/scores.fmat"),
        semspace::MatrixFormat::Binary,
    )
    .unwrap();
    assert_eq!(bits(a.values()), bits(b.values()));
    assert_eq!(bits(a.values()), bits(&first.scores.values));
    assert_eq!(first.report, second.report);
}

#[test]
fn artifacts_carry_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let run = run_pipeline(&config(dir.path(), "out", "")).unwrap();
    for name in [
        "kv_train.gram",
        "kv_test.block",
        "denoised.fmat",
        "projector.sspj",
        "psi_train.fmat",
        "psi_test.fmat",
        "scores.fmat",
        "annotations.tsv",
        "report.tsv",
    ] {
        let p = run.output.join(name);
        assert!(p.exists(), "{name} missing");
        let side = Sidecar::read_for(&p).unwrap();
        assert_eq!(side.get("seed"), Some("11"));
        assert!(side.get("input.features").is_some());
        assert!(side.get("config").is_some());
    }
    let report = fs::read_to_string(run.output.join("report.tsv")).unwrap();
    let keys: Vec<&str> = report
        .lines()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(
        keys,
        [
            "map",
            "prec_at_n",
            "rec_at_n",
            "n_plus",
            "n",
            "labels",
            "labels_with_positives"
        ]
    );
    let annotated = fs::read_to_string(run.output.join("annotations.tsv")).unwrap();
    assert_eq!(annotated.lines().count(), run.scores.row_ids.len());
}

#[test]
fn baseline_run_skips_the_projection() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let run = run_pipeline(&config(
        dir.path(),
        "base",
        "[transfer]\nspace = baseline\n",
    ))
    .unwrap();
    assert!(!run.output.join("projector.sspj").exists());
    assert!(run.report.map > 0.0);
}

#[test]
fn missing_annotations_abort_in_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    fs::remove_file(dir.path().join("noisy.txt")).unwrap();
    let err = run_pipeline(&config(dir.path(), "out", "")).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Stage {
                stage: "annotations",
                ..
            }
        ),
        "{err}"
    );
    assert!(err.to_string().contains("annotations"));
    assert_eq!(err.exit_code(), 3);
}
