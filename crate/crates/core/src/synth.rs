//! Seeded synthetic multimodal data.
//!
//! Each class has a Gaussian prototype feature vector and a fixed random
//! subset of the vocabulary. An image is its class prototype plus isotropic
//! Gaussian noise of scale `σ_v` and carries exactly its class labels
//! (clean annotations). The noisy copy flips every label bit independently
//! with probability `p_flip`. The train/test split is stratified by class.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{save_annotations, save_vocabulary, AnnotationSet, FeatureMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub labels_per_class: usize,
    pub visual_noise: f64,
    pub tag_noise_rate: f64,
    /// Share of each class held out for testing (rounded per class).
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 8,
            images_per_class: 60,
            feature_dim: 32,
            vocab_size: 24,
            labels_per_class: 3,
            visual_noise: 1.0,
            tag_noise_rate: 0.0,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.images_per_class == 0
            || self.feature_dim == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config(
                "synthetic counts must all be at least 1".into(),
            ));
        }
        if self.labels_per_class == 0 || self.labels_per_class > self.vocab_size {
            return Err(Error::Config(format!(
                "labels_per_class = {} must lie in 1..={}",
                self.labels_per_class, self.vocab_size
            )));
        }
        if !(self.visual_noise >= 0.0) || !self.visual_noise.is_finite() {
            return Err(Error::Config(
                "visual noise must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tag_noise_rate) {
            return Err(Error::Config("tag noise rate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.n_classes * self.images_per_class
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub features: FeatureMatrix,
    pub clean: AnnotationSet,
    pub noisy: AnnotationSet,
    pub classes: Vec<usize>,
    /// Sorted image indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let (c, m, p, d) = (
        spec.n_classes,
        spec.images_per_class,
        spec.feature_dim,
        spec.vocab_size,
    );
    let n = c * m;

    let mut proto_rng = rng::stream(spec.seed, rng::SYNTH_PROTOTYPES);
    let prototypes = DMatrix::<f64>::from_fn(c, p, |_, _| proto_rng.sample(StandardNormal));

    let mut label_rng = rng::stream(spec.seed, rng::SYNTH_LABELS);
    let class_labels: Vec<Vec<usize>> = (0..c)
        .map(|_| {
            let mut l = index::sample(&mut label_rng, d, spec.labels_per_class).into_vec();
            l.sort_unstable();
            l
        })
        .collect();

    let classes: Vec<usize> = (0..n).map(|i| i / m).collect();
    let mut noise_rng = rng::stream(spec.seed, rng::SYNTH_NOISE);
    let mut x = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let e: f64 = noise_rng.sample(StandardNormal);
            x[(i, j)] = prototypes[(classes[i], j)] + spec.visual_noise * e;
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("img{i:05}")).collect();
    let vocab = Vocabulary::new((0..d).map(|t| format!("tag{t:03}")))?;

    let clean_sets: Vec<Vec<usize>> = classes.iter().map(|&k| class_labels[k].clone()).collect();
    let mut flip_rng = rng::stream(spec.seed, rng::SYNTH_FLIPS);
    let noisy_sets: Vec<Vec<usize>> = clean_sets
        .iter()
        .map(|set| {
            (0..d)
                .filter(|t| {
                    set.binary_search(t).is_ok() != flip_rng.random_bool(spec.tag_noise_rate)
                })
                .collect()
        })
        .collect();

    let mut split_rng = rng::stream(spec.seed, rng::SYNTH_SPLIT);
    let n_test = (spec.test_fraction * m as f64).round() as usize;
    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(c * n_test);
    for k in 0..c {
        let mut members: Vec<usize> = (k * m..(k + 1) * m).collect();
        members.shuffle(&mut split_rng);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    Ok(SynthDataset {
        features: FeatureMatrix::new(x, ids.clone())?,
        clean: AnnotationSet::from_label_sets(vocab.clone(), clean_sets, ids.clone())?,
        noisy: AnnotationSet::from_label_sets(vocab, noisy_sets, ids)?,
        classes,
        train,
        test,
    })
}

impl SynthDataset {
    /// Writes `features.fmat`, `vocab.txt`, `clean.txt`, `noisy.txt` and
    /// `split.txt` (`id<TAB>train|test`) into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.features.save(&dir.join("features.fmat"))?;
        save_vocabulary(&dir.join("vocab.txt"), self.clean.vocabulary())?;
        save_annotations(&dir.join("clean.txt"), &self.clean)?;
        save_annotations(&dir.join("noisy.txt"), &self.noisy)?;
        let ids = self.features.row_ids();
        let mut split: Vec<(usize, &str)> = self.train.iter().map(|&i| (i, "train")).collect();
        split.extend(self.test.iter().map(|&i| (i, "test")));
        split.sort_unstable();
        let body: String = split
            .iter()
            .map(|(i, role)| format!("{}\t{role}\n", ids[*i]))
            .collect();
        let p = dir.join("split.txt");
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }
}
