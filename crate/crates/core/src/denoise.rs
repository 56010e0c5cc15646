//! One-pass tag pre-propagation: each image's tag vector is replaced by a
//! similarity-weighted average of the tags of its `R` most similar images.

use rayon::prelude::*;

use crate::data::{AnnotationSet, GramMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    /// Mean squared kernel distance over all selected (image, neighbor) pairs.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub neighbors: usize,
    pub sigma: Sigma,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            neighbors: 100,
            sigma: Sigma::Auto,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::Config(
                "denoise neighbor count R must be at least 1".into(),
            ));
        }
        if let Sigma::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "denoise sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Indices of the `r` largest entries of row `i` of `kv`, self excluded,
/// ties broken by ascending index.
pub(crate) fn most_similar(kv: &GramMatrix, i: usize, r: usize) -> Vec<usize> {
    let n = kv.n();
    let mut cand: Vec<usize> = (0..n).filter(|&k| k != i).collect();
    let key = |&a: &usize, &b: &usize| kv.get(i, b).total_cmp(&kv.get(i, a)).then(a.cmp(&b));
    if r < cand.len() {
        cand.select_nth_unstable_by(r - 1, key);
        cand.truncate(r);
    }
    cand.sort_by(key);
    cand
}

/// Squared distance induced by the kernel, clamped at zero.
pub(crate) fn kernel_sq_distance(kv: &GramMatrix, i: usize, k: usize) -> f64 {
    (kv.get(i, i) + kv.get(k, k) - 2.0 * kv.get(i, k)).max(0.0)
}

/// Replaces every tag vector with the weighted mean of its visual neighbors'
/// tags, `x_k = exp(−d²_ik / σ)`.
///
/// `kv` must be the visual gram over exactly the images of `tags`, in the same
/// order. Output weights lie in `[0, 1]`.
pub fn pre_propagate_tags(
    tags: &AnnotationSet,
    kv: &GramMatrix,
    cfg: &DenoiseConfig,
) -> Result<AnnotationSet> {
    cfg.validate()?;
    let n = tags.len();
    if kv.n() != n || kv.row_ids() != tags.row_ids() {
        return Err(Error::Data(
            "visual gram rows do not align with tag rows".into(),
        ));
    }
    let r = cfg.neighbors;
    if n <= r {
        return Err(Error::Data(format!(
            "denoising with R = {r} neighbors needs more than {r} images, got {n}"
        )));
    }

    let neighborhoods: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            most_similar(kv, i, r)
                .into_iter()
                .map(|k| (k, kernel_sq_distance(kv, i, k)))
                .collect()
        })
        .collect();

    let sigma = match cfg.sigma {
        Sigma::Fixed(s) => s,
        Sigma::Auto => {
            let total: f64 = neighborhoods.iter().flatten().map(|&(_, d2)| d2).sum();
            let mean = total / (n * r) as f64;
            if mean > 0.0 {
                mean
            } else {
                log::warn!("all neighbor distances are zero; using sigma = 1");
                1.0
            }
        }
    };

    let d = tags.vocabulary().len();
    let rows: Vec<Vec<(usize, f64)>> = neighborhoods
        .par_iter()
        .map(|hood| {
            let mut acc = vec![0.0; d];
            let mut total = 0.0;
            for &(k, d2) in hood {
                let x = (-d2 / sigma).exp();
                total += x;
                for &(label, w) in tags.row(k) {
                    acc[label] += x * w;
                }
            }
            if total > 0.0 {
                acc.into_iter()
                    .enumerate()
                    .filter(|&(_, v)| v > 0.0)
                    .map(|(label, v)| (label, (v / total).min(1.0)))
                    .collect()
            } else {
                // every weight underflowed: fall back to the plain neighbor mean
                let mut acc = vec![0.0; d];
                for &(k, _) in hood {
                    for &(label, w) in tags.row(k) {
                        acc[label] += w / hood.len() as f64;
                    }
                }
                acc.into_iter()
                    .enumerate()
                    .filter(|&(_, v)| v > 0.0)
                    .collect()
            }
        })
        .collect();

    AnnotationSet::new(tags.vocabulary().clone(), rows, tags.row_ids().to_vec())
}
