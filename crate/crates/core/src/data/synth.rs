//! Gaussian-cluster classification tasks.
//!
//! Class geometry lives in a "world" keyed by a seed: class `c` owns a few
//! sub-cluster means drawn from a stream that depends only on `(seed, c)`.
//! Private datasets and the public set share that world, so the public set
//! can be made to coincide with, or drift away from, the private task.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use crate::error::{FedHelpError, Result};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;

/// Datum ids of public data start here; private ids start at 0.
pub const PUBLIC_ID_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub size: usize,
    /// Within-cluster standard deviation.
    pub spread: f64,
    /// Sub-clusters per class.
    #[serde(default = "default_modes")]
    pub modes: usize,
}

fn default_modes() -> usize {
    2
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        ClassificationSpec {
            seed: 0,
            classes: 8,
            dim: 32,
            size: 20_000,
            spread: 1.0,
            modes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicSetSpec {
    /// World seed shared with the private task.
    pub seed: u64,
    pub classes: usize,
    pub size: usize,
    /// 0 reproduces the private class geometry; larger values rotate and
    /// translate every class mean.
    pub shift: f64,
    pub dim: usize,
    pub spread: f64,
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Separates independent draws from the same public distribution
    /// (e.g. the oracles' held-out shard).
    #[serde(default)]
    pub sample_stream: u64,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

const CENTER_SCALE: f64 = 1.5;
const MODE_SCALE: f64 = 0.75;

/// Sub-cluster means of class `c`: a class center with per-coordinate
/// scale 1.5 plus per-mode offsets of scale 0.75.
fn class_means(seed: u64, c: usize, dim: usize, modes: usize) -> Vec<Vec<f64>> {
    let mut r = rng::rng_from(seed, &[stream::MEANS, c as u64]);
    let center: Vec<f64> = (0..dim).map(|_| CENTER_SCALE * normal(&mut r)).collect();
    (0..modes)
        .map(|_| center.iter().map(|&m| m + MODE_SCALE * normal(&mut r)).collect())
        .collect()
}

/// Rotates coordinate pairs `(2i, 2i+1)` by `angle` and adds `offset`.
fn drift(mean: &[f64], angle: f64, offset: &[f64]) -> Vec<f64> {
    let (s, co) = angle.sin_cos();
    let mut out = mean.to_vec();
    for i in (0..mean.len() - mean.len() % 2).step_by(2) {
        out[i] = co * mean[i] - s * mean[i + 1];
        out[i + 1] = s * mean[i] + co * mean[i + 1];
    }
    out.iter_mut().zip(offset).for_each(|(x, o)| *x += o);
    out
}

fn sample_clusters(
    means: &[Vec<Vec<f64>>],
    size: usize,
    spread: f64,
    rng: &mut Rng,
    id_base: u64,
) -> Result<LabeledDataset> {
    let classes = means.len();
    let dim = means[0][0].len();
    // Balanced labels, shuffled.
    let mut labels: Vec<usize> = (0..size).map(|i| i % classes).collect();
    labels.shuffle(rng);
    // Features are rescaled to roughly unit variance per coordinate.
    let scale = 1.0 / (CENTER_SCALE.powi(2) + MODE_SCALE.powi(2) + spread * spread).sqrt();
    let mut data = Vec::with_capacity(size * dim);
    for &c in &labels {
        let modes = &means[c];
        let mode = &modes[rng.random_range(0..modes.len())];
        data.extend(mode.iter().map(|&m| scale * (m + spread * normal(rng))));
    }
    let ids = (0..size as u64).map(|i| id_base + i).collect();
    LabeledDataset::new(Tensor::new(vec![size, dim], data)?, labels, ids, classes)
}

/// Balanced Gaussian-mixture classification data. Ids are `0..size`.
pub fn make_classification(spec: &ClassificationSpec) -> Result<LabeledDataset> {
    if spec.classes < 2 {
        return Err(FedHelpError::Data("need at least two classes".into()));
    }
    if spec.size < spec.classes {
        return Err(FedHelpError::Data(format!(
            "{} samples cannot cover {} classes",
            spec.size, spec.classes
        )));
    }
    if spec.dim == 0 || spec.modes == 0 {
        return Err(FedHelpError::Data("dim and modes must be positive".into()));
    }
    let means: Vec<_> = (0..spec.classes)
        .map(|c| class_means(spec.seed, c, spec.dim, spec.modes))
        .collect();
    let mut r = rng::rng_from(spec.seed, &[stream::SAMPLES]);
    sample_clusters(&means, spec.size, spec.spread, &mut r, 0)
}

/// Public data: same world, `classes` labels (may differ from the private
/// count), means rotated by `shift · π/4` in every coordinate plane and
/// translated by `shift` times a fixed random direction. Ids start at
/// [`PUBLIC_ID_OFFSET`].
pub fn make_public_set(spec: &PublicSetSpec) -> Result<LabeledDataset> {
    if spec.size == 0 || spec.classes < 2 || spec.dim == 0 {
        return Err(FedHelpError::Data("public set needs size ≥ 1, ≥ 2 classes".into()));
    }
    let mut r = rng::rng_from(spec.seed, &[stream::PUBLIC, u64::MAX]);
    let offset: Vec<f64> = (0..spec.dim).map(|_| spec.shift * normal(&mut r)).collect();
    let angle = spec.shift * std::f64::consts::FRAC_PI_4;
    let means: Vec<_> = (0..spec.classes)
        .map(|c| {
            class_means(spec.seed, c, spec.dim, spec.modes)
                .iter()
                .map(|m| drift(m, angle, &offset))
                .collect()
        })
        .collect();
    let mut r = rng::rng_from(spec.seed, &[stream::PUBLIC, spec.sample_stream]);
    let base = PUBLIC_ID_OFFSET + spec.sample_stream * (1 << 32);
    sample_clusters(&means, spec.size, spec.spread, &mut r, base)
}
