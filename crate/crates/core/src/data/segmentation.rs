//! Toy binary segmentation: noisy images of smooth blobs, thresholded masks,
//! per-pixel distance maps and precomputed loss weight maps.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::distance::{distance_transforms, label_components};
use crate::error::{FedHelpError, Result};
use crate::losses::{weight_map, WeightMapParams};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

pub const MAX_SIDE: usize = 64;
pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationSpec {
    pub seed: u64,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub id_base: u64,
}

fn default_noise() -> f64 {
    0.35
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegDataset {
    /// `[N × H × W × 1]`.
    pub images: Tensor,
    pub masks: Vec<Vec<u8>>,
    pub d1: Vec<Vec<f64>>,
    pub d2: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub ids: Vec<u64>,
    pub height: usize,
    pub width: usize,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Images, flattened mask labels and flattened weights for rows `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>, Vec<f64>) {
        let q = self.pixels();
        let mut data = Vec::with_capacity(idx.len() * q);
        let mut labels = Vec::with_capacity(idx.len() * q);
        let mut weights = Vec::with_capacity(idx.len() * q);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * q..(i + 1) * q]);
            labels.extend(self.masks[i].iter().map(|&m| m as usize));
            weights.extend_from_slice(&self.weights[i]);
        }
        let x = Tensor::new(vec![idx.len(), self.height, self.width, 1], data)
            .expect("image size is consistent");
        (x, labels, weights)
    }

    pub fn subset(&self, idx: &[usize]) -> SegDataset {
        let (images, _, _) = self.batch(idx);
        let pick = |v: &Vec<Vec<f64>>| idx.iter().map(|&i| v[i].clone()).collect();
        SegDataset {
            images,
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            d1: pick(&self.d1),
            d2: pick(&self.d2),
            weights: pick(&self.weights),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            height: self.height,
            width: self.width,
        }
    }

    /// Recomputes every weight map with new parameters.
    pub fn reweight(&mut self, params: &WeightMapParams) -> Result<()> {
        for i in 0..self.len() {
            self.weights[i] = weight_map(&self.masks[i], &self.d1[i], &self.d2[i], params)?;
        }
        Ok(())
    }
}

/// Generates `size` images with 1 to 3 blobs each. Masks whose foreground
/// fraction falls outside `[0.05, 0.6]` are redrawn.
pub fn make_segmentation(spec: &SegmentationSpec, params: &WeightMapParams) -> Result<SegDataset> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 || h > MAX_SIDE || w > MAX_SIDE {
        return Err(FedHelpError::Data(format!(
            "image side must be in 1..={MAX_SIDE}, got {h}×{w}"
        )));
    }
    if h < 8 || w < 8 {
        return Err(FedHelpError::Data("images need at least 8×8 pixels".into()));
    }
    let mut rng = rng::rng_from(spec.seed, &[stream::SEGMENT]);
    let q = h * w;
    let mut images = Vec::with_capacity(spec.size * q);
    let mut out = SegDataset {
        images: Tensor::zeros(&[0]),
        masks: Vec::with_capacity(spec.size),
        d1: Vec::with_capacity(spec.size),
        d2: Vec::with_capacity(spec.size),
        weights: Vec::with_capacity(spec.size),
        ids: (0..spec.size as u64).map(|i| spec.id_base + i).collect(),
        height: h,
        width: w,
    };
    let side = h.min(w) as f64;
    for _ in 0..spec.size {
        let (field, mask) = loop {
            let blobs = rng.random_range(1..=3);
            let mut field = vec![0.0; q];
            for _ in 0..blobs {
                let cy = rng.random_range(1.0..h as f64 - 1.0);
                let cx = rng.random_range(1.0..w as f64 - 1.0);
                let r = rng.random_range(0.08 * side..0.2 * side);
                for (p, f) in field.iter_mut().enumerate() {
                    let (y, x) = ((p / w) as f64, (p % w) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    *f += (-d2 / (2.0 * r * r)).exp();
                }
            }
            let mask: Vec<u8> = field.iter().map(|&f| u8::from(f > 0.5)).collect();
            let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / q as f64;
            let (_, comps) = label_components(&mask, h, w);
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) && (1..=3).contains(&comps) {
                break (field, mask);
            }
        };
        let contrast = rng.random_range(0.6..1.4);
        let offset = rng.random_range(-0.3..0.3);
        images.extend(field.iter().map(|&f| {
            let n: f64 = StandardNormal.sample(&mut rng);
            contrast * f.min(1.0) + offset + spec.noise * n
        }));
        let (d1, d2) = distance_transforms(&mask, h, w)?;
        out.weights.push(weight_map(&mask, &d1, &d2, params)?);
        out.d1.push(d1);
        out.d2.push(d2);
        out.masks.push(mask);
    }
    out.images = Tensor::new(vec![spec.size, h, w, 1], images)?;
    Ok(out)
}
