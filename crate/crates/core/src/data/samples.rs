//! A task-agnostic view over classification and segmentation datasets.

use super::{LabeledDataset, SegDataset};
use crate::tensor::Tensor;

/// One minibatch. `weights` holds per-pixel loss weights for segmentation
/// and is `None` for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub weights: Option<Vec<f64>>,
    pub ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Labeled(LabeledDataset),
    Seg(SegDataset),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Labeled(d) => d.len(),
            Samples::Seg(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, Samples::Seg(_))
    }

    pub fn ids(&self) -> &[u64] {
        match self {
            Samples::Labeled(d) => &d.ids,
            Samples::Seg(d) => &d.ids,
        }
    }

    /// All inputs stacked along the first axis.
    pub fn inputs(&self) -> &Tensor {
        match self {
            Samples::Labeled(d) => &d.features,
            Samples::Seg(d) => &d.images,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let ids = idx.iter().map(|&i| self.ids()[i]).collect();
        match self {
            Samples::Labeled(d) => {
                let (x, labels) = d.batch(idx);
                Batch { x, labels, weights: None, ids }
            }
            Samples::Seg(d) => {
                let (x, labels, w) = d.batch(idx);
                Batch { x, labels, weights: Some(w), ids }
            }
        }
    }
}

impl From<LabeledDataset> for Samples {
    fn from(d: LabeledDataset) -> Self {
        Samples::Labeled(d)
    }
}

impl From<SegDataset> for Samples {
    fn from(d: SegDataset) -> Self {
        Samples::Seg(d)
    }
}
