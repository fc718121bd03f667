//! Accuracy and Dice evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{FedHelpError, Result};
use crate::model::Network;

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of correct argmax predictions (per pixel for segmentation).
    pub accuracy: f64,
    /// Mean per-image foreground Dice; `None` for classification.
    pub dice: Option<f64>,
}

/// `2|P∩G| / (|P|+|G|)` over foreground pixels, 1.0 when both are empty.
pub fn dice(pred: &[usize], truth: &[usize]) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

pub fn evaluate(model: &Network, data: &Samples) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(FedHelpError::Data("evaluation set is empty".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut dice_sum = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let p = model.predict(&batch.x)?.argmax_last();
        if data.is_segmentation() {
            let q = p.len() / chunk.len();
            for (pi, ti) in p.chunks(q).zip(batch.labels.chunks(q)) {
                dice_sum += dice(pi, ti);
            }
        }
        pred.extend(p);
        truth.extend(batch.labels);
    }
    Ok(EvalMetrics {
        accuracy: accuracy(&pred, &truth),
        dice: data
            .is_segmentation()
            .then(|| dice_sum / data.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = [0, 1, 1, 0];
        assert_eq!(accuracy(&t, &t), 1.0);
        assert_eq!(dice(&t, &t), 1.0);
    }

    #[test]
    fn dice_edge_cases() {
        assert_eq!(dice(&[0, 0], &[0, 0]), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1]), 0.0);
        assert!((dice(&[1, 1], &[1, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_hit_class_zero() {
        use crate::data::LabeledDataset;
        use crate::model::ModelSpec;
        use crate::tensor::Tensor;
        let mut net = Network::build(&ModelSpec::mlp(&[2, 2]), 0).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let ds = LabeledDataset::new(Tensor::full(&[100, 2], 1.0), labels, (0..100).collect(), 2).unwrap();
        let m = evaluate(&net, &Samples::Labeled(ds)).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.dice, None);
    }
}
