//! SGD with momentum, plus a plain supervised fitting loop used to
//! pre-train oracle models.

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::data::{LabeledDataset, SegDataset};
use crate::error::Result;
use crate::losses;
use crate::model::Network;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((x, gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *x -= self.lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_from(seed, &[stream::SHUFFLE, epoch as u64]));
    idx
}

/// Minimizes mean cross-entropy of the private head on `data`.
pub fn fit_classifier(net: &mut Network, data: &LabeledDataset, cfg: &FitConfig) -> Result<()> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let xv = g.leaf(&x);
            let logits = net.forward_logits(&mut g, &bound, xv)?;
            let loss = losses::cross_entropy(&mut g, logits, &y)?;
            g.backward(loss)?;
            let grads = net.collect_grads(&g, &bound);
            opt.step(net.params_mut(), &grads);
        }
    }
    Ok(())
}

/// Minimizes the weighted per-pixel cross-entropy on `data`.
pub fn fit_segmenter(net: &mut Network, data: &SegDataset, cfg: &FitConfig) -> Result<()> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let (x, mask, weights) = data.batch(chunk);
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let xv = g.leaf(&x);
            let logits = net.forward_pixel_logits(&mut g, &bound, xv)?;
            let loss = losses::weighted_pixel_ce(&mut g, logits, &mask, &weights)?;
            g.backward(loss)?;
            let grads = net.collect_grads(&g, &bound);
            opt.step(net.params_mut(), &grads);
        }
    }
    Ok(())
}
