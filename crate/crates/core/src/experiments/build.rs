//! Turns a resolved config into datasets, oracles and clients.

use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Task};
use crate::data::synth::PUBLIC_ID_OFFSET;
use crate::data::{
    make_classification, make_public_set, make_segmentation, partition, ClassificationSpec, ClientPlan,
    PartitionPlan, PublicSetSpec, Samples, SegmentationSpec,
};
use crate::error::Result;
use crate::federation::{ClientHandle, ClientKind, Mode};
use crate::model::{LargeClientPair, ModelSpec, Network, TrunkSpec};
use crate::optim::{fit_classifier, fit_segmenter, FitConfig};
use crate::oracle::OracleModel;
use crate::rng::{derive_seed, stream};

const KERNEL: usize = 3;

fn spec_for(cfg: &ExperimentConfig, widths: &[usize], classes: usize) -> ModelSpec {
    match cfg.task {
        Task::Classification => {
            let mut w = vec![cfg.data.dim];
            w.extend_from_slice(widths);
            w.push(classes);
            ModelSpec::mlp(&w)
        }
        Task::Segmentation => ModelSpec {
            trunk: TrunkSpec::Conv {
                in_channels: 1,
                channels: widths.to_vec(),
                kernel: KERNEL,
            },
            classes,
            public_classes: None,
        },
    }
}

/// Shared small architecture (surrogate and proxy), without a public head.
pub fn small_spec(cfg: &ExperimentConfig) -> ModelSpec {
    spec_for(cfg, cfg.models.small.as_deref().unwrap_or(&[]), cfg.data.classes)
}

pub fn large_spec(cfg: &ExperimentConfig) -> ModelSpec {
    spec_for(cfg, cfg.models.large.as_deref().unwrap_or(&[]), cfg.data.classes)
}

pub fn oracle_spec(cfg: &ExperimentConfig) -> ModelSpec {
    spec_for(cfg, cfg.models.oracle.as_deref().unwrap_or(&[]), cfg.public_classes())
}

/// Short hash of everything that determines the public set and oracles,
/// so a cache built for one setup is never reused by another.
pub fn oracle_fingerprint(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "seed": cfg.seed,
        "task": cfg.task,
        "data": cfg.data,
        "public": cfg.public,
        "oracle_train_size": cfg.oracles.train_size,
        "oracle_epochs": cfg.oracles.epochs,
        "oracle_model": cfg.models.oracle,
        "batch_size": cfg.training.batch_size,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    hex::encode(&digest[..4])
}

pub fn oracle_ids(cfg: &ExperimentConfig) -> Vec<String> {
    let fp = oracle_fingerprint(cfg);
    (0..cfg.num_apis()).map(|m| format!("oracle-{m}-{fp}")).collect()
}

fn public_spec(cfg: &ExperimentConfig, size: usize, sample_stream: u64) -> PublicSetSpec {
    PublicSetSpec {
        seed: cfg.seed,
        classes: cfg.public_classes(),
        size,
        shift: cfg.public.shift,
        dim: cfg.data.dim,
        spread: cfg.data.spread,
        modes: cfg.data.modes,
        sample_stream,
    }
}

fn public_seg_spec(cfg: &ExperimentConfig, size: usize, sample_stream: u64) -> SegmentationSpec {
    SegmentationSpec {
        seed: derive_seed(cfg.seed, &[stream::PUBLIC, sample_stream]),
        size,
        height: cfg.data.height,
        width: cfg.data.width,
        noise: cfg.public.noise,
        id_base: PUBLIC_ID_OFFSET + sample_stream * (1 << 32),
    }
}

/// The public set small clients are guided with.
pub fn build_public(cfg: &ExperimentConfig) -> Result<Samples> {
    Ok(match cfg.task {
        Task::Classification => make_public_set(&public_spec(cfg, cfg.public.size, 0))?.into(),
        Task::Segmentation => make_segmentation(&public_seg_spec(cfg, cfg.public.size, 0), &cfg.weight_map)?.into(),
    })
}

/// Frozen oracle models, each pre-trained on its own held-out public shard.
pub fn build_oracles(cfg: &ExperimentConfig) -> Result<Vec<OracleModel>> {
    let spec = oracle_spec(cfg);
    oracle_ids(cfg)
        .into_iter()
        .enumerate()
        .map(|(m, id)| {
            let seed = derive_seed(cfg.seed, &[stream::ORACLE, m as u64]);
            let mut net = Network::build(&spec, seed)?;
            let fit = FitConfig {
                epochs: cfg.oracles.epochs,
                batch_size: cfg.training.batch_size,
                lr: cfg.training.lr_large,
                momentum: cfg.training.momentum,
                seed,
            };
            let shard = 1 + m as u64;
            match cfg.task {
                Task::Classification => {
                    let data = make_public_set(&public_spec(cfg, cfg.oracles.train_size, shard))?;
                    fit_classifier(&mut net, &data, &fit)?;
                }
                Task::Segmentation => {
                    let data = make_segmentation(
                        &public_seg_spec(cfg, cfg.oracles.train_size, shard),
                        &cfg.weight_map,
                    )?;
                    fit_segmenter(&mut net, &data, &fit)?;
                }
            }
            Ok(OracleModel::new(id, net))
        })
        .collect()
}

/// Private train/test shards, one per configured client.
pub fn build_shards(cfg: &ExperimentConfig) -> Result<Vec<(Samples, Samples)>> {
    match cfg.task {
        Task::Classification => {
            let pool = make_classification(&ClassificationSpec {
                seed: cfg.seed,
                classes: cfg.data.classes,
                dim: cfg.data.dim,
                size: cfg.data.pool,
                spread: cfg.data.spread,
                modes: cfg.data.modes,
            })?;
            let plan = PartitionPlan {
                clients: cfg
                    .clients
                    .iter()
                    .map(|c| ClientPlan {
                        train: c.train,
                        test: c.test,
                        tilt: c.tilt,
                    })
                    .collect(),
            };
            Ok(partition(&pool, &plan, cfg.data.dirichlet_alpha, cfg.seed)?
                .into_iter()
                .map(|s| (s.train.into(), s.test.into()))
                .collect())
        }
        Task::Segmentation => {
            let mut id_base = 0;
            cfg.clients
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let n = c.train + c.test;
                    let ds = make_segmentation(
                        &SegmentationSpec {
                            seed: derive_seed(cfg.seed, &[stream::SEGMENT, i as u64]),
                            size: n,
                            height: cfg.data.height,
                            width: cfg.data.width,
                            noise: cfg.data.noise,
                            id_base,
                        },
                        &cfg.weight_map,
                    )?;
                    id_base += n as u64;
                    let train: Vec<usize> = (0..c.train).collect();
                    let test: Vec<usize> = (c.train..n).collect();
                    Ok((ds.subset(&train).into(), ds.subset(&test).into()))
                })
                .collect()
        }
    }
}

/// Clients with freshly initialized models. All shared small models
/// (surrogates and proxies) start from one common initialization; in
/// `fedavg` mode every client trains that small model.
pub fn build_clients(cfg: &ExperimentConfig) -> Result<Vec<ClientHandle>> {
    let guided = cfg.mode.guides_small();
    let mut small = small_spec(cfg);
    if guided {
        small = small.with_public_head(cfg.public_classes());
    }
    let base = Network::build(&small, derive_seed(cfg.seed, &[stream::INIT]))?;
    let shared = base.flatten_params();
    let large = large_spec(cfg);
    build_shards(cfg)?
        .into_iter()
        .zip(&cfg.clients)
        .enumerate()
        .map(|(id, ((train, test), c))| {
            if c.kind == ClientKind::Small || cfg.mode == Mode::Fedavg {
                return Ok(ClientHandle::small(id, base.clone(), train, test));
            }
            let mut pair = LargeClientPair::build(
                &large,
                &small,
                derive_seed(cfg.seed, &[stream::INIT, 1 + id as u64]),
            )?;
            pair.proxy.load_params(&shared)?;
            Ok(ClientHandle::large(id, pair, train, test))
        })
        .collect()
}
