//! Per-round local training for small and large clients.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::autodiff::{Graph, Var};
use crate::data::{Batch, Samples};
use crate::error::{FedHelpError, Result};
use crate::losses::{self, ApiMixture, LossWeights};
use crate::model::{LargeClientPair, Network, ParamVector, SurrogateModel};
use crate::optim::Sgd;
use crate::oracle::OracleCache;
use crate::rng::{self, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Small,
    Large,
}

impl ClientKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientKind::Small => "small",
            ClientKind::Large => "large",
        }
    }
}

#[derive(Clone, Debug)]
pub enum ClientModel {
    /// Surrogate with private and public heads, plus this client's API
    /// mixture logits (created on first guided round, never uploaded).
    Small {
        model: SurrogateModel,
        mixture: Option<ApiMixture>,
    },
    Large(LargeClientPair),
}

/// Hyperparameters shared by every client in a run.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTraining {
    pub mode: Mode,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_small: f64,
    pub lr_large: f64,
    pub momentum: f64,
}

/// Public data and cached oracle answers available to small clients.
#[derive(Clone, Copy, Debug)]
pub struct Guidance<'a> {
    pub public: &'a Samples,
    /// `None` (or a cache with zero oracles) trains on public labels only.
    pub cache: Option<&'a OracleCache>,
}

/// Mean training-loss components over a round's steps. Terms a client
/// does not use stay at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub guidance: f64,
    pub forward_kd: f64,
    pub ranking_kd: f64,
}

impl LossComponents {
    fn add(&mut self, other: LossComponents) {
        self.ce += other.ce;
        self.guidance += other.guidance;
        self.forward_kd += other.forward_kd;
        self.ranking_kd += other.ranking_kd;
    }

    fn scaled(self, s: f64) -> Self {
        LossComponents {
            ce: self.ce * s,
            guidance: self.guidance * s,
            forward_kd: self.forward_kd * s,
            ranking_kd: self.ranking_kd * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.guidance, self.forward_kd, self.ranking_kd]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    /// Trunk and private head of the surrogate or proxy.
    pub upload: ParamVector,
    pub losses: LossComponents,
}

/// A participant: its model(s), private train/test shards and optimizer.
#[derive(Clone, Debug)]
pub struct ClientHandle {
    pub id: usize,
    pub model: ClientModel,
    pub train: Samples,
    pub test: Samples,
    opt: Sgd,
    mixture_opt: Sgd,
}

impl ClientHandle {
    pub fn small(id: usize, model: SurrogateModel, train: Samples, test: Samples) -> Self {
        Self::with_model(id, ClientModel::Small { model, mixture: None }, train, test)
    }

    pub fn large(id: usize, pair: LargeClientPair, train: Samples, test: Samples) -> Self {
        Self::with_model(id, ClientModel::Large(pair), train, test)
    }

    fn with_model(id: usize, model: ClientModel, train: Samples, test: Samples) -> Self {
        ClientHandle {
            id,
            model,
            train,
            test,
            opt: Sgd::new(0.0, 0.0),
            mixture_opt: Sgd::new(0.0, 0.0),
        }
    }

    pub fn kind(&self) -> ClientKind {
        match self.model {
            ClientModel::Small { .. } => ClientKind::Small,
            ClientModel::Large(_) => ClientKind::Large,
        }
    }

    /// The model whose parameters are uploaded.
    pub fn shared_network(&self) -> &Network {
        match &self.model {
            ClientModel::Small { model, .. } => model,
            ClientModel::Large(pair) => &pair.proxy,
        }
    }

    /// The model the client actually serves predictions with.
    pub fn eval_network(&self) -> &Network {
        match &self.model {
            ClientModel::Small { model, .. } => model,
            ClientModel::Large(pair) => &pair.large,
        }
    }

    pub fn mixture(&self) -> Option<&ApiMixture> {
        match &self.model {
            ClientModel::Small { mixture, .. } => mixture.as_ref(),
            ClientModel::Large(_) => None,
        }
    }

    /// One round of local training; dispatches on the client kind.
    pub fn local_round(
        &mut self,
        round: usize,
        global: Option<&ParamVector>,
        guidance: Option<Guidance<'_>>,
        cfg: &LocalTraining,
        run_seed: u64,
    ) -> Result<LocalUpdate> {
        match self.kind() {
            ClientKind::Small => small_client_round(self, round, global, guidance, cfg, run_seed),
            ClientKind::Large => large_client_round(self, round, global, cfg, run_seed),
        }
    }
}

/// Private loss on a batch: plain CE, or weight-map CE for segmentation.
fn private_loss(g: &mut Graph, logits: Var, batch: &Batch) -> Result<Var> {
    match &batch.weights {
        None => losses::cross_entropy(g, logits, &batch.labels),
        Some(w) => losses::weighted_pixel_ce(g, logits, &batch.labels, w),
    }
}

/// Shuffled private-data order for one local epoch.
pub fn epoch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Per-client, per-round random stream.
pub fn client_rng(run_seed: u64, client: usize, round: usize) -> Rng {
    rng::rng_from(run_seed, &[stream::CLIENT, client as u64, round as u64])
}

/// Endless shuffled pass over the public set, one minibatch at a time.
struct PublicCursor {
    order: Vec<usize>,
    pos: usize,
}

impl PublicCursor {
    fn next(&mut self, n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let take = batch.min(n);
        if self.order.is_empty() || self.pos + take > self.order.len() {
            self.order = epoch_order(n, rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        out
    }
}

/// Small-client update: start from the global model when one exists, then
/// `E` epochs of `J = L + λ_J·R`, one private and one public minibatch per
/// step. Returns the trunk and private head.
pub fn small_client_round(
    client: &mut ClientHandle,
    round: usize,
    global: Option<&ParamVector>,
    guidance: Option<Guidance<'_>>,
    cfg: &LocalTraining,
    run_seed: u64,
) -> Result<LocalUpdate> {
    if client.train.is_empty() {
        return Err(FedHelpError::Data(format!("client {} has no private data", client.id)));
    }
    let ClientModel::Small { model, mixture } = &mut client.model else {
        return Err(FedHelpError::InvalidArgument("small-client update on a large client".into()));
    };
    if let Some(w) = global {
        model.load_params(w)?;
    }
    let guidance = guidance.filter(|_| cfg.mode.guides_small() && cfg.loss.lambda_j > 0.0);
    let oracle = guidance
        .and_then(|gd| gd.cache)
        .filter(|c| c.num_apis() > 0 && cfg.loss.lambda_r > 0.0);
    if let (Some(gd), Some(cache)) = (guidance, oracle) {
        let fresh = mixture
            .as_ref()
            .is_none_or(|m| m.logits.shape() != [gd.public.len(), cache.num_apis()]);
        if fresh {
            *mixture = Some(ApiMixture::new(gd.public.len(), cache.num_apis()));
        }
    }

    client.opt = Sgd::new(cfg.lr_small, cfg.momentum);
    client.mixture_opt = Sgd::new(cfg.lr_small, cfg.momentum);
    let mut rng = client_rng(run_seed, client.id, round);
    let mut cursor = PublicCursor {
        order: Vec::new(),
        pos: 0,
    };
    let mut sum = LossComponents::default();
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        for chunk in epoch_order(client.train.len(), &mut rng).chunks(cfg.batch_size) {
            let batch = client.train.batch(chunk);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.leaf(&batch.x);
            let logits = model.forward_logits(&mut g, &bound, x)?;
            let ce = private_loss(&mut g, logits, &batch)?;
            let mut parts = LossComponents {
                ce: g.scalar_value(ce),
                ..Default::default()
            };
            let mut loss = ce;
            let mut alpha_leaf = None;
            if let Some(gd) = guidance {
                let idx = cursor.next(gd.public.len(), cfg.batch_size, &mut rng);
                let pb = gd.public.batch(&idx);
                let px = g.leaf(&pb.x);
                let f = model.features(&mut g, &bound, px)?;
                let pl = model.public_logits(&mut g, &bound, f)?;
                let (dists, alpha, lambda_r) = match (oracle, mixture.as_ref()) {
                    (Some(cache), Some(mix)) => {
                        let leaf = g.param(&mix.logits);
                        alpha_leaf = Some(leaf);
                        let rows = g.index_rows(leaf, &idx)?;
                        (Some(cache.get_distributions(&pb.ids)?), Some(rows), cfg.loss.lambda_r)
                    }
                    _ => (None, None, 0.0),
                };
                let r = match &pb.weights {
                    None => losses::guidance_loss(&mut g, pl, &pb.labels, dists.as_ref(), alpha, lambda_r)?,
                    Some(w) => losses::pixel_guidance_loss(
                        &mut g,
                        pl,
                        &pb.labels,
                        w,
                        dists.as_ref(),
                        alpha,
                        lambda_r,
                    )?,
                };
                parts.guidance = g.scalar_value(r);
                loss = losses::joint_small_loss(&mut g, ce, r, cfg.loss.lambda_j)?;
            }
            g.backward(loss)?;
            let grads = model.collect_grads(&g, &bound);
            client.opt.step(model.params_mut(), &grads);
            if let (Some(leaf), Some(mix)) = (alpha_leaf, mixture.as_mut()) {
                let grad = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; mix.logits.numel()]);
                client.mixture_opt.step(vec![&mut mix.logits], &[grad]);
            }
            sum.add(parts);
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        upload: model.flatten_params(),
        losses: sum.scaled(1.0 / steps.max(1) as f64),
    })
}

/// Large-client update: refresh only the proxy from the global model, then
/// `E` epochs of `G = L + λ_F·→KD + λ_B·←KD`, one optimizer step over both
/// models per minibatch. Returns the proxy's trunk and head.
pub fn large_client_round(
    client: &mut ClientHandle,
    round: usize,
    global: Option<&ParamVector>,
    cfg: &LocalTraining,
    run_seed: u64,
) -> Result<LocalUpdate> {
    if client.train.is_empty() {
        return Err(FedHelpError::Data(format!("client {} has no private data", client.id)));
    }
    let ClientModel::Large(pair) = &mut client.model else {
        return Err(FedHelpError::InvalidArgument("large-client update on a small client".into()));
    };
    if let Some(w) = global {
        pair.proxy.load_params(w)?;
    }
    let distill = cfg.mode.distills_large();
    let use_f = distill && cfg.loss.lambda_f > 0.0;
    let use_b = distill && cfg.loss.lambda_b > 0.0;
    let symmetric = cfg.mode == Mode::FedhelpS;

    client.opt = Sgd::new(cfg.lr_large, cfg.momentum);
    let mut rng = client_rng(run_seed, client.id, round);
    let mut sum = LossComponents::default();
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        for chunk in epoch_order(client.train.len(), &mut rng).chunks(cfg.batch_size) {
            let batch = client.train.batch(chunk);
            let mut g = Graph::new();
            let bl = pair.large.bind(&mut g, true);
            let x = g.leaf(&batch.x);
            let ll = pair.large.forward_logits(&mut g, &bl, x)?;
            let ce = private_loss(&mut g, ll, &batch)?;
            let mut parts = LossComponents {
                ce: g.scalar_value(ce),
                ..Default::default()
            };
            let (mut fwd, mut bwd, mut bp) = (None, None, None);
            if use_f || use_b {
                let b = pair.proxy.bind(&mut g, true);
                let pl = pair.proxy.forward_logits(&mut g, &b, x)?;
                bp = Some(b);
                if use_f {
                    let t = losses::forward_kd(&mut g, ll, pl)?;
                    parts.forward_kd = g.scalar_value(t);
                    fwd = Some(t);
                }
                if use_b {
                    let t = if symmetric {
                        losses::forward_kd(&mut g, pl, ll)?
                    } else {
                        losses::ranking_kd_from_proxy(&mut g, ll, pl, cfg.loss.omega_size)?
                    };
                    parts.ranking_kd = g.scalar_value(t);
                    bwd = Some(t);
                }
            }
            let loss = losses::large_client_loss(&mut g, ce, fwd, bwd, cfg.loss.lambda_f, cfg.loss.lambda_b)?;
            g.backward(loss)?;
            let mut grads = pair.large.collect_grads(&g, &bl);
            match &bp {
                Some(b) => grads.extend(pair.proxy.collect_grads(&g, b)),
                None => grads.extend(pair.proxy.params().iter().map(|t| vec![0.0; t.numel()])),
            }
            let params = pair
                .large
                .params_mut()
                .into_iter()
                .chain(pair.proxy.params_mut())
                .collect();
            client.opt.step(params, &grads);
            sum.add(parts);
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        upload: pair.proxy.flatten_params(),
        losses: sum.scaled(1.0 / steps.max(1) as f64),
    })
}
