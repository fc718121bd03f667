//! Non-IID client partitioning with Dirichlet label skew.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use crate::error::{FedHelpError, Result};
use crate::rng::{self, stream, Rng};

/// Train/test sizes of the six Fed-ISIC19 clients, largest first.
pub const ISIC19_TRAIN: [usize; 6] = [9930, 3163, 2690, 655, 351, 180];
pub const ISIC19_TEST: [usize; 6] = [2483, 791, 673, 164, 88, 45];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientPlan {
    pub train: usize,
    pub test: usize,
    /// Per-client Dirichlet concentration; falls back to the plan-wide value.
    #[serde(default)]
    pub tilt: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub clients: Vec<ClientPlan>,
}

/// Splits `total` proportionally to `weights` with largest-remainder rounding.
pub fn proportional_sizes(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| w as f64 * total as f64 / sum as f64)
        .collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - sizes.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        sizes[i] += 1;
    }
    sizes
}

impl PartitionPlan {
    /// Six clients with the Fed-ISIC19 train proportions scaled to
    /// `total_train`; test sets keep the same proportions but never drop
    /// below `min_test`.
    pub fn isic19_ratios(total_train: usize, min_test: usize) -> Self {
        let train = proportional_sizes(&ISIC19_TRAIN, total_train);
        let test_total = ISIC19_TEST.iter().sum::<usize>() * total_train / ISIC19_TRAIN.iter().sum::<usize>();
        let test = proportional_sizes(&ISIC19_TEST, test_total);
        PartitionPlan {
            clients: train
                .into_iter()
                .zip(test)
                .map(|(train, test)| ClientPlan {
                    train,
                    test: test.max(min_test),
                    tilt: None,
                })
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(|c| c.train + c.test).sum()
    }

    pub fn validate(&self, available: usize) -> Result<()> {
        if self.clients.is_empty() {
            return Err(FedHelpError::Data("partition plan has no clients".into()));
        }
        if let Some(i) = self.clients.iter().position(|c| c.train == 0) {
            return Err(FedHelpError::Data(format!("client {i} has an empty training set")));
        }
        if self.total() > available {
            return Err(FedHelpError::Data(format!(
                "plan needs {} samples, dataset has {available}",
                self.total()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn dirichlet(rng: &mut Rng, k: usize, alpha: f64) -> Vec<f64> {
    if !alpha.is_finite() {
        return vec![1.0 / k as f64; k];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Draws `n` items following class proportions `q` from per-class pools,
/// topping up from the fullest remaining pools when a class runs dry.
fn draw(pools: &mut [Vec<usize>], q: &[f64], n: usize) -> Result<Vec<usize>> {
    let mut want = vec![0usize; q.len()];
    let exact: Vec<f64> = q.iter().map(|p| p * n as f64).collect();
    for (w, e) in want.iter_mut().zip(&exact) {
        *w = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - want.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        want[c] += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut deficit = 0;
    for (c, &w) in want.iter().enumerate() {
        let take = w.min(pools[c].len());
        deficit += w - take;
        let at = pools[c].len() - take;
        out.extend(pools[c].drain(at..));
    }
    while deficit > 0 {
        let c = (0..pools.len())
            .max_by(|&a, &b| pools[a].len().cmp(&pools[b].len()).then(b.cmp(&a)))
            .expect("at least one class");
        let Some(i) = pools[c].pop() else {
            return Err(FedHelpError::Data("dataset exhausted while partitioning".into()));
        };
        out.push(i);
        deficit -= 1;
    }
    Ok(out)
}

/// Disjoint train/test shards per client. Each client draws its class
/// proportions from `Dirichlet(alpha)` (`alpha = ∞` gives the global mix)
/// and uses them for both its train and test shard.
pub fn partition(
    ds: &LabeledDataset,
    plan: &PartitionPlan,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    plan.validate(ds.len())?;
    if !(alpha > 0.0) {
        return Err(FedHelpError::Data("dirichlet alpha must be positive".into()));
    }
    let mut rng = rng::rng_from(seed, &[stream::PARTITION]);
    let k = ds.num_classes;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in pools.iter_mut() {
        p.shuffle(&mut rng);
    }
    let global: Vec<f64> = pools.iter().map(|p| p.len() as f64 / ds.len() as f64).collect();

    let mut shards = Vec::with_capacity(plan.clients.len());
    for client in &plan.clients {
        let a = client.tilt.unwrap_or(alpha);
        let q = if a.is_finite() {
            dirichlet(&mut rng, k, a)
        } else {
            global.clone()
        };
        let mut train = draw(&mut pools, &q, client.train)?;
        let mut test = draw(&mut pools, &q, client.test)?;
        train.sort_unstable();
        test.sort_unstable();
        shards.push(ClientShard {
            train: ds.subset(&train),
            test: ds.subset(&test),
        });
    }
    Ok(shards)
}
