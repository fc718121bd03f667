//! The round loop: local updates, upload of the small shared models,
//! weighted averaging and redistribution, with early stopping.

pub mod aggregate;
pub mod client;
pub mod eval;

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use aggregate::{fedavg_aggregate, Upload};
pub use client::{
    large_client_round, small_client_round, ClientHandle, ClientKind, ClientModel, Guidance,
    LocalTraining, LocalUpdate, LossComponents,
};
pub use eval::{evaluate, EvalMetrics};

use crate::error::{FedHelpError, Result};
use crate::model::ParamVector;

/// Training protocol variants, including the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Oracle guidance for small clients, forward + ranking distillation for
    /// large ones.
    #[default]
    Fedhelp,
    /// Every client trains the small model with plain CE; all are averaged.
    Fedavg,
    /// No communication at all.
    Local,
    /// Public-data guidance without oracles.
    FedhelpMinus,
    /// Guidance from a single oracle.
    FedhelpOneApi,
    /// Forward distillation only.
    FedhelpF,
    /// Ranking distillation only.
    FedhelpB,
    /// KL in both directions instead of ranking distillation.
    FedhelpS,
}

pub const ALL_MODES: [Mode; 8] = [
    Mode::Fedhelp,
    Mode::Fedavg,
    Mode::Local,
    Mode::FedhelpMinus,
    Mode::FedhelpOneApi,
    Mode::FedhelpF,
    Mode::FedhelpB,
    Mode::FedhelpS,
];

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fedhelp => "fedhelp",
            Mode::Fedavg => "fedavg",
            Mode::Local => "local",
            Mode::FedhelpMinus => "fedhelp_minus",
            Mode::FedhelpOneApi => "fedhelp_one_api",
            Mode::FedhelpF => "fedhelp_f",
            Mode::FedhelpB => "fedhelp_b",
            Mode::FedhelpS => "fedhelp_s",
        }
    }

    pub fn aggregates(self) -> bool {
        self != Mode::Local
    }

    /// Whether small clients train on public data.
    pub fn guides_small(self) -> bool {
        !matches!(self, Mode::Local | Mode::Fedavg)
    }

    /// Whether large clients distill with their proxy.
    pub fn distills_large(self) -> bool {
        !matches!(self, Mode::Local | Mode::Fedavg)
    }
}

impl FromStr for Mode {
    type Err = FedHelpError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_MODES
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FedHelpError::config("mode", format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub local: LocalTraining,
    pub seed: u64,
    pub max_rounds: usize,
    pub patience: usize,
    pub epsilon: f64,
    /// Average uploads with equal weights instead of by dataset size.
    pub uniform_weights: bool,
    pub parallel: bool,
}

/// Final-metric window: the mean over this many latest evaluations.
pub const REPORT_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client_id: usize,
    pub kind: ClientKind,
    pub losses: LossComponents,
    pub metrics: EvalMetrics,
    /// Bytes sent to the server this round (0 when nothing is uploaded).
    pub upload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundReport>,
    /// SHA-256 of the aggregated parameters, when aggregation happened.
    pub checksum: Option<String>,
}

impl RoundReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.clients.iter().map(|c| c.metrics.accuracy).sum::<f64>() / self.clients.len().max(1) as f64
    }

    /// The early-stopping score: mean Dice for segmentation, mean accuracy
    /// otherwise.
    pub fn score(&self) -> f64 {
        let dice: Option<f64> = self.clients.iter().map(|c| c.metrics.dice).sum();
        match dice {
            Some(d) => d / self.clients.len().max(1) as f64,
            None => self.mean_accuracy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub kind: ClientKind,
    pub train_size: usize,
    pub accuracy: f64,
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationState {
    pub round: usize,
    pub global: Option<ParamVector>,
    pub history: Vec<RoundReport>,
    pub best_score: f64,
    pub stale_rounds: usize,
    pub stopped_early: bool,
}

impl FederationState {
    fn new() -> Self {
        FederationState {
            round: 0,
            global: None,
            history: Vec::new(),
            best_score: f64::NEG_INFINITY,
            stale_rounds: 0,
            stopped_early: false,
        }
    }

    pub fn aggregation_events(&self) -> usize {
        self.history.iter().filter(|r| r.checksum.is_some()).count()
    }

    /// Per-client mean over the last [`REPORT_WINDOW`] evaluations.
    pub fn final_metrics(&self, clients: &[ClientHandle]) -> Vec<ClientSummary> {
        let start = self.history.len().saturating_sub(REPORT_WINDOW);
        let window = &self.history[start..];
        let n = window.len().max(1) as f64;
        clients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let acc = window.iter().map(|r| r.clients[i].metrics.accuracy).sum::<f64>() / n;
                let dice = window
                    .iter()
                    .map(|r| r.clients[i].metrics.dice)
                    .sum::<Option<f64>>()
                    .map(|d| d / n);
                ClientSummary {
                    client_id: c.id,
                    kind: c.kind(),
                    train_size: c.train.len(),
                    accuracy: acc,
                    dice,
                }
            })
            .collect()
    }
}

pub fn param_checksum(pv: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in &pv.values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs rounds until `max_rounds` or early stop. Every client trains in
/// every round; uploads are averaged in ascending client id, so serial and
/// parallel execution give identical results.
pub fn run_federation(
    clients: &mut [ClientHandle],
    guidance: Option<Guidance<'_>>,
    cfg: &FederationConfig,
) -> Result<FederationState> {
    if clients.is_empty() {
        return Err(FedHelpError::config("clients", "at least one client is required"));
    }
    let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(FedHelpError::config("clients", "client ids must be unique"));
    }
    let mut state = FederationState::new();
    for round in 1..=cfg.max_rounds {
        let report = run_round(clients, &mut state, round, guidance, cfg)?;
        let score = report.score();
        state.round = round;
        state.history.push(report);
        if score > state.best_score + cfg.epsilon {
            state.best_score = score;
            state.stale_rounds = 0;
        } else {
            state.stale_rounds += 1;
            if state.stale_rounds >= cfg.patience {
                state.stopped_early = true;
                break;
            }
        }
    }
    Ok(state)
}

fn run_round(
    clients: &mut [ClientHandle],
    state: &mut FederationState,
    round: usize,
    guidance: Option<Guidance<'_>>,
    cfg: &FederationConfig,
) -> Result<RoundReport> {
    let global = state.global.as_ref().filter(|_| cfg.local.mode.aggregates());
    let step = |c: &mut ClientHandle| -> Result<(LocalUpdate, EvalMetrics)> {
        let id = c.id;
        let wrap = |e| FedHelpError::Round {
            round,
            client: id,
            source: Box::new(e),
        };
        let update = c
            .local_round(round, global, guidance, &cfg.local, cfg.seed)
            .map_err(wrap)?;
        let metrics = evaluate(c.eval_network(), &c.test).map_err(wrap)?;
        Ok((update, metrics))
    };
    let results: Vec<Result<(LocalUpdate, EvalMetrics)>> = if cfg.parallel {
        clients.par_iter_mut().map(step).collect()
    } else {
        clients.iter_mut().map(step).collect()
    };

    let mut reports = Vec::with_capacity(clients.len());
    let mut uploads = Vec::with_capacity(clients.len());
    for (c, r) in clients.iter().zip(results) {
        let (update, metrics) = r?;
        if !update.losses.is_finite() {
            return Err(FedHelpError::Round {
                round,
                client: c.id,
                source: Box::new(FedHelpError::InvalidArgument("non-finite training loss".into())),
            });
        }
        let aggregates = cfg.local.mode.aggregates();
        reports.push(ClientRoundReport {
            client_id: c.id,
            kind: c.kind(),
            losses: update.losses,
            metrics,
            upload_bytes: if aggregates { update.upload.upload_bytes() } else { 0 },
        });
        if aggregates {
            uploads.push(Upload {
                client_id: c.id,
                weight: if cfg.uniform_weights { 1 } else { c.train.len() as u64 },
                params: update.upload,
            });
        }
    }
    let checksum = if uploads.is_empty() {
        None
    } else {
        let g = fedavg_aggregate(&uploads)
            .map_err(|e| FedHelpError::Aggregation(format!("round {round}: {e}")))?;
        let sum = param_checksum(&g);
        state.global = Some(g);
        Some(sum)
    };
    Ok(RoundReport {
        round,
        clients: reports,
        checksum,
    })
}

pub const METRICS_HEADER: &str = "round,client_id,kind,loss_ce,loss_guidance,loss_fkd,loss_rkd,acc,dice";

/// One row per client per round. Numbers use the shortest exact decimal
/// form, so equal runs give equal bytes.
pub fn metrics_csv(history: &[RoundReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        for c in &r.clients {
            let dice = c.metrics.dice.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                c.client_id,
                c.kind.as_str(),
                c.losses.ce,
                c.losses.guidance,
                c.losses.forward_kd,
                c.losses.ranking_kd,
                c.metrics.accuracy,
                dice
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_round_trip_through_strings() {
        for m in ALL_MODES {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("fedprox".parse::<Mode>().is_err());
    }
}
