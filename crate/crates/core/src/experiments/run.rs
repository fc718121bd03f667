//! Executes a config end to end and writes run artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::build::{build_clients, build_oracles, build_public, oracle_ids, large_spec, small_spec};
use super::config::{ExperimentConfig, Task};
use crate::error::{FedHelpError, Result};
use crate::federation::{
    metrics_csv, run_federation, ClientHandle, ClientKind, ClientSummary, FederationConfig, FederationState,
    Guidance, LocalTraining, Mode,
};
use crate::oracle::{OracleCache, OracleModel};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CACHE_FILE: &str = "oracle_cache.fhoc";
pub const ERROR_FILE: &str = "error.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub parallel: bool,
    /// Oracle cache location; loaded when present, written after warm-up.
    pub cache_path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
}

impl Average {
    fn of<'a>(items: impl Iterator<Item = &'a ClientSummary> + Clone) -> Option<Self> {
        let n = items.clone().count();
        (n > 0).then(|| Average {
            accuracy: items.clone().map(|c| c.accuracy).sum::<f64>() / n as f64,
            dice: items.map(|c| c.dice).sum::<Option<f64>>().map(|d| d / n as f64),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadAccount {
    pub client_id: usize,
    pub kind: ClientKind,
    /// Bytes sent per round.
    pub upload_bytes: usize,
    /// Size of the model the client trains and serves, in bytes.
    pub local_model_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub task: Task,
    pub seed: u64,
    pub rounds: usize,
    pub stopped_early: bool,
    pub aggregation_events: usize,
    /// Raw oracle-model evaluations performed by this process.
    pub oracle_evaluations: u64,
    pub clients: Vec<ClientSummary>,
    #[serde(rename = "Client Average")]
    pub client_average: Average,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub small_client_average: Option<Average>,
    pub communication: Vec<UploadAccount>,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
}

/// Everything a run produced, before anything touches the disk.
#[derive(Debug)]
pub struct RunOutcome {
    pub state: FederationState,
    pub clients: Vec<ClientHandle>,
    pub summary: RunSummary,
    pub metrics_csv: String,
}

/// Obtains the oracle cache for `cfg`'s public set. A cache file at `path`
/// built by the same oracles is reused, and only the public data it lacks
/// are evaluated; a file from different oracles is replaced. Returns the
/// cache and the number of raw oracle evaluations spent.
pub fn prepare_cache(
    cfg: &ExperimentConfig,
    public: &crate::data::Samples,
    path: Option<&Path>,
) -> Result<(OracleCache, u64)> {
    let ids = oracle_ids(cfg);
    let existing = match path.filter(|p| p.exists()) {
        Some(p) => Some(OracleCache::load(p)?).filter(|c| c.oracle_ids() == ids.as_slice()),
        None => None,
    };
    if let Some(cache) = &existing {
        if public.ids().iter().all(|&id| cache.entry(id, 0).is_ok()) {
            return Ok((existing.unwrap(), 0));
        }
    }
    let oracles = build_oracles(cfg)?;
    let mut cache =
        existing.unwrap_or_else(|| OracleCache::empty(ids, cfg.public_classes(), rows_per_datum(cfg)));
    cache.fill(&oracles, public.ids(), public.inputs())?;
    if let Some(p) = path {
        cache.save(p)?;
    }
    Ok((cache, oracles.iter().map(OracleModel::evaluations).sum()))
}

fn rows_per_datum(cfg: &ExperimentConfig) -> usize {
    match cfg.task {
        Task::Classification => 1,
        Task::Segmentation => cfg.data.height * cfg.data.width,
    }
}

pub fn federation_config(cfg: &ExperimentConfig, parallel: bool) -> FederationConfig {
    let t = &cfg.training;
    FederationConfig {
        local: LocalTraining {
            mode: cfg.mode,
            loss: cfg.loss_weights(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_small: t.lr_small,
            lr_large: t.lr_large,
            momentum: t.momentum,
        },
        seed: cfg.seed,
        max_rounds: t.max_rounds,
        patience: t.patience,
        epsilon: t.epsilon,
        uniform_weights: t.uniform_weights,
        parallel,
    }
}

/// Builds everything and runs the federation in memory.
pub fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let mut clients = build_clients(cfg)?;
    let guided = cfg.mode.guides_small() && clients.iter().any(|c| c.kind() == ClientKind::Small);
    let public = if guided { Some(build_public(cfg)?) } else { None };
    let (cache, evaluations) = match &public {
        Some(p) if cfg.num_apis() > 0 => {
            let (c, n) = prepare_cache(cfg, p, opts.cache_path.as_deref())?;
            (Some(c), n)
        }
        _ => (None, 0),
    };
    let guidance = public.as_ref().map(|p| Guidance {
        public: p,
        cache: cache.as_ref(),
    });
    let state = run_federation(&mut clients, guidance, &federation_config(cfg, opts.parallel))?;
    let summary = summarize(cfg, &state, &clients, evaluations);
    Ok(RunOutcome {
        metrics_csv: metrics_csv(&state.history),
        state,
        clients,
        summary,
    })
}

fn summarize(cfg: &ExperimentConfig, state: &FederationState, clients: &[ClientHandle], evals: u64) -> RunSummary {
    let finals = state.final_metrics(clients);
    let large_bytes = large_spec(cfg).upload_param_count() * 8;
    let communication = clients
        .iter()
        .map(|c| UploadAccount {
            client_id: c.id,
            kind: c.kind(),
            upload_bytes: if cfg.mode.aggregates() {
                c.shared_network().flatten_params().upload_bytes()
            } else {
                0
            },
            local_model_bytes: match c.kind() {
                ClientKind::Large => large_bytes,
                ClientKind::Small => small_spec(cfg).upload_param_count() * 8,
            },
        })
        .collect();
    RunSummary {
        mode: cfg.mode,
        task: cfg.task,
        seed: cfg.seed,
        rounds: state.round,
        stopped_early: state.stopped_early,
        aggregation_events: state.aggregation_events(),
        oracle_evaluations: evals,
        client_average: Average::of(finals.iter()).expect("at least one client"),
        small_client_average: Average::of(finals.iter().filter(|c| is_small_slot(cfg, c.client_id))),
        clients: finals,
        communication,
        artifacts: Vec::new(),
    }
}

/// Whether the configured plan marks this client as small (in `fedavg`
/// every client runs the small model, but the plan still says who is who).
fn is_small_slot(cfg: &ExperimentConfig, id: usize) -> bool {
    cfg.clients.get(id).is_some_and(|c| c.kind == ClientKind::Small)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs `cfg` and writes the metrics CSV, resolved config and summary
/// (listing every other artifact with its hash) into `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let outcome = execute(cfg, opts)?;
    let config_text = cfg.canonical_json();
    let mut summary = outcome.summary;
    for (file, body) in [(METRICS_FILE, outcome.metrics_csv.as_bytes()), (CONFIG_FILE, config_text.as_bytes())] {
        std::fs::write(out.join(file), body)?;
        summary.artifacts.push(Artifact {
            file: file.to_string(),
            sha256: sha256_hex(body),
        });
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    if !path.is_file() {
        return Err(FedHelpError::MissingRun(dir.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Structured error document for failed runs.
pub fn error_json(e: &FedHelpError) -> String {
    let kind = format!("{e:?}");
    let kind = kind.split(['(', ' ', '{']).next().unwrap_or("Error").to_string();
    serde_json::to_string_pretty(&serde_json::json!({
        "status": "error",
        "kind": kind,
        "message": e.to_string(),
    }))
    .expect("error serializes")
}
