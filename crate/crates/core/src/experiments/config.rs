//! Declarative experiment description with strict parsing, mode-dependent
//! defaults and a canonical serialized form.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::presets;
use crate::data::partition::{proportional_sizes, ISIC19_TEST, ISIC19_TRAIN};
use crate::error::{FedHelpError, Result};
use crate::federation::{ClientKind, Mode};
use crate::losses::{LossWeights, WeightMapParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub kind: ClientKind,
    pub train: usize,
    pub test: usize,
    /// Per-client Dirichlet concentration overriding `data.dirichlet_alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub modes: usize,
    /// Size of the pool the client shards are cut from.
    pub pool: usize,
    pub dirichlet_alpha: f64,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 8,
            dim: 32,
            spread: 1.0,
            modes: 2,
            pool: 20_000,
            dirichlet_alpha: 0.5,
            height: 24,
            width: 24,
            noise: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PublicConfig {
    pub size: usize,
    /// Public label count; `None` means the private count.
    pub classes: Option<usize>,
    pub shift: f64,
    /// Pixel noise of public segmentation images.
    pub noise: f64,
}

impl Default for PublicConfig {
    fn default() -> Self {
        PublicConfig {
            size: 1000,
            classes: None,
            shift: 0.5,
            noise: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Number of APIs `M`; defaults by mode.
    pub count: Option<usize>,
    /// Held-out public samples each oracle is pre-trained on.
    pub train_size: usize,
    pub epochs: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            count: None,
            train_size: 2000,
            epochs: 10,
        }
    }
}

/// Hidden widths (MLP) or channel counts (conv) of each model family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub small: Option<Vec<usize>>,
    pub large: Option<Vec<usize>>,
    pub oracle: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_r: Option<f64>,
    pub lambda_j: Option<f64>,
    pub lambda_f: Option<f64>,
    pub lambda_b: Option<f64>,
    pub omega_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_small: f64,
    pub lr_large: f64,
    pub momentum: f64,
    pub max_rounds: usize,
    pub patience: usize,
    pub epsilon: f64,
    pub uniform_weights: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 2,
            batch_size: 32,
            lr_small: 0.05,
            lr_large: 0.01,
            momentum: 0.9,
            max_rounds: 100,
            patience: 10,
            epsilon: 1e-3,
            uniform_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Empty means the task's default client plan.
    #[serde(default)]
    pub clients: Vec<ClientConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub public: PublicConfig,
    #[serde(default)]
    pub oracles: OracleConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub weight_map: WeightMapParams,
    #[serde(default)]
    pub training: TrainingConfig,
}

/// Six clients with the ISIC19 size ratios over `total_train` samples;
/// the three biggest are large clients.
pub fn isic19_clients(total_train: usize, min_test: usize) -> Vec<ClientConfig> {
    let train = proportional_sizes(&ISIC19_TRAIN, total_train);
    let test_total =
        ISIC19_TEST.iter().sum::<usize>() * total_train / ISIC19_TRAIN.iter().sum::<usize>();
    let test = proportional_sizes(&ISIC19_TEST, test_total);
    train
        .into_iter()
        .zip(test)
        .enumerate()
        .map(|(i, (train, test))| ClientConfig {
            kind: if i < 3 { ClientKind::Large } else { ClientKind::Small },
            train,
            test: test.max(min_test),
            tilt: None,
        })
        .collect()
}

/// Two large clients and one small one with the 285/285/65 shape.
pub fn lungseg_clients(scale: f64, test: usize) -> Vec<ClientConfig> {
    [(ClientKind::Large, 285.0), (ClientKind::Large, 285.0), (ClientKind::Small, 65.0)]
        .into_iter()
        .map(|(kind, n)| ClientConfig {
            kind,
            train: ((n * scale).round() as usize).max(1),
            test,
            tilt: None,
        })
        .collect()
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Parses a JSON document. A top-level `"preset"` key starts from that
    /// preset and applies the remaining keys on top. The result is resolved
    /// and validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)?;
        if let Some(Value::String(name)) = doc.as_object_mut().and_then(|o| o.remove("preset")) {
            let mut base = presets::preset_value(&name)?;
            merge(&mut base, doc);
            doc = base;
        }
        let raw: ExperimentConfig = serde_json::from_value(doc).map_err(|e| {
            FedHelpError::config("config", e.to_string())
        })?;
        raw.resolve()
    }

    /// Fills task- and mode-dependent defaults, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        let seg = self.task == Task::Segmentation;
        if self.clients.is_empty() {
            self.clients = if seg {
                lungseg_clients(1.0, 40)
            } else {
                isic19_clients(3400, 150)
            };
        }
        let m = &mut self.models;
        let (small, large, oracle) = if seg {
            (vec![8, 8], vec![16, 16], vec![16, 16])
        } else {
            (vec![64, 64], vec![256; 4], vec![256, 256])
        };
        m.small.get_or_insert(small);
        m.large.get_or_insert(large);
        m.oracle.get_or_insert(oracle);

        let default_apis = match self.mode {
            Mode::FedhelpMinus => 0,
            Mode::FedhelpOneApi => 1,
            _ if seg => 1,
            _ => 2,
        };
        self.oracles.count.get_or_insert(default_apis);
        if seg {
            self.data.classes = 2;
        }
        self.public.classes.get_or_insert(self.data.classes);

        let d = LossWeights::default();
        let l = &mut self.loss;
        l.lambda_r.get_or_insert(d.lambda_r);
        l.lambda_j.get_or_insert(d.lambda_j);
        l.lambda_f
            .get_or_insert(if self.mode == Mode::FedhelpB { 0.0 } else { d.lambda_f });
        l.lambda_b
            .get_or_insert(if self.mode == Mode::FedhelpF { 0.0 } else { d.lambda_b });
        l.omega_size
            .get_or_insert(if seg || self.data.classes <= 2 { 1 } else { d.omega_size });
        self.validate()?;
        Ok(self)
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.loss;
        LossWeights {
            lambda_r: l.lambda_r.unwrap_or_default(),
            lambda_j: l.lambda_j.unwrap_or_default(),
            lambda_f: l.lambda_f.unwrap_or_default(),
            lambda_b: l.lambda_b.unwrap_or_default(),
            omega_size: l.omega_size.unwrap_or(1),
        }
    }

    pub fn num_apis(&self) -> usize {
        self.oracles.count.unwrap_or(0)
    }

    pub fn public_classes(&self) -> usize {
        self.public.classes.unwrap_or(self.data.classes)
    }

    fn validate(&self) -> Result<()> {
        let seg = self.task == Task::Segmentation;
        self.loss_weights().validate(self.data.classes)?;
        match self.mode {
            Mode::FedhelpMinus if self.num_apis() != 0 => {
                return Err(FedHelpError::config("oracles.count", "fedhelp_minus uses no oracles (must be 0)"))
            }
            Mode::FedhelpOneApi if self.num_apis() != 1 => {
                return Err(FedHelpError::config("oracles.count", "fedhelp_one_api uses exactly one oracle"))
            }
            Mode::FedhelpF if self.loss_weights().lambda_b != 0.0 => {
                return Err(FedHelpError::config("loss.lambda_b", "fedhelp_f is forward-only (must be 0)"))
            }
            Mode::FedhelpB if self.loss_weights().lambda_f != 0.0 => {
                return Err(FedHelpError::config("loss.lambda_f", "fedhelp_b is backward-only (must be 0)"))
            }
            _ => {}
        }
        if self.clients.iter().any(|c| c.train == 0) {
            return Err(FedHelpError::config("clients", "every client needs at least one training sample"));
        }
        if self.clients.iter().any(|c| c.test == 0) {
            return Err(FedHelpError::config("clients", "every client needs a nonempty test set"));
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || t.max_rounds == 0 || t.patience == 0 {
            return Err(FedHelpError::config("training", "epochs, batch_size, max_rounds and patience must be positive"));
        }
        for (name, v) in [("training.lr_small", t.lr_small), ("training.lr_large", t.lr_large)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FedHelpError::config(name, "learning rate must be positive"));
            }
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(FedHelpError::config("training.momentum", "must be in [0, 1)"));
        }
        if !(self.data.dirichlet_alpha > 0.0) {
            return Err(FedHelpError::config("data.dirichlet_alpha", "must be positive"));
        }
        if seg {
            if self.public_classes() != 2 {
                return Err(FedHelpError::config("public.classes", "segmentation is binary"));
            }
        } else {
            if self.data.classes < 2 {
                return Err(FedHelpError::config("data.classes", "need at least two classes"));
            }
            if self.public_classes() < 2 {
                return Err(FedHelpError::config("public.classes", "need at least two classes"));
            }
            let need: usize = self.clients.iter().map(|c| c.train + c.test).sum();
            if need > self.data.pool {
                return Err(FedHelpError::config(
                    "data.pool",
                    format!("client plan needs {need} samples, pool has {}", self.data.pool),
                ));
            }
        }
        if self.public.size == 0 && self.mode.guides_small() {
            return Err(FedHelpError::config("public.size", "guided modes need public data"));
        }
        Ok(())
    }

    /// Stable pretty JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::parse("{}").unwrap();
        assert_eq!(c.mode, Mode::Fedhelp);
        assert_eq!(c.loss_weights(), LossWeights::default());
        assert_eq!(c.clients.len(), 6);
        assert_eq!(c.num_apis(), 2);
    }

    #[test]
    fn forward_only_rejects_backward_weight() {
        let e = ExperimentConfig::parse(r#"{"mode":"fedhelp_f","loss":{"lambda_b":0.5}}"#).unwrap_err();
        assert!(e.to_string().contains("lambda_b"), "{e}");
        let ok = ExperimentConfig::parse(r#"{"mode":"fedhelp_f"}"#).unwrap();
        assert_eq!(ok.loss_weights().lambda_b, 0.0);
    }

    #[test]
    fn minus_forces_no_oracles() {
        assert_eq!(ExperimentConfig::parse(r#"{"mode":"fedhelp_minus"}"#).unwrap().num_apis(), 0);
        assert!(ExperimentConfig::parse(r#"{"mode":"fedhelp_minus","oracles":{"count":2}}"#).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse(r#"{"mdoe":"local"}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"training":{"lr":0.1}}"#).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let c = ExperimentConfig::parse(r#"{"mode":"local","seed":9}"#).unwrap();
        let text = c.canonical_json();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), text);
    }

    #[test]
    fn segmentation_defaults() {
        let c = ExperimentConfig::parse(r#"{"task":"segmentation"}"#).unwrap();
        assert_eq!(c.loss_weights().omega_size, 1);
        assert_eq!(c.num_apis(), 1);
        assert_eq!(c.clients.len(), 3);
    }

    #[test]
    fn preset_with_overrides() {
        let c = ExperimentConfig::parse(r#"{"preset":"isic19-synthetic","mode":"fedavg","seed":3}"#).unwrap();
        assert_eq!(c.mode, Mode::Fedavg);
        assert_eq!(c.seed, 3);
    }
}
