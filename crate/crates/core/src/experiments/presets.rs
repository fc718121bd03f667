//! Built-in experiment presets with the reference client structure at
//! desk scale.

use serde_json::{json, Value};

use super::config::{isic19_clients, lungseg_clients, ClientConfig};
use crate::error::{FedHelpError, Result};
use crate::federation::ClientKind;

pub const PRESETS: [&str; 3] = ["isic19-synthetic", "pneumonia-synthetic", "lungseg-toy"];

/// Chest x-ray split: two large and four small clients.
const PNEUMONIA: [(usize, usize); 6] = [(3134, 374), (1048, 124), (422, 49), (317, 37), (213, 24), (109, 12)];

fn pneumonia_clients(scale: f64, min_test: usize) -> Vec<ClientConfig> {
    PNEUMONIA
        .iter()
        .enumerate()
        .map(|(i, &(train, test))| ClientConfig {
            kind: if i < 2 { ClientKind::Large } else { ClientKind::Small },
            train: ((train as f64 * scale).round() as usize).max(1),
            test: ((test as f64 * scale).round() as usize).max(min_test),
            tilt: None,
        })
        .collect()
}

/// The preset as a config document (mode and seed left at defaults).
pub fn preset_value(name: &str) -> Result<Value> {
    let v = match name {
        "isic19-synthetic" => json!({
            "task": "classification",
            "clients": isic19_clients(3400, 150),
            "data": {"classes": 8, "dim": 32, "spread": 4.0, "modes": 2, "pool": 20000, "dirichlet_alpha": 0.5},
            "public": {"size": 1000, "classes": 10, "shift": 0.5},
            "oracles": {"train_size": 2000, "epochs": 10},
            "models": {"small": [64, 64], "large": [128, 128, 128], "oracle": [256, 256]},
            "training": {"max_rounds": 40},
        }),
        "pneumonia-synthetic" => json!({
            "task": "classification",
            "clients": pneumonia_clients(0.5, 40),
            "data": {"classes": 2, "dim": 32, "spread": 16.0, "modes": 2, "pool": 3200, "dirichlet_alpha": 1.0},
            "public": {"size": 1000, "classes": 2, "shift": 0.5},
            "oracles": {"train_size": 2000, "epochs": 10},
            "models": {"small": [64, 64], "large": [128, 128, 128], "oracle": [256, 256]},
            "training": {"max_rounds": 40},
        }),
        "lungseg-toy" => json!({
            "task": "segmentation",
            "clients": lungseg_clients(0.25, 24),
            "data": {"height": 16, "width": 16, "noise": 0.35},
            "public": {"size": 120, "noise": 0.5},
            "oracles": {"train_size": 200, "epochs": 5},
            "models": {"small": [8, 8, 8], "large": [16, 16, 16, 16], "oracle": [16, 16, 16]},
            "training": {"max_rounds": 30, "batch_size": 8},
        }),
        other => {
            return Err(FedHelpError::config(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            ))
        }
    };
    Ok(v)
}
