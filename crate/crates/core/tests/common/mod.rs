#![allow(dead_code)]

use fedhelp::experiments::ExperimentConfig;

/// Three clients (one large), 4 classes, a few rounds. Runs in well under
/// a second.
pub fn tiny(mode: &str, seed: u64) -> ExperimentConfig {
    tiny_with(mode, seed, "")
}

/// [`tiny`] with extra top-level JSON members appended (`,"loss":{...}`).
pub fn tiny_with(mode: &str, seed: u64, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "mode": "{mode}", "seed": {seed},
        "clients": [
            {{"kind": "large", "train": 120, "test": 40}},
            {{"kind": "small", "train": 60, "test": 40}},
            {{"kind": "small", "train": 30, "test": 40}}
        ],
        "data": {{"classes": 4, "dim": 8, "spread": 2.0, "pool": 600}},
        "public": {{"size": 100}},
        "oracles": {{"train_size": 200, "epochs": 2}},
        "models": {{"small": [16], "large": [32, 32], "oracle": [32]}},
        "training": {{"max_rounds": 3, "epochs": 1, "batch_size": 16}}
        {extra}
    }}"#
    );
    ExperimentConfig::parse(&text).expect("tiny config parses")
}
