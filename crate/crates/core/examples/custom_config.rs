//! Configs are JSON: start from a preset, override what you need, and get
//! back the fully resolved document that a run directory records.
//!
//!     cargo run --release --example custom_config

use fedhelp::experiments::ExperimentConfig;

fn main() -> fedhelp::Result<()> {
    let cfg = ExperimentConfig::parse(
        r#"{
            "preset": "pneumonia-synthetic",
            "mode": "fedhelp_one_api",
            "seed": 11,
            "loss": {"lambda_b": 0.5},
            "training": {"max_rounds": 15, "uniform_weights": true}
        }"#,
    )?;
    println!("{}", cfg.canonical_json());
    println!("oracles {}, |omega| {} (binary task)", cfg.num_apis(), cfg.loss_weights().omega_size);

    for bad in [
        r#"{"mode":"fedhelp_f","loss":{"lambda_b":0.2}}"#,
        r#"{"mode":"fedhelp_minus","oracles":{"count":2}}"#,
        r#"{"training":{"learning_rate":0.1}}"#,
        r#"{"preset":"cifar"}"#,
    ] {
        println!("{bad}\n  -> {}", ExperimentConfig::parse(bad).unwrap_err());
    }
    Ok(())
}
