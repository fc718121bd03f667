//! Segmentation preset (two large clients, one small one): FedHelp against
//! local-only training, scored by Dice.
//!
//!     cargo run --release --example segmentation [seed]

use fedhelp::experiments::{execute, ExperimentConfig, RunOptions};

fn main() -> fedhelp::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for mode in ["local", "fedhelp"] {
        let cfg = ExperimentConfig::parse(&format!(r#"{{"preset":"lungseg-toy","mode":"{mode}","seed":{seed}}}"#))?;
        let s = execute(&cfg, &RunOptions { parallel: true, cache_path: None })?.summary;
        let per: Vec<String> = s
            .clients
            .iter()
            .map(|c| format!("{}:{:.4}", c.kind.as_str(), c.dice.unwrap_or(f64::NAN)))
            .collect();
        println!(
            "{mode:8} {} rounds  dice [{}]  mean dice {:.4}  pixel acc {:.4}",
            s.rounds,
            per.join(" "),
            s.client_average.dice.unwrap_or(f64::NAN),
            s.client_average.accuracy
        );
    }
    Ok(())
}
