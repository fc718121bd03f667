//! Size-weighted FedAvg, by hand and as a full homogeneous baseline run.
//!
//!     cargo run --release --example fedavg_baseline [seed]

use fedhelp::experiments::{execute, ExperimentConfig, RunOptions};
use fedhelp::federation::{fedavg_aggregate, Upload};
use fedhelp::model::ParamVector;

fn main() -> fedhelp::Result<()> {
    let ups = [
        Upload { client_id: 0, params: ParamVector::flat(vec![1.0, 10.0]), weight: 3 },
        Upload { client_id: 1, params: ParamVector::flat(vec![3.0, 20.0]), weight: 1 },
    ];
    println!("3:1 average of [1, 10] and [3, 20] = {:?}", fedavg_aggregate(&ups)?.values);

    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::parse(&format!(r#"{{"preset":"isic19-synthetic","mode":"fedavg","seed":{seed}}}"#))?;
    let out = execute(&cfg, &RunOptions { parallel: true, cache_path: None })?;
    let s = &out.summary;
    println!("fedavg: {} rounds, {} aggregations, every client trains the small model", s.rounds, s.aggregation_events);
    for c in &s.clients {
        println!("  client {} ({} train samples): {:.4}", c.client_id, c.train_size, c.accuracy);
    }
    println!("client average {:.4}", s.client_average.accuracy);
    println!("last global checksum {}", out.state.history.last().and_then(|r| r.checksum.as_deref()).unwrap_or("-"));
    Ok(())
}
