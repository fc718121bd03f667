//! Full FedHelp run on the six-client classification preset: small clients
//! are guided by cached oracle answers, large clients distill through their
//! proxies, and only small models ever leave a client.
//!
//!     cargo run --release --example fedhelp_classification [seed]

use fedhelp::experiments::{execute, ExperimentConfig, RunOptions};

fn main() -> fedhelp::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::parse(&format!(r#"{{"preset":"isic19-synthetic","seed":{seed}}}"#))?;
    let lw = cfg.loss_weights();
    println!(
        "lambda_r {} lambda_j {} lambda_f {} lambda_b {} |omega| {}, {} oracles",
        lw.lambda_r, lw.lambda_j, lw.lambda_f, lw.lambda_b, lw.omega_size, cfg.num_apis()
    );
    let out = execute(&cfg, &RunOptions { parallel: true, cache_path: None })?;
    let s = &out.summary;
    println!("{} rounds{}, {} oracle evaluations", s.rounds, if s.stopped_early { " (early stop)" } else { "" }, s.oracle_evaluations);
    for (c, comm) in s.clients.iter().zip(&s.communication) {
        println!(
            "client {} {:5} train {:4}  acc {:.4}  upload {:6} B/round  local model {:7} B",
            c.client_id,
            c.kind.as_str(),
            c.train_size,
            c.accuracy,
            comm.upload_bytes,
            comm.local_model_bytes
        );
    }
    if let Some(a) = s.small_client_average {
        println!("small-client average {:.4}", a.accuracy);
    }
    println!("client average {:.4}", s.client_average.accuracy);

    let first = &out.state.history[0].clients;
    let last = &out.state.history.last().unwrap().clients;
    println!("losses of client 0, first vs last round: {:?} -> {:?}", first[0].losses, last[0].losses);
    println!("losses of client 5, first vs last round: {:?} -> {:?}", first[5].losses, last[5].losses);
    Ok(())
}
