//! Runs several modes into run directories and tabulates them the way
//! `fedhelp compare` does.
//!
//!     cargo run --release --example compare_modes [seed] [mode,mode,...]

use fedhelp::experiments::{compare, run_to_dir, ExperimentConfig, RunOptions};

fn main() -> fedhelp::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let modes = args.next().unwrap_or_else(|| "fedhelp,fedavg,local".into());
    let root = std::env::temp_dir().join(format!("fedhelp-compare-{seed}"));
    let mut dirs = Vec::new();
    for mode in modes.split(',') {
        let cfg = ExperimentConfig::parse(&format!(r#"{{"preset":"isic19-synthetic","mode":"{mode}","seed":{seed}}}"#))?;
        let dir = root.join(mode);
        let opts = RunOptions { parallel: true, cache_path: Some(root.join("oracle_cache.fhoc")) };
        let s = run_to_dir(&cfg, &dir, &opts)?;
        println!("{mode}: {} rounds, client average {:.4}", s.rounds, s.client_average.accuracy);
        dirs.push(dir);
    }
    println!();
    print!("{}", compare(&dirs)?);
    println!("\nrun directories under {}", root.display());
    Ok(())
}
