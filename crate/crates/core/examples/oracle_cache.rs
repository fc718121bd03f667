//! One-time oracle access: every oracle sees each public datum once, the
//! answers are cached to disk, and later runs only read the cache.
//!
//!     cargo run --release --example oracle_cache

use fedhelp::experiments::build::{build_oracles, build_public, oracle_ids};
use fedhelp::experiments::ExperimentConfig;
use fedhelp::oracle::OracleCache;

fn main() -> fedhelp::Result<()> {
    let cfg = ExperimentConfig::parse(r#"{"preset":"isic19-synthetic","public":{"size":300}}"#)?;
    let public = build_public(&cfg)?;
    let oracles = build_oracles(&cfg)?;
    println!("oracles: {:?}", oracle_ids(&cfg));

    let cache = OracleCache::warm_up(&oracles, public.ids(), public.inputs(), cfg.public_classes())?;
    for o in &oracles {
        println!("{}: {} evaluations", o.id(), o.evaluations());
    }

    let dir = std::env::temp_dir().join("fedhelp-oracle-cache-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("cache.fhoc");
    cache.save(&path)?;
    let size = std::fs::metadata(&path)?.len();

    let loaded = OracleCache::load(&path)?;
    let batch = loaded.get_distributions(&public.ids()[..4])?;
    println!("reloaded {} entries ({size} bytes); batch of 4 -> {:?}", loaded.len(), batch.dists.shape());
    println!("query counter after reload: {:?}", loaded.query_counter());
    let total: u64 = oracles.iter().map(|o| o.evaluations()).sum();
    println!("raw evaluations in this process: {total} (= oracles x public size)");

    match loaded.get_distributions(&[u64::MAX]) {
        Err(e) => println!("unknown datum: {e}"),
        Ok(_) => unreachable!(),
    }
    std::fs::remove_dir_all(dir)?;
    Ok(())
}
