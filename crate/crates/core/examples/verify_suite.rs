//! The invariant suite behind `fedhelp verify`.
//!
//!     cargo run --release --example verify_suite [preset]

use fedhelp::experiments::{load_config, verify};

fn main() -> fedhelp::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "isic19-synthetic".into());
    let cfg = load_config(&name)?;
    let scratch = std::env::temp_dir().join("fedhelp-verify-example");
    for check in verify(&cfg, &scratch)? {
        println!("{check}");
    }
    std::fs::remove_dir_all(scratch)?;
    Ok(())
}
