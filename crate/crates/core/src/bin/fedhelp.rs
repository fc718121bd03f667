use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedhelp::experiments::build::build_public;
use fedhelp::experiments::run::{error_json, prepare_cache, CACHE_FILE, ERROR_FILE};
use fedhelp::experiments::{compare, load_config, run_to_dir, verify, ExperimentConfig, RunOptions};
use fedhelp::{FedHelpError, Result};

#[derive(Parser)]
#[command(name = "fedhelp", version, about = "Federated learning simulator with oracle guidance and dual distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config (preset name or JSON file) and write its artifacts.
    Run {
        config: String,
        /// Train clients one after another instead of in parallel.
        #[arg(long)]
        serial: bool,
        /// Output directory [default: runs/<mode>-seed<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Oracle cache file [default: <out>/oracle_cache.fhoc].
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Tabulate per-client accuracy of finished runs against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Evaluate the oracles on the public set and save the cache, nothing else.
    Warmup {
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the invariant suite for a config.
    Verify {
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(arg: &str) -> Result<ExperimentConfig> {
    let mut cfg = load_config(arg)?;
    if let Ok(s) = std::env::var("FEDHELP_SEED") {
        cfg.seed = s
            .parse()
            .map_err(|_| FedHelpError::config("FEDHELP_SEED", format!("not an unsigned integer: `{s}`")))?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", cfg.mode, cfg.seed)))
}

fn cache_path(out: &Path, cache: Option<PathBuf>) -> PathBuf {
    cache.unwrap_or_else(|| out.join(CACHE_FILE))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut error_dir = None;
    let result = (|| -> Result<()> {
        match cli.command {
            Command::Run {
                config: arg,
                serial,
                out,
                cache,
            } => {
                let cfg = config(&arg)?;
                let out = out_dir(&cfg, out);
                error_dir = Some(out.clone());
                let opts = RunOptions {
                    parallel: !serial,
                    cache_path: Some(cache_path(&out, cache)),
                };
                let s = run_to_dir(&cfg, &out, &opts)?;
                println!(
                    "{} seed {}: {} rounds{}, client average accuracy {:.4}",
                    s.mode,
                    s.seed,
                    s.rounds,
                    if s.stopped_early { " (early stop)" } else { "" },
                    s.client_average.accuracy
                );
                if let Some(d) = s.client_average.dice {
                    println!("client average dice {d:.4}");
                }
                if let Some(a) = s.small_client_average {
                    println!("small-client average accuracy {:.4}", a.accuracy);
                }
                println!("oracle evaluations {}", s.oracle_evaluations);
                println!("wrote {}", out.display());
            }
            Command::Compare { dirs } => print!("{}", compare(&dirs)?),
            Command::Warmup { config: arg, out, cache } => {
                let cfg = config(&arg)?;
                let out = out_dir(&cfg, out);
                error_dir = Some(out.clone());
                if cfg.num_apis() == 0 || !cfg.mode.guides_small() {
                    println!("mode {} uses no oracles; nothing to warm up", cfg.mode);
                    return Ok(());
                }
                std::fs::create_dir_all(&out)?;
                let path = cache_path(&out, cache);
                let public = build_public(&cfg)?;
                let (cache, evals) = prepare_cache(&cfg, &public, Some(&path))?;
                println!(
                    "{} oracles x {} public samples, {evals} new evaluations, {} total",
                    cache.num_apis(),
                    cache.len(),
                    cache.total_queries()
                );
                println!("wrote {}", path.display());
            }
            Command::Verify { config: arg, out } => {
                let cfg = config(&arg)?;
                let scratch = out.clone().unwrap_or_else(|| {
                    std::env::temp_dir().join(format!("fedhelp-verify-{}", std::process::id()))
                });
                let checks = verify(&cfg, &scratch);
                if out.is_none() {
                    let _ = std::fs::remove_dir_all(&scratch);
                }
                let checks = checks?;
                for c in &checks {
                    println!("{c}");
                }
                let failed = checks.iter().filter(|c| !c.passed).count();
                if failed > 0 {
                    return Err(FedHelpError::InvalidArgument(format!("{failed} invariant check(s) failed")));
                }
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = error_json(&e);
            println!("{doc}");
            if let Some(dir) = error_dir.filter(|d| d.is_dir()) {
                let _ = std::fs::write(dir.join(ERROR_FILE), format!("{doc}\n"));
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
