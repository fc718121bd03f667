//! Invariant suite: exact mathematical checks plus config-level checks on
//! oracle access, determinism and communication cost.

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::build::{build_clients, build_public, large_spec, small_spec};
use super::config::ExperimentConfig;
use super::run::{execute, prepare_cache, sha256_hex, RunOptions};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::federation::{fedavg_aggregate, ClientKind, Upload};
use crate::gradcheck::{check, check_frozen, DEFAULT_STEP};
use crate::losses::{self, OracleBatch, WeightMapParams};
use crate::model::ParamVector;
use crate::rng::{rng_from, Rng};
use crate::tensor::Tensor;

/// Gradient checks must stay below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Ranking distillation with one top class must equal CE within this.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;
/// Proxy uploads must stay below this fraction of the large model.
pub const UPLOAD_FRACTION: f64 = 0.25;

const VERIFY_STREAM: u64 = 0x7665_7269;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn softmax_rows(t: &Tensor, width: usize) -> Vec<f64> {
    t.data()
        .chunks(width)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |x| x / s)
        })
        .collect()
}

fn labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Random oracle distributions of shape `[b × m × rows·c]`.
fn oracle_batch(rng: &mut Rng, b: usize, m: usize, rows: usize, c: usize) -> OracleBatch {
    let raw = randn(rng, &[b, m, rows * c], 1.5);
    OracleBatch {
        dists: Tensor::new(vec![b, m, rows * c], softmax_rows(&raw, c)).expect("shape"),
        classes: c,
    }
}

/// Names of the losses covered by [`gradient_suite`].
pub const GRADIENT_CASES: [&str; 13] = [
    "cross_entropy",
    "kl_divergence",
    "guidance_loss",
    "pixel_guidance_loss",
    "joint_small_loss",
    "large_client_loss",
    "forward_kd",
    "ranking_kd",
    "ranking_kd_from_proxy",
    "symmetric_kd",
    "pixel_forward_kd",
    "pixel_ranking_kd",
    "weighted_pixel_ce",
];

/// Max relative gradient error of one loss on one seed.
pub fn gradient_case(name: &str, seed: u64) -> Result<f64> {
    const B: usize = 4;
    const C: usize = 5;
    const M: usize = 2;
    const K: usize = 3;
    // Two 3x3 binary-mask images.
    const PIX_N: usize = 2;
    const PIX: usize = 9;
    const PIX_ROWS: usize = PIX_N * PIX;

    let mut rng = rng_from(seed, &[VERIFY_STREAM, name.len() as u64]);
    let h = DEFAULT_STEP;
    let logits = randn(&mut rng, &[B, C], 2.0);
    let other = randn(&mut rng, &[B, C], 2.0);
    let y = labels(&mut rng, B, C);
    let pix = randn(&mut rng, &[PIX_ROWS, 2], 2.0);
    let pix_other = randn(&mut rng, &[PIX_ROWS, 2], 2.0);
    let mask = labels(&mut rng, PIX_ROWS, 2);
    let weights: Vec<f64> = (0..PIX_ROWS).map(|_| rng.random_range(0.5..3.0)).collect();
    let alpha = randn(&mut rng, &[B, M], 1.0);
    let pix_alpha = randn(&mut rng, &[PIX_N, M], 1.0);
    let oracle = oracle_batch(&mut rng, B, M, 1, C);
    let pix_oracle = oracle_batch(&mut rng, PIX_N, M, PIX, 2);
    let omega: Vec<Vec<usize>> = (0..B)
        .map(|_| {
            let mut idx: Vec<usize> = (0..C).collect();
            for i in 0..K {
                let j = rng.random_range(i..C);
                idx.swap(i, j);
            }
            let mut top = idx[..K].to_vec();
            top.sort_unstable();
            top
        })
        .collect();
    let target = Tensor::new(vec![B, C], softmax_rows(&other, C))?;
    let (lf, lb, lr, lj) = (0.8, 0.2, 0.7, 0.5);

    let report = match name {
        "cross_entropy" => check(&[logits], h, |g, v| losses::cross_entropy(g, v[0], &y))?,
        "kl_divergence" => check(&[logits], h, |g, v| losses::kl_divergence(g, &target, v[0]))?,
        "guidance_loss" => check(&[logits, alpha], h, |g, v| {
            losses::guidance_loss(g, v[0], &y, Some(&oracle), Some(v[1]), lr)
        })?,
        "pixel_guidance_loss" => check(&[pix, pix_alpha], h, |g, v| {
            losses::pixel_guidance_loss(g, v[0], &mask, &weights, Some(&pix_oracle), Some(v[1]), lr)
        })?,
        "joint_small_loss" => check(&[logits, other, alpha], h, |g, v| {
            let l = losses::cross_entropy(g, v[0], &y)?;
            let r = losses::guidance_loss(g, v[1], &y, Some(&oracle), Some(v[2]), lr)?;
            losses::joint_small_loss(g, l, r, lj)
        })?,
        "large_client_loss" => check_frozen(
            &[logits, other],
            h,
            |g, v| {
                let l = losses::cross_entropy(g, v[0], &y)?;
                let f = losses::forward_kd(g, v[0], v[1])?;
                let b = losses::ranking_kd_from_proxy(g, v[0], v[1], K)?;
                losses::large_client_loss(g, l, Some(f), Some(b), lf, lb)
            },
            |g, live, frozen| {
                let l = losses::cross_entropy(g, live[0], &y)?;
                let f = losses::forward_kd(g, frozen[0], live[1])?;
                let b = losses::ranking_kd_from_proxy(g, live[0], frozen[1], K)?;
                losses::large_client_loss(g, l, Some(f), Some(b), lf, lb)
            },
        )?,
        "forward_kd" => check_frozen(
            &[logits, other],
            h,
            |g, v| losses::forward_kd(g, v[0], v[1]),
            |g, live, frozen| losses::forward_kd(g, frozen[0], live[1]),
        )?,
        "ranking_kd" => check(&[logits], h, |g, v| losses::ranking_kd(g, v[0], &omega))?,
        "ranking_kd_from_proxy" => check_frozen(
            &[logits, other],
            h,
            |g, v| losses::ranking_kd_from_proxy(g, v[0], v[1], K),
            |g, live, frozen| losses::ranking_kd_from_proxy(g, live[0], frozen[1], K),
        )?,
        "symmetric_kd" => check_frozen(
            &[logits, other],
            h,
            |g, v| losses::symmetric_kd(g, v[0], v[1]),
            |g, live, frozen| {
                let a = losses::forward_kd(g, frozen[0], live[1])?;
                let b = losses::forward_kd(g, frozen[1], live[0])?;
                g.add(a, b)
            },
        )?,
        "pixel_forward_kd" => check_frozen(
            &[pix, pix_other],
            h,
            |g, v| losses::pixel_forward_kd(g, v[0], v[1]),
            |g, live, frozen| losses::pixel_forward_kd(g, frozen[0], live[1]),
        )?,
        "pixel_ranking_kd" => check_frozen(
            &[pix, pix_other],
            h,
            |g, v| losses::pixel_ranking_kd(g, v[0], v[1], 1),
            |g, live, frozen| losses::pixel_ranking_kd(g, live[0], frozen[1], 1),
        )?,
        "weighted_pixel_ce" => check(&[pix], h, |g, v| losses::weighted_pixel_ce(g, v[0], &mask, &weights))?,
        other => {
            return Err(crate::error::FedHelpError::InvalidArgument(format!(
                "no gradient case named `{other}`"
            )))
        }
    };
    Ok(report.max_relative_error)
}

/// Worst relative error per loss over `seeds` random draws.
pub fn gradient_suite(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    GRADIENT_CASES
        .iter()
        .map(|&name| {
            let worst = (0..seeds)
                .map(|s| gradient_case(name, s))
                .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))?;
            Ok((name, worst))
        })
        .collect()
}

pub fn gradient_check(seeds: u64) -> Result<Check> {
    let suite = gradient_suite(seeds)?;
    let (worst_name, worst) = suite
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(Check::new(
        "gradients",
        worst < GRAD_TOLERANCE,
        format!(
            "{} losses x {seeds} seeds, max rel err {worst:.2e} ({worst_name})",
            suite.len()
        ),
    ))
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Max |ranking_kd(Ω = argmax proxy) − CE(argmax proxy)| over random draws.
/// The reference CE is computed directly from the logits, off the graph.
/// With `pixels`, draws are image batches and the check is per pixel.
pub fn ranking_ce_gap(draws: u64, seed: u64, pixels: bool) -> Result<f64> {
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = rng_from(seed, &[VERIFY_STREAM, 2, d, pixels as u64]);
        let (shape, c) = if pixels {
            let (n, hh, ww) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6));
            (vec![n, hh, ww, 2], 2)
        } else {
            let c = rng.random_range(2..11);
            (vec![rng.random_range(1..9), c], c)
        };
        let scale = rng.random_range(0.1..8.0);
        let large = randn(&mut rng, &shape, scale);
        let proxy = randn(&mut rng, &shape, scale);
        let argmax: Vec<usize> = proxy
            .data()
            .chunks(c)
            .map(|r| (0..c).fold(0, |best, i| if r[i] > r[best] { i } else { best }))
            .collect();
        let expected = large
            .data()
            .chunks(c)
            .zip(&argmax)
            .map(|(r, &y)| logsumexp(r) - r[y])
            .sum::<f64>()
            / argmax.len() as f64;
        let mut g = Graph::new();
        let l: Var = g.constant(large.shape(), large.data().to_vec())?;
        let p: Var = g.constant(proxy.shape(), proxy.data().to_vec())?;
        let got = if pixels {
            losses::pixel_ranking_kd(&mut g, l, p, 1)?
        } else {
            losses::ranking_kd_from_proxy(&mut g, l, p, 1)?
        };
        worst = worst.max((g.scalar_value(got) - expected).abs());
    }
    Ok(worst)
}

pub fn ranking_ce_equivalence(draws: u64, pixels: bool) -> Result<Check> {
    let gap = ranking_ce_gap(draws, 0, pixels)?;
    let name = if pixels { "pixel ranking/CE equivalence" } else { "ranking/CE equivalence" };
    Ok(Check::new(
        name,
        gap <= EQUIVALENCE_TOLERANCE,
        format!("{draws} draws, max |diff| {gap:.2e}"),
    ))
}

fn upload(id: usize, values: Vec<f64>, weight: u64) -> Upload {
    Upload {
        client_id: id,
        params: ParamVector::flat(values),
        weight,
    }
}

/// Bitwise comparison against hand-computed means.
pub fn fedavg_exactness() -> Result<Check> {
    let v = vec![0.1, -7.25, 1e-300, 3.0e7];
    let mut failures = Vec::new();
    let identity = fedavg_aggregate(&[upload(0, v.clone(), 17)])?;
    if identity.values != v {
        failures.push("identity");
    }
    let equal = fedavg_aggregate(&[upload(0, vec![1.0, -2.0], 5), upload(1, vec![3.0, 4.0], 5)])?;
    if equal.values != [2.0, 1.0] {
        failures.push("equal-weight mean");
    }
    let weighted = fedavg_aggregate(&[upload(0, vec![1.0], 3), upload(1, vec![3.0], 1)])?;
    if weighted.values != [1.5] {
        failures.push("3:1 weighting");
    }
    let mut rng = rng_from(0, &[VERIFY_STREAM, 3]);
    let ups: Vec<Upload> = (0..6)
        .map(|i| upload(i, randn(&mut rng, &[32], 1.0).into_data(), rng.random_range(1..500)))
        .collect();
    let base = fedavg_aggregate(&ups)?;
    let mut shuffled = ups.clone();
    shuffled.reverse();
    shuffled.swap(1, 4);
    let perm = fedavg_aggregate(&shuffled)?;
    let drift = base
        .values
        .iter()
        .zip(&perm.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if drift >= 1e-9 {
        failures.push("permutation");
    }
    Ok(Check::new(
        "fedavg exactness",
        failures.is_empty(),
        if failures.is_empty() {
            format!("identity, equal mean, 3:1 -> 1.5 exact; permutation drift {drift:.1e}")
        } else {
            format!("mismatch in {}", failures.join(", "))
        },
    ))
}

pub fn weight_map_values() -> Result<Check> {
    let params = WeightMapParams {
        beta0: 10.0,
        sigma: 5.0,
        class_balance: vec![1.0, 1.0],
    };
    let at_seam = losses::weight_map(&[1], &[0.0], &[0.0], &params)?[0];
    let away = losses::weight_map(&[1], &[4.0], &[6.0], &params)?[0];
    let expected = 1.0 + 10.0 * (-2.0f64).exp();
    let ok = at_seam == 11.0 && (away - expected).abs() <= 1e-12;
    Ok(Check::new(
        "weight map",
        ok,
        format!("beta(0) = {at_seam}, beta(10) = {away:.15} (expected {expected:.15})"),
    ))
}

/// Oracle evaluations happen once per (oracle, public datum), and a run
/// started from the saved cache evaluates nothing.
pub fn one_time_access(cfg: &ExperimentConfig, scratch: &Path) -> Result<Check> {
    let name = "one-time oracle access";
    if cfg.num_apis() == 0 || !cfg.mode.guides_small() {
        return Ok(Check::new(name, true, "no oracles in this configuration"));
    }
    std::fs::create_dir_all(scratch)?;
    let path = scratch.join("verify_cache.fhoc");
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let public = build_public(cfg)?;
    let expected = (cfg.num_apis() * public.len()) as u64;
    let (cache, first) = prepare_cache(cfg, &public, Some(&path))?;
    let before = sha256_hex(&std::fs::read(&path)?);
    let mut short = cfg.clone();
    short.training.max_rounds = short.training.max_rounds.min(2);
    let rerun = execute(
        &short,
        &RunOptions {
            parallel: false,
            cache_path: Some(path.clone()),
        },
    )?;
    let after = sha256_hex(&std::fs::read(&path)?);
    let ok = first == expected
        && cache.total_queries() == expected
        && rerun.summary.oracle_evaluations == 0
        && before == after;
    Ok(Check::new(
        name,
        ok,
        format!(
            "warm-up {first} evaluations (expected {expected}), reload {}, cache file {}",
            rerun.summary.oracle_evaluations,
            if before == after { "unchanged" } else { "rewritten" }
        ),
    ))
}

/// A short run repeated in parallel and serial gives identical metrics.
pub fn determinism(cfg: &ExperimentConfig, rounds: usize) -> Result<Check> {
    let mut short = cfg.clone();
    short.training.max_rounds = short.training.max_rounds.min(rounds);
    let run = |parallel| {
        execute(
            &short,
            &RunOptions {
                parallel,
                cache_path: None,
            },
        )
        .map(|o| o.metrics_csv)
    };
    let (a, b, c) = (run(true)?, run(true)?, run(false)?);
    Ok(Check::new(
        "determinism",
        a == b && b == c,
        format!("{} rounds, metrics sha256 {}", short.training.max_rounds, &sha256_hex(a.as_bytes())[..12]),
    ))
}

/// Large clients upload exactly their proxy, which is a small fraction of
/// the model they keep.
pub fn communication(cfg: &ExperimentConfig) -> Result<Check> {
    let proxy_bytes = small_spec(cfg).upload_param_count() * 8;
    let large_bytes = large_spec(cfg).upload_param_count() * 8;
    let clients = build_clients(cfg)?;
    let uploads: Vec<usize> = clients
        .iter()
        .filter(|c| c.kind() == ClientKind::Large)
        .map(|c| c.shared_network().flatten_params().upload_bytes())
        .collect();
    let exact = uploads.iter().all(|&b| b == proxy_bytes);
    let small_enough = (proxy_bytes as f64) < UPLOAD_FRACTION * large_bytes as f64;
    Ok(Check::new(
        "communication",
        exact && small_enough,
        format!(
            "{} large clients upload {proxy_bytes} B each vs {large_bytes} B large model ({:.1}%)",
            uploads.len(),
            100.0 * proxy_bytes as f64 / large_bytes as f64
        ),
    ))
}

/// Canonical form survives a parse round trip.
pub fn config_round_trip(cfg: &ExperimentConfig) -> Result<Check> {
    let text = cfg.canonical_json();
    let again = ExperimentConfig::parse(&text)?;
    Ok(Check::new(
        "config round trip",
        again == *cfg && again.canonical_json() == text,
        format!("mode {}, seed {}, {} clients", cfg.mode, cfg.seed, cfg.clients.len()),
    ))
}

/// Everything above, with reduced draw counts and short runs.
pub fn verify(cfg: &ExperimentConfig, scratch: &Path) -> Result<Vec<Check>> {
    Ok(vec![
        config_round_trip(cfg)?,
        gradient_check(10)?,
        ranking_ce_equivalence(200, false)?,
        ranking_ce_equivalence(50, true)?,
        fedavg_exactness()?,
        weight_map_values()?,
        one_time_access(cfg, scratch)?,
        determinism(cfg, 2)?,
        communication(cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_a_few_seeds() {
        for (name, err) in gradient_suite(3).unwrap() {
            assert!(err < GRAD_TOLERANCE, "{name}: {err:e}");
        }
    }

    #[test]
    fn exact_checks_pass() {
        assert!(fedavg_exactness().unwrap().passed);
        assert!(weight_map_values().unwrap().passed);
        assert!(ranking_ce_equivalence(50, false).unwrap().passed);
        assert!(ranking_ce_equivalence(10, true).unwrap().passed);
    }

    #[test]
    fn unknown_case_is_an_error() {
        assert!(gradient_case("hinge", 0).is_err());
    }
}
