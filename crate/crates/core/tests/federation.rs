mod common;

use common::{tiny, tiny_with};
use fedhelp::experiments::build::{build_clients, build_public};
use fedhelp::experiments::run::{federation_config, prepare_cache, sha256_hex, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
use fedhelp::experiments::{compare, execute, run_to_dir, ExperimentConfig, RunOptions};
use fedhelp::federation::{evaluate, run_federation, ClientKind, Guidance, Mode};
use fedhelp::FedHelpError;

fn serial() -> RunOptions {
    RunOptions::default()
}

#[test]
fn fedavg_follows_hand_computed_trajectory() {
    let cfg = tiny("fedavg", 5);
    let mut fc = federation_config(&cfg, false);
    fc.patience = usize::MAX;
    let mut clients = build_clients(&cfg).unwrap();
    assert!(clients.iter().all(|c| c.kind() == ClientKind::Small));
    let state = run_federation(&mut clients, None, &fc).unwrap();
    assert_eq!(state.round, 3);

    let mut reference = build_clients(&cfg).unwrap();
    let mut global: Option<Vec<f64>> = None;
    let mut layout = None;
    for round in 1..=3 {
        let mut sum: Option<Vec<f64>> = None;
        let mut total = 0.0;
        for c in reference.iter_mut() {
            let g = global.as_ref().map(|v| fedhelp::model::ParamVector {
                layout: layout.clone().unwrap(),
                values: v.clone(),
            });
            let up = c.local_round(round, g.as_ref(), None, &fc.local, cfg.seed).unwrap().upload;
            let w = c.train.len() as f64;
            total += w;
            let acc = sum.get_or_insert_with(|| vec![0.0; up.values.len()]);
            for (a, x) in acc.iter_mut().zip(&up.values) {
                *a += w * x;
            }
            layout = Some(up.layout);
        }
        global = Some(sum.unwrap().into_iter().map(|s| s / total).collect());
    }
    let got = &state.global.as_ref().unwrap().values;
    let want = global.unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
    // The last reported metrics are those of the final local models.
    let last = state.history.last().unwrap();
    for (c, r) in clients.iter().zip(&last.clients) {
        assert_eq!(evaluate(c.eval_network(), &c.test).unwrap(), r.metrics);
    }
}

#[test]
fn zero_guidance_weight_is_plain_local_training() {
    let cfg = tiny_with("fedhelp", 1, r#","loss":{"lambda_j":0.0}"#);
    let public = build_public(&cfg).unwrap();
    let (cache, _) = prepare_cache(&cfg, &public, None).unwrap();
    let clients = build_clients(&cfg).unwrap();
    let fc = federation_config(&cfg, false);
    let mut local = fc.local.clone();
    local.mode = Mode::Local;
    for c in clients.iter().filter(|c| c.kind() == ClientKind::Small) {
        let (mut a, mut b) = (c.clone(), c.clone());
        let guided = Some(Guidance {
            public: &public,
            cache: Some(&cache),
        });
        let ua = a.local_round(1, None, guided, &fc.local, cfg.seed).unwrap();
        let ub = b.local_round(1, None, None, &local, cfg.seed).unwrap();
        assert_eq!(ua.upload, ub.upload);
        assert_eq!(ua.losses.guidance, 0.0);
        assert!(a.mixture().is_none());
    }
}

fn large_params(mode: &str) -> (Vec<f64>, Vec<f64>) {
    let cfg = tiny(mode, 2);
    let out = execute(&cfg, &serial()).unwrap();
    let c = out.clients.iter().find(|c| c.kind() == ClientKind::Large).unwrap();
    let accs = out.state.history.iter().map(|r| r.clients[c.id].metrics.accuracy).collect();
    (c.eval_network().flatten_params().values, accs)
}

#[test]
fn forward_only_leaves_the_large_model_on_its_local_path() {
    assert_eq!(large_params("fedhelp_f"), large_params("local"));
    assert_ne!(large_params("fedhelp").0, large_params("local").0);
}

#[test]
fn backward_only_proxy_just_relays_the_global_model() {
    let cfg = tiny("fedhelp_b", 4);
    let mut fc = federation_config(&cfg, false);
    fc.max_rounds = 1;
    let public = build_public(&cfg).unwrap();
    let (cache, _) = prepare_cache(&cfg, &public, None).unwrap();
    let guidance = Guidance {
        public: &public,
        cache: Some(&cache),
    };
    let mut clients = build_clients(&cfg).unwrap();
    let state = run_federation(&mut clients, Some(guidance), &fc).unwrap();
    let global = state.global.unwrap();
    let large = clients.iter_mut().find(|c| c.kind() == ClientKind::Large).unwrap();
    let up = large.local_round(2, Some(&global), None, &fc.local, cfg.seed).unwrap();
    assert_eq!(up.upload, global);
    assert!(up.losses.ranking_kd > 0.0);
    assert_eq!(up.losses.forward_kd, 0.0);
}

#[test]
fn early_stop_after_patience_stale_rounds() {
    let cfg = tiny_with("local", 0, r#","training":{"max_rounds":10,"epochs":1,"batch_size":16,"patience":1,"epsilon":1.0}"#);
    let out = execute(&cfg, &serial()).unwrap();
    assert_eq!(out.state.round, 2);
    assert!(out.state.stopped_early);
    assert_eq!(out.state.aggregation_events(), 0);
}

#[test]
fn oracles_are_evaluated_once_per_public_datum() {
    let cfg = tiny("fedhelp", 0);
    let out = execute(&cfg, &serial()).unwrap();
    assert_eq!(out.summary.oracle_evaluations, 2 * 100);
    let one = execute(&tiny("fedhelp_one_api", 0), &serial()).unwrap();
    assert_eq!(one.summary.oracle_evaluations, 100);
    let minus = execute(&tiny("fedhelp_minus", 0), &serial()).unwrap();
    assert_eq!(minus.summary.oracle_evaluations, 0);
}

#[test]
fn cache_miss_is_reported() {
    let cfg = tiny("fedhelp", 0);
    let public = build_public(&cfg).unwrap();
    let (cache, _) = prepare_cache(&cfg, &public, None).unwrap();
    assert!(matches!(
        cache.get_distributions(&[7]),
        Err(FedHelpError::CacheMiss { datum_id: 7 })
    ));
}

#[test]
fn serial_and_parallel_agree() {
    for mode in ["fedhelp", "fedavg", "fedhelp_s"] {
        let cfg = tiny(mode, 8);
        let a = execute(&cfg, &serial()).unwrap();
        let b = execute(
            &cfg,
            &RunOptions {
                parallel: true,
                cache_path: None,
            },
        )
        .unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv, "{mode}");
        assert_eq!(a.summary, b.summary);
    }
}

#[test]
fn every_mode_runs() {
    for mode in fedhelp::federation::ALL_MODES {
        let out = execute(&tiny(mode.as_str(), 1), &serial()).unwrap();
        assert_eq!(out.summary.mode, mode);
        assert!(out.summary.client_average.accuracy > 0.0);
        let rows = out.metrics_csv.lines().count();
        assert_eq!(rows, 1 + 3 * out.state.round);
    }
}

#[test]
fn segmentation_runs_and_reports_dice() {
    let cfg = ExperimentConfig::parse(
        r#"{
        "task": "segmentation", "seed": 2,
        "clients": [
            {"kind": "large", "train": 12, "test": 4},
            {"kind": "large", "train": 12, "test": 4},
            {"kind": "small", "train": 4, "test": 4}
        ],
        "data": {"height": 8, "width": 8},
        "public": {"size": 10},
        "oracles": {"train_size": 10, "epochs": 1},
        "models": {"small": [4], "large": [4, 4], "oracle": [4]},
        "training": {"max_rounds": 2, "epochs": 1, "batch_size": 4}
    }"#,
    )
    .unwrap();
    let out = execute(&cfg, &serial()).unwrap();
    assert_eq!(out.summary.oracle_evaluations, 10);
    let dice = out.summary.client_average.dice.unwrap();
    assert!((0.0..=1.0).contains(&dice));
    assert!(out.metrics_csv.lines().nth(1).unwrap().split(',').next_back().unwrap().parse::<f64>().is_ok());
}

#[test]
fn run_directory_artifacts_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("help");
    let b = dir.path().join("avg");
    let opts = RunOptions {
        parallel: false,
        cache_path: Some(a.join("cache.fhoc")),
    };
    let sa = run_to_dir(&tiny("fedhelp", 3), &a, &opts).unwrap();
    run_to_dir(&tiny("fedavg", 3), &b, &serial()).unwrap();
    for art in &sa.artifacts {
        assert_eq!(sha256_hex(&std::fs::read(a.join(&art.file)).unwrap()), art.sha256);
    }
    assert!(a.join(METRICS_FILE).is_file() && a.join(CONFIG_FILE).is_file() && a.join(SUMMARY_FILE).is_file());
    let back = ExperimentConfig::parse(&std::fs::read_to_string(a.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(back, tiny("fedhelp", 3));

    let table = compare(&[a.clone(), b.clone()]).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "client,help:fedhelp,avg:fedavg,imp_vs_avg:fedavg");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("Client Average,"));

    let other = dir.path().join("other");
    let mut cfg = tiny("local", 3);
    cfg.clients[2].train = 31;
    run_to_dir(&cfg, &other, &serial()).unwrap();
    assert!(compare(&[a, other]).is_err());
}

#[test]
fn stale_cache_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.fhoc");
    let cfg = tiny("fedhelp", 0);
    let public = build_public(&cfg).unwrap();
    let (_, n) = prepare_cache(&cfg, &public, Some(&path)).unwrap();
    assert_eq!(n, 200);
    let (_, n) = prepare_cache(&cfg, &public, Some(&path)).unwrap();
    assert_eq!(n, 0);
    // Different oracle training means different oracle ids.
    let mut changed = cfg.clone();
    changed.oracles.epochs = 3;
    let (cache, n) = prepare_cache(&changed, &public, Some(&path)).unwrap();
    assert_eq!(n, 200);
    assert_eq!(cache.total_queries(), 200);
}
