use fedhelp::autodiff::Graph;
use fedhelp::data::{dataset, make_classification, partition, ClassificationSpec, ClientPlan, PartitionPlan};
use fedhelp::federation::{fedavg_aggregate, Upload};
use fedhelp::losses::{self, WeightMapParams};
use fedhelp::model::{ModelSpec, Network, ParamVector};
use fedhelp::oracle::{OracleCache, OracleModel};
use fedhelp::Tensor;
use proptest::prelude::*;

fn logits_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 2usize..9).prop_flat_map(|(b, c)| {
        (Just(b), Just(c), proptest::collection::vec(-20.0f64..20.0, b * c))
    })
}

fn value(f: impl FnOnce(&mut Graph) -> fedhelp::Result<fedhelp::Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.scalar_value(v)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn ranking_kd_ignores_row_shifts((b, c, data) in logits_strategy(), shift in -50.0f64..50.0, k in 1usize..4) {
        let k = k.min(c);
        let t = Tensor::new(vec![b, c], data.clone()).unwrap();
        let omega = losses::top_omega(&t, k).unwrap();
        let shifted: Vec<f64> = data.iter().map(|x| x + shift).collect();
        let a = value(|g| { let v = g.constant(&[b, c], data)?; losses::ranking_kd(g, v, &omega) });
        let s = value(|g| { let v = g.constant(&[b, c], shifted)?; losses::ranking_kd(g, v, &omega) });
        prop_assert!((a - s).abs() < 1e-9, "{a} vs {s}");
    }

    #[test]
    fn ranking_kd_is_class_permutation_equivariant((b, c, data) in logits_strategy(), seed in any::<u64>(), k in 1usize..4) {
        let k = k.min(c);
        let mut perm: Vec<usize> = (0..c).collect();
        let mut s = seed;
        for i in (1..c).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let t = Tensor::new(vec![b, c], data.clone()).unwrap();
        let omega = losses::top_omega(&t, k).unwrap();
        // Class j moves to column perm[j].
        let mut permuted = vec![0.0; b * c];
        for r in 0..b {
            for j in 0..c {
                permuted[r * c + perm[j]] = data[r * c + j];
            }
        }
        let omega_p: Vec<Vec<usize>> = omega.iter().map(|o| o.iter().map(|&j| perm[j]).collect()).collect();
        let a = value(|g| { let v = g.constant(&[b, c], data)?; losses::ranking_kd(g, v, &omega) });
        let p = value(|g| { let v = g.constant(&[b, c], permuted)?; losses::ranking_kd(g, v, &omega_p) });
        prop_assert!((a - p).abs() < 1e-9);
    }

    #[test]
    fn top_omega_dominates_the_rest((b, c, data) in logits_strategy(), k in 1usize..4) {
        let k = k.min(c);
        let t = Tensor::new(vec![b, c], data.clone()).unwrap();
        for (r, set) in losses::top_omega(&t, k).unwrap().iter().enumerate() {
            let row = &data[r * c..(r + 1) * c];
            prop_assert_eq!(set.len(), k);
            prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
            let lo = set.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
            prop_assert!((0..c).filter(|i| !set.contains(i)).all(|i| row[i] <= lo));
        }
    }

    #[test]
    fn kl_is_nonnegative((b, c, p_raw) in logits_strategy(), q_seed in proptest::collection::vec(-20.0f64..20.0, 48)) {
        let p: Vec<f64> = p_raw.chunks(c).flat_map(softmax).collect();
        let q: Vec<f64> = (0..b * c).map(|i| q_seed[i % q_seed.len()] * (1.0 + i as f64 * 0.01)).collect();
        let pt = Tensor::new(vec![b, c], p.clone()).unwrap();
        let kl = value(|g| { let v = g.constant(&[b, c], q)?; losses::kl_divergence(g, &pt, v) });
        prop_assert!(kl >= -1e-12, "{kl}");
        let self_kl = value(|g| {
            let logits: Vec<f64> = p.iter().map(|x| x.ln()).collect();
            let v = g.constant(&[b, c], logits)?;
            losses::kl_divergence(g, &pt, v)
        });
        prop_assert!(self_kl.abs() < 1e-9);
    }

    #[test]
    fn ce_is_nonnegative_and_shift_invariant((b, c, data) in logits_strategy(), shift in -30.0f64..30.0) {
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let shifted: Vec<f64> = data.iter().map(|x| x + shift).collect();
        let a = value(|g| { let v = g.constant(&[b, c], data)?; losses::cross_entropy(g, v, &labels) });
        let s = value(|g| { let v = g.constant(&[b, c], shifted)?; losses::cross_entropy(g, v, &labels) });
        prop_assert!(a >= 0.0);
        prop_assert!((a - s).abs() < 1e-9);
    }

    #[test]
    fn weight_map_is_bounded_and_monotone(d in 0.0f64..40.0, extra in 0.0f64..10.0, sigma in 0.5f64..10.0, beta0 in 0.0f64..20.0) {
        let params = WeightMapParams { beta0, sigma, class_balance: vec![0.5, 2.0] };
        let near = losses::weight_map(&[1], &[d / 2.0], &[d / 2.0], &params).unwrap()[0];
        let far = losses::weight_map(&[1], &[(d + extra) / 2.0], &[(d + extra) / 2.0], &params).unwrap()[0];
        prop_assert!(near >= 2.0 && near <= 2.0 + beta0);
        prop_assert!(far <= near);
    }

    #[test]
    fn fedavg_is_order_free_and_bounded(
        rows in proptest::collection::vec((proptest::collection::vec(-1e3f64..1e3, 5), 1u64..1000), 1..8),
        rot in 0usize..8,
    ) {
        let ups: Vec<Upload> = rows.iter().enumerate().map(|(i, (v, w))| Upload {
            client_id: i, params: ParamVector::flat(v.clone()), weight: *w,
        }).collect();
        let mut rotated = ups.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        let a = fedavg_aggregate(&ups).unwrap();
        let b = fedavg_aggregate(&rotated).unwrap();
        prop_assert_eq!(&a, &b);
        let total: f64 = rows.iter().map(|r| r.1 as f64).sum();
        for j in 0..5 {
            let lo = rows.iter().map(|r| r.0[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.0[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.values[j] >= lo - 1e-9 && a.values[j] <= hi + 1e-9);
            let direct: f64 = rows.iter().map(|r| r.1 as f64 * r.0[j]).sum::<f64>() / total;
            prop_assert!((a.values[j] - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn partition_is_disjoint_and_sized(sizes in proptest::collection::vec((1usize..40, 1usize..15), 1..5), alpha in 0.05f64..5.0, seed in 0u64..1000) {
        let pool = make_classification(&ClassificationSpec { seed, classes: 5, dim: 3, size: 500, spread: 1.0, modes: 1 }).unwrap();
        let plan = PartitionPlan { clients: sizes.iter().map(|&(train, test)| ClientPlan { train, test, tilt: None }).collect() };
        let shards = partition(&pool, &plan, alpha, seed).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (s, &(train, test)) in shards.iter().zip(&sizes) {
            prop_assert_eq!(s.train.len(), train);
            prop_assert_eq!(s.test.len(), test);
            for id in s.train.ids.iter().chain(&s.test.ids) {
                prop_assert!(seen.insert(*id));
            }
        }
    }
}

#[test]
fn dataset_dump_round_trip() {
    let ds = make_classification(&ClassificationSpec {
        seed: 3,
        classes: 4,
        dim: 6,
        size: 50,
        spread: 1.0,
        modes: 2,
    })
    .unwrap();
    let mut buf = Vec::new();
    dataset::dump(&ds, 3, &mut buf).unwrap();
    let (back, header) = dataset::load(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(header.seed, 3);
    assert_eq!(header.shape, vec![50, 6]);
}

#[test]
fn checkpoint_round_trip() {
    let net = Network::build(&ModelSpec::mlp(&[5, 7, 3]).with_public_head(4), 11).unwrap();
    let mut buf = Vec::new();
    net.flatten_all().write_checkpoint(&mut buf).unwrap();
    let back = ParamVector::read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, net.flatten_all());
    let mut other = Network::build(&ModelSpec::mlp(&[5, 7, 3]).with_public_head(4), 12).unwrap();
    other.load_params(&back).unwrap();
    assert_eq!(other.flatten_all(), net.flatten_all());
}

#[test]
fn oracle_cache_round_trip_and_single_evaluation() {
    let oracles: Vec<OracleModel> = (0..2)
        .map(|m| OracleModel::new(format!("o{m}"), Network::build(&ModelSpec::mlp(&[4, 6, 3]), m).unwrap()))
        .collect();
    let inputs = Tensor::new(vec![10, 4], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let ids: Vec<u64> = (100..110).collect();
    let mut cache = OracleCache::warm_up(&oracles, &ids, &inputs, 3).unwrap();
    cache.fill(&oracles, &ids, &inputs).unwrap();
    assert!(oracles.iter().all(|o| o.evaluations() == 10));
    assert_eq!(cache.total_queries(), 20);

    let mut buf = Vec::new();
    cache.write_to(&mut buf).unwrap();
    let back = OracleCache::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, cache);
    let batch = back.get_distributions(&[103, 107]).unwrap();
    assert_eq!(batch.dists.shape(), &[2, 2, 3]);
    for row in batch.dists.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(back.get_distributions(&[999]).is_err());

    buf.truncate(buf.len() / 2);
    assert!(OracleCache::read_from(&mut buf.as_slice()).is_err());
}
