use std::collections::BTreeSet;

use collision_sentinel::balance::{solve_balance, verify_solution, BalanceInstance, PairStats};
use collision_sentinel::bench::{pca_projection_2d, subsample_imbalanced};
use collision_sentinel::dataset::{read_dataset, write_dataset, Dims, Sample};
use collision_sentinel::gmm::{collision_risk, GmmParams};
use collision_sentinel::metrics::{average_precision, build_report, precision_at_recall, roc_auc};
use collision_sentinel::model::{Arch, Features, Model, ModelHyper};
use collision_sentinel::scenario::{
    embed_scene, generate_dataset, generate_scene, scene_label, split_dataset, AgentForecast,
    GenConfig, QueryProjection, ScenarioKind,
};
use collision_sentinel::training::{make_bags, mixup_pair, predict_ensemble};
use proptest::prelude::*;

const DIMS: Dims = Dims {
    horizon: 2,
    agents: 2,
    modes: 2,
    d: 3,
};

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<f32>().prop_filter("finite", |v| v.is_finite())
}

fn sample_strategy() -> impl Strategy<Value = Sample> {
    let n = DIMS.floats_per_sample();
    let masks = prop::collection::vec(prop::bool::ANY, DIMS.mask_len());
    (
        any::<u64>(),
        any::<u64>(),
        prop_oneof![Just(0.0), 1e-9f64..1e6],
        prop::collection::vec(finite_f32(), n),
        masks,
    )
        .prop_map(|(id, seq, loss, floats, masks)| {
            let mut s = Sample::zeros(DIMS, id, seq);
            s.label = u8::from(loss > 0.0);
            s.collision_loss = loss;
            let mut it = floats.into_iter();
            for t in [
                &mut s.h_plan,
                &mut s.h_motion,
                &mut s.plan,
                &mut s.motion,
                &mut s.mode_weights,
                &mut s.agent_mask,
            ] {
                for v in t.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
            for (m, on) in s.agent_mask.iter_mut().zip(masks) {
                *m = if on { 1.0 } else { 0.0 };
            }
            s
        })
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..12).prop_map(|v| v as f64 / 12.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut y)| {
                y[0] = 1;
                y[1] = 0;
                (s, y)
            })
    })
}

fn oracle_auc(s: &[f64], y: &[u8]) -> f64 {
    let (mut num, mut np, mut nn) = (0.0, 0.0, 0.0);
    for i in 0..s.len() {
        if y[i] == 1 {
            np += 1.0;
        } else {
            nn += 1.0;
        }
    }
    for i in (0..s.len()).filter(|&i| y[i] == 1) {
        for j in (0..s.len()).filter(|&j| y[j] == 0) {
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / (np * nn)
}

fn spread(r: &[u64]) -> u64 {
    r.iter().max().unwrap() - r.iter().min().unwrap()
}

fn brute_force(inst: &BalanceInstance) -> Option<(u64, u64)> {
    let n = inst.pairs.len();
    let mut best: Option<(u64, u64)> = None;
    let mut r = vec![inst.min_runs; n];
    loop {
        if inst.is_feasible(&r) {
            let key = (spread(&r), u64::MAX - r.iter().sum::<u64>());
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        let mut i = n;
        loop {
            if i == 0 {
                return best.map(|(d, neg)| (d, u64::MAX - neg));
            }
            i -= 1;
            if r[i] < inst.max_total_runs {
                r[i] += 1;
                break;
            }
            r[i] = inst.min_runs;
        }
    }
}

fn instance_strategy() -> impl Strategy<Value = BalanceInstance> {
    (
        prop::collection::vec((1u64..=10, 0.0f64..=1.0), 1..=3),
        1u64..=3,
        4u64..=14,
        0.0f64..0.7,
        0.0f64..0.4,
    )
        .prop_map(|(raw, min_runs, max_total, lo, width)| BalanceInstance {
            pairs: raw
                .into_iter()
                .enumerate()
                .map(|(i, (t, frac))| PairStats {
                    id: format!("p{i}"),
                    c: (frac * t as f64).round(),
                    t: t as f64,
                })
                .collect(),
            min_runs,
            max_total_runs: max_total,
            rate_lo: lo,
            rate_hi: (lo + width).min(1.0),
        })
}

fn forecast_strategy(t: usize, m: usize) -> impl Strategy<Value = AgentForecast> {
    (
        prop::collection::vec(
            prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0).prop_map(|(x, y)| [x, y]), t),
            m,
        ),
        prop::collection::vec(0.01f64..1.0, m),
    )
        .prop_map(|(modes, raw)| {
            let sum: f64 = raw.iter().sum();
            AgentForecast {
                modes,
                weights: raw.iter().map(|w| w / sum).collect(),
            }
        })
}

fn tiny_hyper() -> ModelHyper {
    ModelHyper {
        d: 8,
        n_heads: 2,
        n_layers: 1,
        mlp_hidden: 6,
        n_modes: 2,
    }
}

fn features_strategy(n_agents: usize) -> impl Strategy<Value = Features> {
    let h = tiny_hyper();
    (
        prop::collection::vec(-1.0f64..1.0, h.d),
        prop::collection::vec(-1.0f64..1.0, n_agents * h.n_modes * h.d),
        prop::collection::vec(prop::bool::ANY, n_agents),
        0.0f64..=1.0,
    )
        .prop_map(|(h_plan, h_motion, mask, target)| Features {
            h_plan,
            h_motion,
            mask: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            target,
        })
}

fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        scenes_per_kind: 12,
        sequences_per_kind: [2, 2, 3],
        ..GenConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_round_trip_is_bitwise(samples in prop::collection::vec(sample_strategy(), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("d");
        write_dataset(DIMS, &samples, &base).unwrap();
        let (_, back) = read_dataset(&base).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            prop_assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn non_finite_values_are_rejected(s in sample_strategy(), pick in 0usize..3, at in 0usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = s;
        s.h_plan[at] = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY][pick];
        prop_assert!(write_dataset(DIMS, &[s], &dir.path().join("d")).is_err());
    }

    #[test]
    fn labels_agree_with_the_oracle(seed in 0u64..1000, kind in 0usize..3, index in 0usize..12) {
        let cfg = small_gen(seed);
        let scene = generate_scene(&cfg, ScenarioKind::ALL[kind], index).unwrap();
        let sample = embed_scene(&scene, &cfg, &QueryProjection::new(cfg.d, cfg.horizon, seed)).unwrap();
        let (label, loss) = scene_label(&scene, cfg.safety_distance).unwrap();
        prop_assert_eq!(sample.label, label);
        prop_assert_eq!(sample.collision_loss, loss);
        prop_assert_eq!(sample.label == 1, sample.collision_loss > 0.0);
    }

    #[test]
    fn split_never_shares_a_sequence(seqs in prop::collection::vec(0u64..20, 2..80), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let mut seqs = seqs;
        seqs[1] = seqs[0] + 1;
        let samples: Vec<Sample> = seqs.iter().enumerate().map(|(i, &q)| Sample::zeros(DIMS, i as u64, q)).collect();
        let (train, test) = split_dataset(samples, ratio, seed).unwrap();
        let a: BTreeSet<u64> = train.iter().map(|s| s.sequence_id).collect();
        let b: BTreeSet<u64> = test.iter().map(|s| s.sequence_id).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert!(!a.is_empty() && !b.is_empty());
        prop_assert_eq!(train.len() + test.len(), seqs.len());
    }

    #[test]
    fn gmm_risk_matches_naive_max(
        plan in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0).prop_map(|(x, y)| [x, y]), 3),
        agents in prop::collection::vec(forecast_strategy(3, 3), 1..4),
        mask in prop::collection::vec(prop::bool::ANY, 3),
        sigma0 in 0.2f64..5.0,
    ) {
        let mask = &mask[..agents.len()];
        let params = GmmParams { sigma0, use_log: false };
        let got = collision_risk(&plan, &agents, mask, &params).unwrap();
        let mut want = 0.0f64;
        for (a, _) in agents.iter().zip(mask).filter(|(_, &m)| m) {
            for (k, x) in plan.iter().enumerate() {
                let s = (k + 1) as f64 * sigma0;
                let d: f64 = a.modes.iter().zip(&a.weights).map(|(m, w)| {
                    let (dx, dy) = (x[0] - m[k][0], x[1] - m[k][1]);
                    w * (-(dx * dx + dy * dy) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s)
                }).sum();
                want = want.max(d);
            }
        }
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "{} vs {}", got, want);

        let log = collision_risk(&plan, &agents, mask, &GmmParams { sigma0, use_log: true }).unwrap();
        if got > 1e-200 {
            prop_assert!((log - got.ln()).abs() <= 1e-9 * (1.0 + got.ln().abs()));
        }
        if !mask.iter().any(|&m| m) {
            prop_assert_eq!(got, 0.0);
        }
    }

    #[test]
    fn covariance_grows_linearly(sigma0 in 1e-3f64..10.0, k in 1usize..20) {
        let p = GmmParams { sigma0, use_log: false };
        prop_assert_eq!(p.sigma_at(2), 2.0 * p.sigma_at(1));
        prop_assert!((p.sigma_at(k) - k as f64 * p.sigma_at(1)).abs() <= 1e-12 * p.sigma_at(k));
    }

    #[test]
    fn catplan_ignores_agent_order(x in features_strategy(4), seed in 0u64..50, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let model = Model::new(Arch::CatPlan, tiny_hyper()).unwrap();
        let params = model.init(seed);
        let flat = tiny_hyper().n_modes * tiny_hyper().d;
        let y = Features {
            h_motion: perm.iter().flat_map(|&a| x.h_motion[a * flat..(a + 1) * flat].to_vec()).collect(),
            mask: perm.iter().map(|&a| x.mask[a]).collect(),
            ..x.clone()
        };
        let a = model.forward(&params, &x).unwrap();
        let b = model.forward(&params, &y).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn masked_agents_have_no_effect(x in features_strategy(3), noise in prop::collection::vec(-5.0f64..5.0, 3 * 16), seed in 0u64..50) {
        let model = Model::new(Arch::CatPlan, tiny_hyper()).unwrap();
        let params = model.init(seed);
        let flat = 16;
        let mut y = x.clone();
        for a in (0..3).filter(|&a| x.mask[a] == 0.0) {
            y.h_motion[a * flat..(a + 1) * flat].copy_from_slice(&noise[a * flat..(a + 1) * flat]);
        }
        prop_assert_eq!(model.forward(&params, &x).unwrap(), model.forward(&params, &y).unwrap());
    }

    #[test]
    fn mixup_endpoints_are_exact(a in features_strategy(2), b in features_strategy(2)) {
        let one = mixup_pair(&a, &b, 1.0).unwrap();
        let zero = mixup_pair(&a, &b, 0.0).unwrap();
        prop_assert_eq!(&one.h_plan, &a.h_plan);
        prop_assert_eq!(&one.h_motion, &a.h_motion);
        prop_assert_eq!(one.target, a.target);
        prop_assert_eq!(&zero.h_plan, &b.h_plan);
        prop_assert_eq!(&zero.h_motion, &b.h_motion);
        prop_assert_eq!(zero.target, b.target);
    }

    #[test]
    fn bags_partition_the_negatives(n_pos in 0usize..20, n_neg in 1usize..200, n in 1usize..12, seed in any::<u64>()) {
        prop_assume!(n <= n_neg);
        let pos: Vec<usize> = (0..n_pos).collect();
        let neg: Vec<usize> = (1000..1000 + n_neg).collect();
        let bags = make_bags(&pos, &neg, n, seed).unwrap();
        prop_assert_eq!(bags.len(), n);
        let mut seen = BTreeSet::new();
        let sizes: Vec<usize> = bags.iter().map(|b| {
            prop_assert_eq!(&b[..n_pos], &pos[..]);
            for &v in &b[n_pos..] {
                prop_assert!(seen.insert(v), "negative {} in two bags", v);
            }
            Ok(b.len() - n_pos)
        }).collect::<Result<_, _>>()?;
        prop_assert_eq!(seen.len(), n_neg);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn ensemble_mean_is_a_probability(x in features_strategy(2), seeds in prop::collection::vec(0u64..1000, 1..5)) {
        let model = Model::new(Arch::CatPlan, tiny_hyper()).unwrap();
        let members: Vec<Vec<f64>> = seeds.iter().map(|&s| model.init(s)).collect();
        let p = predict_ensemble(&model, &members, &x).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        let mean = members.iter().map(|m| model.forward(m, &x).unwrap()).sum::<f64>() / members.len() as f64;
        prop_assert!((p - mean).abs() <= 1e-12);
    }

    #[test]
    fn auroc_matches_pair_count((s, y) in scores_and_labels()) {
        prop_assert!((roc_auc(&s, &y).unwrap() - oracle_auc(&s, &y)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_survive_monotone_maps((s, y) in scores_and_labels(), shift in -3.0f64..3.0, gain in 0.1f64..10.0) {
        let t: Vec<f64> = s.iter().map(|v| (gain * v + shift).exp()).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
        prop_assert_eq!(average_precision(&s, &y).unwrap(), average_precision(&t, &y).unwrap());
        for r in [0.5, 0.9, 1.0] {
            prop_assert_eq!(precision_at_recall(&s, &y, r).unwrap(), precision_at_recall(&t, &y, r).unwrap());
        }
    }

    #[test]
    fn metrics_lie_in_unit_interval((s, y) in scores_and_labels()) {
        let r = build_report(&s, &y).unwrap();
        for v in [r.auroc, r.ap] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for r in [0.1, 0.5, 0.9, 1.0] {
            prop_assert!((0.0..=1.0).contains(&precision_at_recall(&s, &y, r).unwrap()));
        }
    }

    #[test]
    fn full_recall_precision_is_prevalence((s, y) in scores_and_labels()) {
        // A positive at the strict minimum forces the threshold that admits everything.
        let mut s = s;
        s[0] = -1.0;
        let prevalence = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
        prop_assert!((precision_at_recall(&s, &y, 1.0).unwrap() - prevalence).abs() <= 1e-12);
    }

    #[test]
    fn balance_matches_brute_force(inst in instance_strategy()) {
        match (solve_balance(&inst), brute_force(&inst)) {
            (Ok(sol), Some((d, total))) => {
                prop_assert_eq!(sol.d, d);
                prop_assert_eq!(sol.total_runs(), total);
                prop_assert!(verify_solution(&inst, &sol).is_empty());
            }
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "solver {:?} vs brute force {:?}", got.map(|s| s.r), want),
        }
    }

    #[test]
    fn wider_rate_window_never_hurts(inst in instance_strategy(), lo_cut in 0.0f64..0.3, hi_add in 0.0f64..0.3) {
        let wide = BalanceInstance {
            rate_lo: (inst.rate_lo - lo_cut).max(0.0),
            rate_hi: (inst.rate_hi + hi_add).min(1.0),
            ..inst.clone()
        };
        if let Ok(narrow) = solve_balance(&inst) {
            let wide = solve_balance(&wide).unwrap();
            prop_assert!(wide.d <= narrow.d);
        }
    }

    #[test]
    fn subsampling_hits_the_fraction(n_pos in 20usize..200, n_neg in 20usize..200, fraction in 0.05f64..0.5, seed in any::<u64>()) {
        let samples: Vec<Sample> = (0..n_pos + n_neg).map(|i| {
            let mut s = Sample::zeros(DIMS, i as u64, 0);
            s.label = u8::from(i < n_pos);
            s
        }).collect();
        let kept = subsample_imbalanced(samples, fraction, seed).unwrap();
        let pos = kept.iter().filter(|s| s.label == 1).count() as f64;
        let frac = pos / kept.len() as f64;
        // Whole samples only: within one sample of the target, unless a class ran out.
        let limited = pos as usize == n_pos;
        prop_assert!(limited || (frac - fraction).abs() <= 1.0 / kept.len() as f64 + 1e-12, "{} vs {}", frac, fraction);
        prop_assert!(kept.windows(2).all(|w| w[0].id < w[1].id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn generation_is_repeatable(seed in any::<u64>(), projection in any::<u64>()) {
        let cfg = GenConfig { seed, ..small_gen(0) };
        let a = generate_dataset(&cfg, projection).unwrap();
        let b = generate_dataset(&cfg, projection).unwrap();
        prop_assert_eq!(a.len(), b.len());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
    }
}

#[test]
fn pca_recovers_axis_variances() {
    // Points on three axes with spreads 3, 2 and 1: the leading components
    // carry variances in ratio 9 : 4.
    let mut pts = Vec::new();
    for (axis, scale) in [(0, 3.0), (1, 2.0), (2, 1.0)] {
        for v in [-1.0, 1.0] {
            let mut p = vec![0.0; 3];
            p[axis] = v * scale;
            pts.push(p);
        }
    }
    let proj = pca_projection_2d(&pts).unwrap();
    let var = |c: usize| proj.iter().map(|p| p[c] * p[c]).sum::<f64>() / (pts.len() - 1) as f64;
    assert!(
        (var(0) / var(1) - 9.0 / 4.0).abs() < 1e-9,
        "{} {}",
        var(0),
        var(1)
    );
}

#[test]
#[ignore = "fails on this generator: raw 1-NN accuracy is about 0.47, see README"]
fn noise_free_nearest_neighbour_separates_labels() {
    let cfg = GenConfig {
        scenes_per_kind: 100,
        perception_noise_sigma: 0.0,
        miss_rate: 0.0,
        ..GenConfig::default()
    };
    let s = generate_dataset(&cfg, 3).unwrap();
    let feats: Vec<Vec<f64>> = s
        .iter()
        .map(|x| {
            x.h_plan
                .iter()
                .chain(&x.h_motion)
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let (mut hit, mut n) = (0, 0);
    for i in (0..s.len()).step_by(5) {
        let nearest = (0..s.len())
            .filter(|&j| j % 5 != 0 && s[j].sequence_id == s[i].sequence_id)
            .min_by(|&a, &b| {
                let d = |j: usize| {
                    feats[i]
                        .iter()
                        .zip(&feats[j])
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                };
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        n += 1;
        hit += usize::from(s[nearest].label == s[i].label);
    }
    let acc = hit as f64 / n as f64;
    assert!(
        acc >= 0.95,
        "1-NN accuracy {acc:.3} over {n} held-out samples"
    );
}
