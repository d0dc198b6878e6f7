use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::training::FocalConfig;

fn hyper(d: usize, n_heads: usize, n_layers: usize, hidden: usize, n_modes: usize) -> ModelHyper {
    ModelHyper {
        d,
        n_heads,
        n_layers,
        mlp_hidden: hidden,
        n_modes,
    }
}

fn random_features(rng: &mut ChaCha8Rng, h: &ModelHyper, n_agents: usize) -> Features {
    Features {
        h_plan: (0..h.d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        h_motion: (0..n_agents * h.n_modes * h.d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        mask: (0..n_agents)
            .map(|a| {
                if a == 0 || rng.random_bool(0.7) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
        target: rng.random_range(0.0..1.0),
    }
}

fn group<'a>(model: &Model, params: &'a [f64], name: &str) -> (&'a [f64], usize, usize) {
    let (_, slot) = model
        .layout()
        .groups()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("no group {name}"));
    (&params[slot.range()], slot.rows, slot.cols)
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| (0..cols).map(|j| w[i * cols + j] * x[j]).sum())
        .collect()
}

fn naive_ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// Loop-by-loop CATPlan evaluation, independent of the ndarray code path.
fn naive_catplan_logit(model: &Model, p: &[f64], x: &Features) -> f64 {
    let h = *model.hyper();
    let flat = h.n_modes * h.d;
    let (pw, pr, pc) = group(model, p, "proj.w");
    let (pb, _, _) = group(model, p, "proj.b");
    let mut m: Vec<Vec<f64>> = Vec::new();
    for a in 0..x.mask.len() {
        if x.mask[a] > 0.0 {
            let row = matvec(pw, pr, pc, &x.h_motion[a * flat..(a + 1) * flat]);
            m.push(row.iter().zip(pb).map(|(v, b)| (v + b).max(0.0)).collect());
        }
    }
    let dh = h.d / h.n_heads;
    let mut z = x.h_plan.clone();
    for l in 0..h.n_layers {
        let g = |n: &str| group(model, p, &format!("dec{l}.{n}"));
        let u = naive_ln(&z, g("ln1.g").0, g("ln1.b").0);
        let q = matvec(g("attn.w_q").0, h.d, h.d, &u);
        let ks: Vec<Vec<f64>> = m
            .iter()
            .map(|r| matvec(g("attn.w_k").0, h.d, h.d, r))
            .collect();
        let vs: Vec<Vec<f64>> = m
            .iter()
            .map(|r| matvec(g("attn.w_v").0, h.d, h.d, r))
            .collect();
        let mut o = vec![0.0; h.d];
        if !m.is_empty() {
            for head in 0..h.n_heads {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for (a, v) in vs.iter().enumerate() {
                    for i in r.clone() {
                        o[i] += e[a] / tot * v[i];
                    }
                }
            }
        }
        let att = matvec(g("attn.w_o").0, h.d, h.d, &o);
        let z1: Vec<f64> = z.iter().zip(&att).map(|(a, b)| a + b).collect();
        let w = naive_ln(&z1, g("ln2.g").0, g("ln2.b").0);
        let (w1, r1, c1) = g("ff.w1");
        let f1: Vec<f64> = matvec(w1, r1, c1, &w)
            .iter()
            .zip(g("ff.b1").0)
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let (w2, r2, c2) = g("ff.w2");
        let f2 = matvec(w2, r2, c2, &f1);
        z = z1
            .iter()
            .zip(&f2)
            .zip(g("ff.b2").0)
            .map(|((a, b), c)| a + b + c)
            .collect();
    }
    let (hw1, r1, c1) = group(model, p, "head.w1");
    let hid: Vec<f64> = matvec(hw1, r1, c1, &z)
        .iter()
        .zip(group(model, p, "head.b1").0)
        .map(|(a, b)| (a + b).max(0.0))
        .collect();
    let hw2 = group(model, p, "head.w2").0;
    hid.iter().zip(hw2).map(|(a, b)| a * b).sum::<f64>() + group(model, p, "head.b2").0[0]
}

fn zero_groups(model: &Model, params: &mut [f64], prefixes: &[&str]) {
    for (name, slot) in model.layout().groups() {
        if prefixes.iter().any(|p| name.contains(p)) {
            params[slot.range()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn zero_update_weights_give_pure_residual() {
    let h = hyper(8, 2, 1, 5, 2);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let Model::CatPlan(net) = &model else {
        unreachable!()
    };
    let mut params = model.init(1);
    zero_groups(&model, &mut params, &["attn.", "ff."]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_features(&mut rng, &h, 3);
    assert_eq!(net.decode(&params, &x).unwrap().to_vec(), x.h_plan);
}

#[test]
fn project_motion_matches_naive_and_zero_input() {
    let h = hyper(4, 1, 1, 3, 3);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let Model::CatPlan(net) = &model else {
        unreachable!()
    };
    let mut params = model.init(9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_features(&mut rng, &h, 2);
    let out = net.project_motion(&params, &x).unwrap();
    let (w, r, c) = group(&model, &params, "proj.w");
    let b = group(&model, &params, "proj.b").0;
    for a in 0..2 {
        let want = matvec(w, r, c, &x.h_motion[a * 12..(a + 1) * 12]);
        for i in 0..4 {
            assert!((out[[a, i]] - (want[i] + b[i]).max(0.0)).abs() < 1e-14);
        }
    }
    zero_groups(&model, &mut params, &["proj.b"]);
    let zero = Features {
        h_motion: vec![0.0; 24],
        ..x.clone()
    };
    assert!(net
        .project_motion(&params, &zero)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));

    // identity block on the first d flattened entries
    let slot = model
        .layout()
        .groups()
        .find(|(n, _)| *n == "proj.w")
        .unwrap()
        .1;
    params[slot.range()].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..4 {
        params[slot.offset + i * 12 + i] = 1.0;
    }
    let pos = Features {
        h_motion: x.h_motion.iter().map(|v| v.abs()).collect(),
        ..x
    };
    let out = net.project_motion(&params, &pos).unwrap();
    for a in 0..2 {
        for i in 0..4 {
            assert_eq!(out[[a, i]], pos.h_motion[a * 12 + i]);
        }
    }
}

#[test]
fn masked_agents_do_not_matter() {
    let h = hyper(8, 2, 2, 6, 2);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let params = model.init(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut x = random_features(&mut rng, &h, 4);
    x.mask = vec![1.0, 0.0, 1.0, 0.0];
    let base = model.forward(&params, &x).unwrap();
    let flat = 16;
    let mut y = x.clone();
    y.h_motion[flat..2 * flat].iter_mut().for_each(|v| *v = 0.0);
    y.h_motion[3 * flat..].iter_mut().for_each(|v| *v = 7.5);
    assert_eq!(model.forward(&params, &y).unwrap(), base);
}

#[test]
fn all_masked_uses_residual_only() {
    let h = hyper(8, 2, 1, 6, 2);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let params = model.init(5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = random_features(&mut rng, &h, 3);
    x.mask = vec![0.0; 3];
    let p = model.forward(&params, &x).unwrap();
    assert!(p > 0.0 && p < 1.0);
    let naive = naive_catplan_logit(&model, &params, &x);
    assert!((model.logit(&params, &x).unwrap() - naive).abs() < 1e-12);
    let (_, g) = model
        .loss_and_grad(&params, &[x], &FocalConfig::default())
        .unwrap();
    assert!(g.iter().all(|v| v.is_finite()));
}

#[test]
fn hand_set_single_head_attention() {
    // d = 2, one head, two agents with one mode each; identity-ish weights
    // so every intermediate can be written down.
    let h = hyper(2, 1, 1, 2, 1);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let Model::CatPlan(net) = &model else {
        unreachable!()
    };
    let mut p = vec![0.0; model.n_params()];
    let set = |p: &mut Vec<f64>, name: &str, vals: &[f64]| {
        let slot = model.layout().groups().find(|(n, _)| *n == name).unwrap().1;
        p[slot.range()].copy_from_slice(vals);
    };
    set(&mut p, "proj.w", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut p, "dec0.ln1.g", &[1.0, 1.0]);
    set(&mut p, "dec0.ln2.g", &[1.0, 1.0]);
    set(&mut p, "dec0.attn.w_q", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut p, "dec0.attn.w_k", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut p, "dec0.attn.w_v", &[2.0, 0.0, 0.0, 2.0]);
    set(&mut p, "dec0.attn.w_o", &[1.0, 0.0, 0.0, 1.0]);
    let x = Features {
        h_plan: vec![1.0, -1.0],
        h_motion: vec![1.0, 0.0, 0.0, 3.0],
        mask: vec![1.0, 1.0],
        target: 0.0,
    };
    // LN of (1, -1): mean 0, var 1 -> u = (1, -1)/sqrt(1 + 1e-5)
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    let q = [s, -s];
    // keys (1,0), (0,3); scores / sqrt(2)
    let sc = [q[0] / 2f64.sqrt(), -3.0 * s / 2f64.sqrt()];
    let e = [sc[0].exp(), sc[1].exp()];
    let a0 = e[0] / (e[0] + e[1]);
    let o = [2.0 * a0, 6.0 * (1.0 - a0)];
    let z1 = [1.0 + o[0], -1.0 + o[1]];
    // feed-forward weights are zero, so z = z1
    let z = net.decode(&p, &x).unwrap();
    assert!((z[0] - z1[0]).abs() < 1e-12 && (z[1] - z1[1]).abs() < 1e-12);
}

#[test]
fn tiny_network_matches_naive_forward() {
    let h = hyper(4, 1, 1, 3, 1);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let params: Vec<f64> = (0..model.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = random_features(&mut rng, &h, 1);
        let p = model.forward(&params, &x).unwrap();
        let want = 1.0 / (1.0 + (-naive_catplan_logit(&model, &params, &x)).exp());
        assert!((p - want).abs() < 1e-12, "trial {trial}: {p} vs {want}");
    }
    let h = hyper(8, 4, 2, 5, 3);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let params = model.init(3);
    let x = random_features(&mut rng, &h, 5);
    let got = model.logit(&params, &x).unwrap();
    assert!((got - naive_catplan_logit(&model, &params, &x)).abs() < 1e-12);
}

#[test]
fn zero_head_gives_one_half_and_stationary_head() {
    for arch in [Arch::CatPlan, Arch::Mlp] {
        let h = hyper(8, 2, 1, 6, 2);
        let model = Model::new(arch, h).unwrap();
        let mut params = model.init(21);
        zero_groups(&model, &mut params, &["head.", "mlp.w2", "mlp.b2"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = random_features(&mut rng, &h, 3);
        assert_eq!(model.forward(&params, &x).unwrap(), 0.5);
        x.target = 0.5;
        let focal = FocalConfig {
            alpha: 0.5,
            gamma: 2.0,
        };
        let (_, g) = model.loss_and_grad(&params, &[x], &focal).unwrap();
        for name in ["head.w2", "head.b2", "mlp.w2", "mlp.b2"] {
            if let Some((_, slot)) = model.layout().groups().find(|(n, _)| *n == name) {
                assert!(g[slot.range()].iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

fn finite_difference_check(arch: Arch, seed: u64) {
    let h = hyper(8, 2, 2, 6, 2);
    let model = Model::new(arch, h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = model.init(seed).iter().map(|v| v * 2.0).collect();
    let batch: Vec<Features> = (0..5).map(|_| random_features(&mut rng, &h, 3)).collect();
    let focal = FocalConfig {
        alpha: 0.7,
        gamma: 2.0,
    };
    let (_, g) = model.loss_and_grad(&params, &batch, &focal).unwrap();
    let eps = 1e-4;
    for _ in 0..60 {
        let i = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus[i] += eps;
        let mut minus = params.clone();
        minus[i] -= eps;
        let lp = model.loss_and_grad(&plus, &batch, &focal).unwrap().0;
        let lm = model.loss_and_grad(&minus, &batch, &focal).unwrap().0;
        let fd = (lp - lm) / (2.0 * eps);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        assert!(
            err <= 1e-4,
            "{arch:?} param {i}: fd {fd} vs analytic {}",
            g[i]
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    finite_difference_check(Arch::CatPlan, 31);
    finite_difference_check(Arch::Mlp, 32);
}

#[test]
fn duplicated_batch_has_same_mean_gradient() {
    let h = hyper(8, 2, 1, 6, 2);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let params = model.init(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<Features> = (0..7).map(|_| random_features(&mut rng, &h, 3)).collect();
    let doubled: Vec<Features> = batch.iter().flat_map(|x| [x.clone(), x.clone()]).collect();
    let focal = FocalConfig::default();
    let (l1, g1) = model.loss_and_grad(&params, &batch, &focal).unwrap();
    let (l2, g2) = model.loss_and_grad(&params, &doubled, &focal).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn agent_permutation_leaves_output_unchanged() {
    let h = hyper(8, 2, 2, 6, 2);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let params = model.init(8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_features(&mut rng, &h, 4);
    let perm = [2usize, 0, 3, 1];
    let flat = 16;
    let y = Features {
        h_motion: perm
            .iter()
            .flat_map(|&a| x.h_motion[a * flat..(a + 1) * flat].to_vec())
            .collect(),
        mask: perm.iter().map(|&a| x.mask[a]).collect(),
        ..x.clone()
    };
    let a = model.forward(&params, &x).unwrap();
    let b = model.forward(&params, &y).unwrap();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn mlp_ignores_motion_queries() {
    let h = hyper(8, 2, 1, 6, 2);
    let model = Model::new(Arch::Mlp, h).unwrap();
    let params = model.init(8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_features(&mut rng, &h, 4);
    let mut y = x.clone();
    y.h_motion.iter_mut().for_each(|v| *v += 3.0);
    assert_eq!(
        model.forward(&params, &x).unwrap(),
        model.forward(&params, &y).unwrap()
    );
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let h = hyper(8, 2, 1, 6, 2);
    let model = Model::new(Arch::CatPlan, h).unwrap();
    let params = model.init(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<Features> = (0..37).map(|_| random_features(&mut rng, &h, 3)).collect();
    let focal = FocalConfig::default();
    let a = model.loss_and_grad(&params, &batch, &focal).unwrap();
    let b = model.loss_and_grad(&params, &batch, &focal).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a
        .1
        .iter()
        .zip(&b.1)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn hyper_validation() {
    assert!(hyper(6, 4, 1, 3, 1).validate().is_err());
    assert!(hyper(8, 4, 0, 3, 1).validate().is_err());
    assert!(ModelHyper::default().validate().is_ok());
}
