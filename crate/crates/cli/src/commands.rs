use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use collision_sentinel::balance::{solve_balance, verify_solution, BalanceInstance, PairStats};
use collision_sentinel::bench::{
    self, load_ensemble, run_experiment, subsample_imbalanced, write_checkpoints, write_reports,
    write_scores, ExperimentConfig, Imbalance, TableRow,
};
use collision_sentinel::dataset::{read_dataset, write_dataset, Sample};
use collision_sentinel::gmm::score_dataset_baseline;
use collision_sentinel::metrics::{self, build_report};
use collision_sentinel::model::{Arch, Features, Model};
use collision_sentinel::rng::derive_seed;
use collision_sentinel::scenario::{generate_dataset, split_sequences};
use collision_sentinel::training::{predict_ensemble_batch, train_ensemble, AlphaSetting};
use collision_sentinel::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{CliConfig, ConfigError};
use crate::{BalanceArgs, BaselineArgs, BenchArgs, EvalArgs, GenDataArgs, ReportArgs, TrainArgs};

/// Validates and prints the config a command is about to run with.
fn show(cfg: &CliConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.seed.is_none() {
        println!("# no master seed given; using the preset's named seeds");
    }
    println!("# effective config");
    print!("{}", cfg.to_toml()?);
    println!();
    Ok(())
}

fn positives(samples: &[Sample]) -> usize {
    samples.iter().filter(|s| s.label == 1).count()
}

fn fraction(samples: &[Sample]) -> f64 {
    positives(samples) as f64 / samples.len().max(1) as f64
}

fn features(samples: &[Sample]) -> Vec<Features> {
    samples.iter().map(Features::from_sample).collect()
}

pub fn gen_data(cfg: &mut CliConfig, a: &GenDataArgs) -> Result<()> {
    if let Some(n) = a.scenes_per_kind {
        cfg.experiment.gen.scenes_per_kind = n;
    }
    if let Some(f) = a.imbalanced {
        cfg.experiment.imbalance = Imbalance::Imbalanced {
            positive_fraction: f,
        };
    }
    if a.natural {
        cfg.experiment.imbalance = Imbalance::Natural;
    }
    show(cfg)?;
    let e = &cfg.experiment;
    let mut samples = generate_dataset(&e.gen, e.projection_seed)?;
    let natural = fraction(&samples);
    if let Some(f) = e.imbalance.positive_fraction() {
        samples = subsample_imbalanced(samples, f, derive_seed(e.subsample_seed, &[2]))?;
    }
    write_dataset(e.gen.dims(), &samples, &a.out)?;
    let sequences: BTreeSet<u64> = samples.iter().map(|s| s.sequence_id).collect();
    println!(
        "wrote {} samples from {} sequences to {}",
        samples.len(),
        sequences.len(),
        a.out.display()
    );
    println!("generated positive fraction {natural:.4}");
    println!(
        "positives {} / {}  positive fraction {:.4}",
        positives(&samples),
        samples.len(),
        fraction(&samples)
    );
    Ok(())
}

pub fn baseline(cfg: &mut CliConfig, a: &BaselineArgs) -> Result<()> {
    if let Some(s) = a.sigma0 {
        cfg.experiment.baseline.sigma0 = s;
    }
    if a.log {
        cfg.experiment.baseline.use_log = true;
    }
    show(cfg)?;
    let (manifest, samples) = read_dataset(&a.dataset)?;
    let scores = score_dataset_baseline(&samples, manifest.dims, &cfg.experiment.baseline)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let report = build_report(&scores, &labels)?;
    write_scores(&a.out.join("scores.csv"), &samples, &scores)?;
    metrics::write_report_dir(&a.out, bench::BASELINE, &report)?;
    println!(
        "baseline on {} samples: AUROC {:.4}  AP {:.4}",
        samples.len(),
        report.auroc,
        report.ap
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Split {
    train: Vec<u64>,
    test: Vec<u64>,
}

pub fn train(cfg: &mut CliConfig, a: &TrainArgs) -> Result<()> {
    let arch = Arch::parse(&a.arch).ok_or_else(|| {
        ConfigError(format!(
            "unknown --arch `{}` (expected catplan or mlp)",
            a.arch
        ))
    })?;
    let t = &mut cfg.experiment.train;
    if let Some(n) = a.epochs {
        t.epochs = n;
    }
    if let Some(n) = a.bags {
        t.bagging.n_bags = n;
    }
    if let Some(s) = &a.alpha {
        t.focal.alpha = s.parse::<AlphaSetting>().map_err(ConfigError)?;
    }
    if let Some(m) = a.mixup {
        t.alpha_m = m;
    }
    show(cfg)?;
    let e = &cfg.experiment;

    let (manifest, samples) = read_dataset(&a.dataset)?;
    check_dims(e, &manifest.dims)?;
    let ids: BTreeSet<u64> = samples.iter().map(|s| s.sequence_id).collect();
    let (train_ids, test_ids) = split_sequences(&ids, e.split_ratio, e.split_seed)?;
    let train: Vec<Sample> = samples
        .into_iter()
        .filter(|s| train_ids.contains(&s.sequence_id))
        .collect();
    let split = Split {
        train: train_ids.into_iter().collect(),
        test: test_ids.into_iter().collect(),
    };
    metrics::write_json(&a.out.join("split.json"), &split)?;
    metrics::write_json(&a.out.join("config.snapshot"), e)?;
    println!(
        "training {} on {} samples ({} positive) from {} sequences",
        arch.name(),
        train.len(),
        positives(&train),
        split.train.len()
    );

    let model = Model::new(arch, e.hyper)?;
    let (focal, outcomes) = train_ensemble(&model, &features(&train), &e.train)?;
    println!("focal alpha {:.6}  gamma {}", focal.alpha, focal.gamma);
    for (k, o) in outcomes.iter().enumerate() {
        if let Some(last) = o.curve.last() {
            println!("bag {k}: final epoch loss {last:.6}");
        }
    }
    let members: Vec<(Vec<f64>, Vec<f64>)> =
        outcomes.into_iter().map(|o| (o.params, o.curve)).collect();
    let dir = a.out.join("models").join(arch.name());
    write_checkpoints(&dir, arch, e.hyper, e.train.seed, &members)?;
    println!("wrote {} checkpoint(s) to {}", members.len(), dir.display());
    Ok(())
}

fn check_dims(e: &ExperimentConfig, dims: &collision_sentinel::dataset::Dims) -> Result<()> {
    if dims.d != e.hyper.d || dims.modes != e.hyper.n_modes {
        return Err(CoreError::Dims(format!(
            "dataset has d = {}, modes = {} but the model expects d = {}, modes = {}",
            dims.d, dims.modes, e.hyper.d, e.hyper.n_modes
        ))
        .into());
    }
    Ok(())
}

pub fn eval(cfg: &mut CliConfig, a: &EvalArgs) -> Result<()> {
    show(cfg)?;
    let models_dir = a.run.join("models");
    let names: Vec<&str> = [bench::MLP, bench::CATPLAN, bench::CATPLAN_SINGLE]
        .into_iter()
        .filter(|n| models_dir.join(n).is_dir())
        .collect();
    if names.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "no checkpoints under {}",
            models_dir.display()
        ))
        .into());
    }
    // load everything first so a broken run fails before any file is written
    let mut ensembles = Vec::new();
    for name in &names {
        ensembles.push((*name, load_ensemble(&models_dir.join(name))?));
    }

    let dataset = a
        .dataset
        .clone()
        .unwrap_or_else(|| a.run.join("dataset").join("test"));
    let (manifest, mut samples) = read_dataset(&dataset)?;
    let split_path = a.run.join("split.json");
    if split_path.exists() {
        let text =
            std::fs::read_to_string(&split_path).map_err(|e| CoreError::io(&split_path, e))?;
        let split: Split = serde_json::from_str(&text).map_err(|e| CoreError::Corrupt {
            path: split_path.clone(),
            reason: e.to_string(),
        })?;
        let test: BTreeSet<u64> = split.test.into_iter().collect();
        samples.retain(|s| test.contains(&s.sequence_id));
    }
    if samples.is_empty() {
        return Err(
            CoreError::InvalidInput(format!("no test samples in {}", dataset.display())).into(),
        );
    }
    println!(
        "evaluating on {} samples ({} positive)",
        samples.len(),
        positives(&samples)
    );

    let scores_dir = a.run.join("scores");
    let baseline = score_dataset_baseline(&samples, manifest.dims, &cfg.experiment.baseline)?;
    write_scores(
        &scores_dir.join(format!("{}.csv", bench::BASELINE)),
        &samples,
        &baseline,
    )?;
    let x = features(&samples);
    for (name, (model, members)) in &ensembles {
        let scores = predict_ensemble_batch(model, members, &x)
            .with_context(|| format!("scoring {name}"))?;
        write_scores(&scores_dir.join(format!("{name}.csv")), &samples, &scores)?;
    }
    let (table, _) = write_reports(&a.run)?;
    print!("{}", table.to_text());
    Ok(())
}

fn read_stats(path: &Path) -> Result<Vec<PairStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let bad = |line: usize, what: &str| CoreError::Corrupt {
        path: path.to_path_buf(),
        reason: format!("line {line}: {what}"),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.split(',').map(str::trim).eq(["id", "c", "t"]) => {}
        _ => return Err(bad(1, "expected header `id,c,t`").into()),
    }
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, c, t] = cols[..] else {
            return Err(bad(i + 1, "expected 3 columns").into());
        };
        pairs.push(PairStats {
            id: id.to_string(),
            c: c.parse().map_err(|_| bad(i + 1, "c is not a number"))?,
            t: t.parse().map_err(|_| bad(i + 1, "t is not a number"))?,
        });
    }
    Ok(pairs)
}

pub fn balance(cfg: &mut CliConfig, a: &BalanceArgs) -> Result<()> {
    let b = &mut cfg.balance;
    if let Some(v) = a.min_runs {
        b.min_runs = v;
    }
    if let Some(v) = a.max_total_runs {
        b.max_total_runs = v;
    }
    if let Some(v) = a.rate_lo {
        b.rate_lo = v;
    }
    if let Some(v) = a.rate_hi {
        b.rate_hi = v;
    }
    show(cfg)?;
    let b = &cfg.balance;
    let instance = BalanceInstance {
        pairs: read_stats(&a.stats)?,
        min_runs: b.min_runs,
        max_total_runs: b.max_total_runs,
        rate_lo: b.rate_lo,
        rate_hi: b.rate_hi,
    };
    let sol = solve_balance(&instance)?;
    let violations = verify_solution(&instance, &sol);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        anyhow::bail!("solver returned an invalid plan: {}", list.join("; "));
    }
    let mut plan = String::from("pair  runs\n");
    for (id, r) in sol.ids.iter().zip(&sol.r) {
        writeln!(plan, "{id}  {r}").unwrap();
    }
    print!("{plan}");
    println!(
        "D={}  total_runs={}  achieved_rate={:.6}",
        sol.d,
        sol.total_runs(),
        sol.achieved_rate
    );
    metrics::write_json(&a.out.join("balance.json"), &sol.to_json())?;
    Ok(())
}

pub fn report(cfg: &mut CliConfig, a: &ReportArgs) -> Result<()> {
    show(cfg)?;
    let (table, _) = write_reports(&a.run)?;
    print!("{}", table.to_text());
    Ok(())
}

fn sweep_csv(key: &str, rows: &[(String, TableRow)]) -> String {
    let mut out = format!("{key},auroc,ap,pr30,pr50,pr70,pr100\n");
    for (v, r) in rows {
        writeln!(
            out,
            "{v},{},{},{},{},{},{}",
            r.auroc, r.ap, r.pr30, r.pr50, r.pr70, r.pr100
        )
        .unwrap();
    }
    out
}

fn catplan_row(e: &ExperimentConfig, dir: &Path) -> Result<TableRow> {
    let result = run_experiment(e, dir)?;
    result
        .table
        .row(bench::CATPLAN)
        .cloned()
        .ok_or_else(|| anyhow::anyhow!("sweep run in {} produced no catplan row", dir.display()))
}

pub fn bench(cfg: &mut CliConfig, a: &BenchArgs) -> Result<()> {
    if let Some(f) = a.imbalanced {
        cfg.experiment.imbalance = Imbalance::Imbalanced {
            positive_fraction: f,
        };
    }
    if a.sweep_bags.contains(&0) {
        return Err(ConfigError("--sweep-bags values must be >= 1".into()).into());
    }
    show(cfg)?;
    let e = &cfg.experiment;
    let result = run_experiment(e, &a.out)?;
    println!(
        "train {} samples ({:.3} positive), test {} samples ({:.3} positive)",
        result.n_train,
        result.train_positive_fraction,
        result.n_test,
        result.test_positive_fraction
    );
    print!("{}", result.table.to_text());

    // sweeps train CATPlan alone, one run directory per value
    let single = ExperimentConfig {
        mlp: false,
        ablation: false,
        ..e.clone()
    };
    if !a.sweep_bags.is_empty() {
        let mut rows = Vec::new();
        for &n in &a.sweep_bags {
            let mut s = single.clone();
            s.train.bagging.n_bags = n;
            let row = catplan_row(&s, &a.out.join("sweeps").join(format!("bags_{n}")))?;
            println!("n_bags {n}: AP {:.4}", row.ap);
            rows.push((n.to_string(), row));
        }
        metrics::write_file(
            &a.out.join("sweeps").join("bags.csv"),
            sweep_csv("n_bags", &rows).as_bytes(),
        )?;
    }
    if !a.sweep_mixup.is_empty() {
        let mut rows = Vec::new();
        for &m in &a.sweep_mixup {
            let mut s = single.clone();
            s.train.alpha_m = m;
            let row = catplan_row(&s, &a.out.join("sweeps").join(format!("mixup_{m}")))?;
            println!("alpha_m {m}: AP {:.4}", row.ap);
            rows.push((m.to_string(), row));
        }
        metrics::write_file(
            &a.out.join("sweeps").join("mixup.csv"),
            sweep_csv("alpha_m", &rows).as_bytes(),
        )?;
    }
    Ok(())
}
