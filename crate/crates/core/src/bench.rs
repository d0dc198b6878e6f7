//! End-to-end comparison driver: generate scenes, split by sequence, score
//! the rule-based baseline, train the MLP and CATPlan ensembles, evaluate
//! everything on the held-out sequences and write a run directory:
//!
//! ```text
//! config.snapshot
//! dataset/{train,test}.manifest.json + .blob
//! models/<model>/bag_<k>.ckpt, models/<model>/loss.csv
//! scores/<model>.csv
//! reports/<model>.json
//! curves/<model>.{roc,pr}.csv, curves/<model>.svg, curves/comparison.svg
//! table.csv, table.txt
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::gmm::{score_dataset_baseline, GmmParams};
use crate::metrics::{self, build_report, EvalReport};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{Arch, Features, Model, ModelHyper};
use crate::rng::{derive_seed, stream};
use crate::scenario::{generate_dataset, split_sequences, GenConfig};
use crate::training::{
    predict_ensemble_batch, train_ensemble, AlphaSetting, BaggingConfig, FocalSettings, TrainConfig,
};

/// Canonical model names, in table order.
pub const BASELINE: &str = "baseline";
pub const MLP: &str = "mlp";
pub const CATPLAN: &str = "catplan";
/// CATPlan with one bag and no mixup.
pub const CATPLAN_SINGLE: &str = "catplan_single";
pub const MODEL_ORDER: [&str; 4] = [BASELINE, MLP, CATPLAN, CATPLAN_SINGLE];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Imbalance {
    /// Keep the generator's natural class balance.
    Natural,
    /// Subsample train and test to this positive fraction.
    Balanced {
        positive_fraction: f64,
    },
    Imbalanced {
        positive_fraction: f64,
    },
}

impl Imbalance {
    pub fn positive_fraction(&self) -> Option<f64> {
        match *self {
            Imbalance::Natural => None,
            Imbalance::Balanced { positive_fraction }
            | Imbalance::Imbalanced { positive_fraction } => Some(positive_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub hyper: ModelHyper,
    pub train: TrainConfig,
    pub baseline: GmmParams,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub projection_seed: u64,
    pub subsample_seed: u64,
    pub imbalance: Imbalance,
    /// Also train the plan-only MLP.
    pub mlp: bool,
    /// Also train CATPlan with a single bag and no mixup.
    pub ablation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::balanced()
    }
}

impl ExperimentConfig {
    /// Roughly even classes, one model per architecture, no mixup.
    pub fn balanced() -> Self {
        Self {
            gen: GenConfig {
                scenes_per_kind: 2000,
                ..GenConfig::default()
            },
            hyper: ModelHyper::default(),
            train: TrainConfig::default(),
            baseline: GmmParams::default(),
            split_ratio: 0.7,
            split_seed: 2,
            projection_seed: 3,
            subsample_seed: 4,
            imbalance: Imbalance::Balanced {
                positive_fraction: 0.46,
            },
            mlp: true,
            ablation: false,
        }
    }

    /// About 8% positives, four bags with the inverse-ratio alpha, mixup.
    pub fn imbalanced() -> Self {
        Self {
            gen: GenConfig {
                scenes_per_kind: 4000,
                ..GenConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                alpha_m: 3.0,
                focal: FocalSettings {
                    alpha: AlphaSetting::Auto,
                    gamma: 2.0,
                },
                bagging: BaggingConfig { n_bags: 4, seed: 5 },
                ..TrainConfig::default()
            },
            imbalance: Imbalance::Imbalanced {
                positive_fraction: 0.08,
            },
            ablation: true,
            ..Self::balanced()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "balanced" => Some(Self::balanced()),
            "imbalanced" => Some(Self::imbalanced()),
            _ => None,
        }
    }

    /// Re-keys every named seed from one master seed. Derived seeds keep
    /// 63 bits so the config stays representable in TOML.
    pub fn reseed(&mut self, master: u64) {
        let key = |k: u64| derive_seed(master, &[k]) >> 1;
        self.gen.seed = key(1);
        self.projection_seed = key(2);
        self.split_seed = key(3);
        self.subsample_seed = key(4);
        self.train.seed = key(5);
        self.train.bagging.seed = key(6);
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.hyper.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        if self.hyper.d != self.gen.d || self.hyper.n_modes != self.gen.n_modes {
            return Err(Error::Config(format!(
                "model (d = {}, n_modes = {}) does not match data (d = {}, n_modes = {})",
                self.hyper.d, self.hyper.n_modes, self.gen.d, self.gen.n_modes
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if let Some(f) = self.imbalance.positive_fraction() {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "positive_fraction must lie in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub auroc: f64,
    pub ap: f64,
    pub pr30: f64,
    pub pr50: f64,
    pub pr70: f64,
    pub pr100: f64,
}

impl TableRow {
    pub fn from_report(name: &str, r: &EvalReport) -> Self {
        let pr = |l: f64| r.pr(l).unwrap_or(f64::NAN);
        Self {
            name: name.to_string(),
            auroc: r.auroc,
            ap: r.ap,
            pr30: pr(0.3),
            pr50: pr(0.5),
            pr70: pr(0.7),
            pr100: pr(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,auroc,ap,pr30,pr50,pr70,pr100\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.name, r.auroc, r.ap, r.pr30, r.pr50, r.pr70, r.pr100
            )
            .unwrap();
        }
        out
    }

    /// Percentages with one decimal, aligned columns.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
            "model", "AUROC", "AP", "Pr30", "Pr50", "Pr70", "Pr100"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<16}{:>8.1}{:>8.1}{:>8.1}{:>8.1}{:>8.1}{:>8.1}",
                r.name,
                100.0 * r.auroc,
                100.0 * r.ap,
                100.0 * r.pr30,
                100.0 * r.pr50,
                100.0 * r.pr70,
                100.0 * r.pr100
            )
            .unwrap();
        }
        out
    }
}

/// Removes positives (or negatives) at random so that the positive fraction
/// is as close to `fraction` as whole samples allow. Order is preserved.
pub fn subsample_imbalanced(samples: Vec<Sample>, fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "positive fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n_pos = samples.iter().filter(|s| s.label == 1).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot reach positive fraction {fraction} from {n_pos} positives and {n_neg} negatives"
        )));
    }
    let current = n_pos as f64 / samples.len() as f64;
    let (drop_label, keep) = if current > fraction {
        (
            1u8,
            (fraction * n_neg as f64 / (1.0 - fraction)).round() as usize,
        )
    } else {
        (
            0u8,
            ((1.0 - fraction) * n_pos as f64 / fraction).round() as usize,
        )
    };
    let mut pool: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label == drop_label)
        .collect();
    if keep == 0 {
        return Err(Error::InvalidInput(format!(
            "positive fraction {fraction} leaves an empty class"
        )));
    }
    if keep >= pool.len() {
        return Ok(samples);
    }
    pool.shuffle(&mut stream(seed, &[0x5ab5]));
    let dropped: BTreeSet<usize> = pool[keep..].iter().copied().collect();
    Ok(samples
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, s)| s)
        .collect())
}

/// Projects rows onto their top two principal directions after centring.
/// Each component's sign is chosen so that its largest-magnitude coordinate
/// is positive.
pub fn pca_projection_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "PCA needs at least 3 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape {
            what: "PCA points",
            expected: dim.to_string(),
            got: "ragged rows".into(),
        });
    }
    let n = points.len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut out = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let proj: Vec<f64> = (0..n).map(|i| x.row(i).dot(&v.transpose())).collect();
        let scale = proj.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        if scale <= 1e-12 * (1.0 + mean.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            continue;
        }
        let big = proj
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][c] = sign * proj[i];
        }
    }
    Ok(out)
}

fn features(samples: &[Sample]) -> Vec<Features> {
    samples.iter().map(Features::from_sample).collect()
}

pub fn write_scores(path: &Path, samples: &[Sample], scores: &[f64]) -> Result<()> {
    let mut out = String::from("id,score,label\n");
    for (s, v) in samples.iter().zip(scores) {
        writeln!(out, "{},{},{}", s.id, v, s.label).unwrap();
    }
    metrics::write_file(path, out.as_bytes())
}

/// Parses a `id,score,label` file.
pub fn read_scores(path: &Path) -> Result<(Vec<u64>, Vec<f64>, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |line: usize| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("bad scores row at line {line}"),
    };
    let (mut ids, mut scores, mut labels) = (vec![], vec![], vec![]);
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut it = line.split(',');
        let (Some(id), Some(score), Some(label), None) =
            (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(corrupt(i + 1));
        };
        ids.push(id.parse().map_err(|_| corrupt(i + 1))?);
        scores.push(score.parse().map_err(|_| corrupt(i + 1))?);
        labels.push(label.parse().map_err(|_| corrupt(i + 1))?);
    }
    Ok((ids, scores, labels))
}

pub fn write_checkpoints(
    dir: &Path,
    arch: Arch,
    hyper: ModelHyper,
    seed: u64,
    members: &[(Vec<f64>, Vec<f64>)],
) -> Result<()> {
    let mut curve = String::from("epoch");
    for k in 0..members.len() {
        write!(curve, ",bag_{k}").unwrap();
    }
    curve.push('\n');
    let epochs = members.first().map_or(0, |m| m.1.len());
    for e in 0..epochs {
        write!(curve, "{e}").unwrap();
        for m in members {
            write!(curve, ",{}", m.1[e]).unwrap();
        }
        curve.push('\n');
    }
    metrics::write_file(&dir.join("loss.csv"), curve.as_bytes())?;
    for (k, (params, _)) in members.iter().enumerate() {
        save_checkpoint(
            &dir.join(format!("bag_{k}.ckpt")),
            &Checkpoint {
                arch,
                hyper,
                seed: derive_seed(seed, &[k as u64]),
                params: params.clone(),
            },
        )?;
    }
    Ok(())
}

/// Loads every `bag_<k>.ckpt` under `dir`, in bag order.
pub fn load_ensemble(dir: &Path) -> Result<(Model, Vec<Vec<f64>>)> {
    let mut paths: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let k = name
                .strip_prefix("bag_")?
                .strip_suffix(".ckpt")?
                .parse()
                .ok()?;
            Some((k, p))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no checkpoints in {}",
            dir.display()
        )));
    }
    let mut model: Option<(Model, Arch, ModelHyper)> = None;
    let mut members = Vec::new();
    for (_, p) in paths {
        let ck = load_checkpoint(&p)?;
        match &model {
            None => model = Some((ck.model()?, ck.arch, ck.hyper)),
            Some((_, a, h)) if *a != ck.arch || *h != ck.hyper => {
                return Err(Error::InvalidInput(format!(
                    "{} does not match the other members",
                    p.display()
                )));
            }
            _ => {}
        }
        members.push(ck.params);
    }
    Ok((model.expect("nonempty").0, members))
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub table: ComparisonTable,
    pub reports: Vec<(String, EvalReport)>,
    pub n_train: usize,
    pub n_test: usize,
    pub train_positive_fraction: f64,
    pub test_positive_fraction: f64,
}

fn positive_fraction(samples: &[Sample]) -> f64 {
    samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len().max(1) as f64
}

/// Generates, splits and (optionally) subsamples the data of an experiment.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    config.validate()?;
    let samples = generate_dataset(&config.gen, config.projection_seed)?;
    let ids: BTreeSet<u64> = samples.iter().map(|s| s.sequence_id).collect();
    let (train_ids, test_ids) = split_sequences(&ids, config.split_ratio, config.split_seed)?;
    if !train_ids.is_disjoint(&test_ids) {
        return Err(Error::InvalidInput(
            "train and test sequences overlap".into(),
        ));
    }
    let (mut train, mut test): (Vec<Sample>, Vec<Sample>) = samples
        .into_iter()
        .partition(|s| train_ids.contains(&s.sequence_id));
    if let Some(f) = config.imbalance.positive_fraction() {
        train = subsample_imbalanced(train, f, derive_seed(config.subsample_seed, &[0]))?;
        test = subsample_imbalanced(test, f, derive_seed(config.subsample_seed, &[1]))?;
    }
    let train_seq: BTreeSet<u64> = train.iter().map(|s| s.sequence_id).collect();
    assert!(
        test.iter().all(|s| !train_seq.contains(&s.sequence_id)),
        "sequence leaked across the split"
    );
    Ok((train, test))
}

/// Model configurations trained by an experiment: (name, arch, train config).
fn trained_models(config: &ExperimentConfig) -> Vec<(&'static str, Arch, TrainConfig)> {
    let mut out = Vec::new();
    let keyed = |k: u64| TrainConfig {
        seed: derive_seed(config.train.seed, &[k]),
        ..config.train
    };
    if config.mlp {
        out.push((MLP, Arch::Mlp, keyed(1)));
    }
    out.push((CATPLAN, Arch::CatPlan, keyed(2)));
    if config.ablation {
        out.push((
            CATPLAN_SINGLE,
            Arch::CatPlan,
            TrainConfig {
                alpha_m: 0.0,
                bagging: BaggingConfig {
                    n_bags: 1,
                    ..config.train.bagging
                },
                ..keyed(3)
            },
        ));
    }
    out
}

pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    metrics::write_json(&out.join("config.snapshot"), config)?;

    let (train, test) = prepare_data(config)?;
    let dims = config.gen.dims();
    dataset::write_dataset(dims, &train, &out.join("dataset").join("train"))?;
    dataset::write_dataset(dims, &test, &out.join("dataset").join("test"))?;

    let baseline = score_dataset_baseline(&test, dims, &config.baseline)?;
    write_scores(
        &out.join("scores").join(format!("{BASELINE}.csv")),
        &test,
        &baseline,
    )?;

    let train_x = features(&train);
    let test_x = features(&test);
    for (name, arch, tc) in trained_models(config) {
        let model = Model::new(arch, config.hyper)?;
        let (_, outcomes) = train_ensemble(&model, &train_x, &tc)?;
        let members: Vec<(Vec<f64>, Vec<f64>)> =
            outcomes.into_iter().map(|o| (o.params, o.curve)).collect();
        write_checkpoints(
            &out.join("models").join(name),
            arch,
            config.hyper,
            tc.seed,
            &members,
        )?;
        let params: Vec<Vec<f64>> = members.into_iter().map(|m| m.0).collect();
        let scores = predict_ensemble_batch(&model, &params, &test_x)?;
        write_scores(
            &out.join("scores").join(format!("{name}.csv")),
            &test,
            &scores,
        )?;
    }

    let (table, reports) = write_reports(out)?;
    Ok(ExperimentResult {
        table,
        reports,
        n_train: train.len(),
        n_test: test.len(),
        train_positive_fraction: positive_fraction(&train),
        test_positive_fraction: positive_fraction(&test),
    })
}

/// Rebuilds `reports/`, `curves/`, `table.csv` and `table.txt` from the
/// stored `scores/*.csv` of a run directory.
pub fn write_reports(run: &Path) -> Result<(ComparisonTable, Vec<(String, EvalReport)>)> {
    let mut reports = Vec::new();
    for name in MODEL_ORDER {
        let path = run.join("scores").join(format!("{name}.csv"));
        if !path.exists() {
            continue;
        }
        let (_, scores, labels) = read_scores(&path)?;
        reports.push((name.to_string(), build_report(&scores, &labels)?));
    }
    if reports.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no scores under {}",
            run.join("scores").display()
        )));
    }
    let mut table = ComparisonTable::default();
    for (name, report) in &reports {
        metrics::write_json(&run.join("reports").join(format!("{name}.json")), report)?;
        metrics::write_curve_csvs(&run.join("curves"), name, report)?;
        metrics::write_file(
            &run.join("curves").join(format!("{name}.svg")),
            metrics::render_curves_svg(&[(name, report)]).as_bytes(),
        )?;
        table.rows.push(TableRow::from_report(name, report));
    }
    let all: Vec<(&str, &EvalReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    metrics::write_file(
        &run.join("curves").join("comparison.svg"),
        metrics::render_curves_svg(&all).as_bytes(),
    )?;
    metrics::write_file(&run.join("table.csv"), table.to_csv().as_bytes())?;
    metrics::write_file(&run.join("table.txt"), table.to_text().as_bytes())?;
    Ok((table, reports))
}
