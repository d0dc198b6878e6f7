//! Imbalance-aware training: focal loss, bagging over undersampled
//! negatives, within-batch mixup, Adam, and ensemble prediction.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::round_to_f32;
use crate::model::{sigmoid, Features, Model};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "focal alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Focal-loss class weight: a fixed value, or `"auto"` for the inverse
/// per-bag class ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSetting {
    Auto,
    Fixed(f64),
}

impl Serialize for AlphaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlphaSetting::Auto => s.serialize_str("auto"),
            AlphaSetting::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AlphaSetting::Fixed(v)),
            Raw::Word(w) if w == "auto" => Ok(AlphaSetting::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "alpha must be a number or \"auto\", got \"{w}\""
            ))),
        }
    }
}

impl std::str::FromStr for AlphaSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(AlphaSetting::Auto);
        }
        s.parse::<f64>()
            .map(AlphaSetting::Fixed)
            .map_err(|_| format!("alpha must be a number or `auto`, got `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalSettings {
    pub alpha: AlphaSetting,
    pub gamma: f64,
}

impl Default for FocalSettings {
    fn default() -> Self {
        Self {
            alpha: AlphaSetting::Fixed(0.5),
            gamma: 2.0,
        }
    }
}

impl FocalSettings {
    /// Resolves `auto` against the class counts of the whole training set.
    pub fn resolve(&self, n_pos: usize, n_neg: usize, n_bags: usize) -> Result<FocalConfig> {
        let alpha = match self.alpha {
            AlphaSetting::Fixed(a) => a,
            AlphaSetting::Auto => compute_alpha(n_pos, n_neg, n_bags)?,
        };
        let cfg = FocalConfig {
            alpha,
            gamma: self.gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaggingConfig {
    pub n_bags: usize,
    pub seed: u64,
}

impl Default for BaggingConfig {
    fn default() -> Self {
        Self { n_bags: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Beta(alpha_m, alpha_m) concentration for mixup; 0 disables mixup.
    pub alpha_m: f64,
    pub focal: FocalSettings,
    pub bagging: BaggingConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.001,
            batch_size: 32,
            alpha_m: 0.0,
            focal: FocalSettings::default(),
            bagging: BaggingConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.alpha_m >= 0.0 && self.alpha_m.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_m must be >= 0, got {}",
                self.alpha_m
            )));
        }
        if self.bagging.n_bags == 0 {
            return Err(Error::Config("n_bags must be >= 1".into()));
        }
        if let AlphaSetting::Fixed(a) = self.focal.alpha {
            FocalConfig {
                alpha: a,
                gamma: self.focal.gamma,
            }
            .validate()?;
        }
        if !(self.focal.gamma >= 0.0 && self.focal.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal gamma must be >= 0, got {}",
                self.focal.gamma
            )));
        }
        Ok(())
    }
}

/// `-a y (1-p)^g ln p - (1-a)(1-y) p^g ln(1-p)` for `p` strictly in (0, 1).
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!(
            "focal loss needs p in (0, 1), got {p}"
        )));
    }
    Ok(-alpha * y * (1.0 - p).powf(gamma) * p.ln()
        - (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * (1.0 - p).ln())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss and its derivative with respect to the logit `z`, using
/// `ln p = -softplus(-z)` and `ln(1-p) = -softplus(z)` so that neither
/// term saturates.
pub fn focal_loss_logit(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-z).exp());
    let q = 1.0 / (1.0 + z.exp());
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let pos = if y != 0.0 { alpha * y } else { 0.0 };
    let neg = if y != 1.0 {
        (1.0 - alpha) * (1.0 - y)
    } else {
        0.0
    };
    let qg = q.powf(gamma);
    let pg = p.powf(gamma);
    let loss = -pos * qg * log_p - neg * pg * log_q;
    // d/dz [(1-p)^g ln p] = (1-p)^g [(1-p) - g p ln p]
    // d/dz [p^g ln(1-p)]  = p^g [g (1-p) ln(1-p) - p]
    let grad = -pos * qg * (q - gamma * p * log_p) - neg * pg * (gamma * q * log_q - p);
    (loss, grad)
}

/// `|Q| / (N |P| + |Q|)`, the inverse class ratio inside each of `N` bags.
pub fn compute_alpha(n_pos: usize, n_neg: usize, n_bags: usize) -> Result<f64> {
    if n_pos == 0 {
        return Err(Error::InvalidInput(
            "alpha needs at least one positive".into(),
        ));
    }
    if n_bags == 0 {
        return Err(Error::InvalidInput("alpha needs n_bags >= 1".into()));
    }
    Ok(n_neg as f64 / (n_bags as f64 * n_pos as f64 + n_neg as f64))
}

/// Splits the negatives into `n` disjoint, size-balanced parts after a
/// seeded shuffle; every bag is all positives followed by one part.
pub fn make_bags<T: Clone>(
    positives: &[T],
    negatives: &[T],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    if n == 0 || n > negatives.len() {
        return Err(Error::InvalidInput(format!(
            "cannot split {} negatives into {n} bags",
            negatives.len()
        )));
    }
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.shuffle(&mut stream(seed, &[0xba65]));
    let q = negatives.len();
    Ok((0..n)
        .map(|i| {
            let mut bag = positives.to_vec();
            bag.extend(
                order[i * q / n..(i + 1) * q / n]
                    .iter()
                    .map(|&j| negatives[j].clone()),
            );
            bag
        })
        .collect())
}

/// `lambda a + (1 - lambda) b` on queries and target; masks are merged by
/// elementwise maximum.
pub fn mixup_pair(a: &Features, b: &Features, lambda: f64) -> Result<Features> {
    if a.h_plan.len() != b.h_plan.len()
        || a.h_motion.len() != b.h_motion.len()
        || a.mask.len() != b.mask.len()
    {
        return Err(Error::Shape {
            what: "mixup pair",
            expected: format!("{}/{}/{}", a.h_plan.len(), a.h_motion.len(), a.mask.len()),
            got: format!("{}/{}/{}", b.h_plan.len(), b.h_motion.len(), b.mask.len()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!(
            "mixup lambda must be in [0, 1], got {lambda}"
        )));
    }
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        if lambda == 1.0 {
            x.to_vec()
        } else if lambda == 0.0 {
            y.to_vec()
        } else {
            x.iter()
                .zip(y)
                .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
                .collect()
        }
    };
    Ok(Features {
        h_plan: mix(&a.h_plan, &b.h_plan),
        h_motion: mix(&a.h_motion, &b.h_motion),
        mask: a.mask.iter().zip(&b.mask).map(|(u, v)| u.max(*v)).collect(),
        target: mix(&[a.target], &[b.target])[0],
    })
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    /// Mean training loss of each epoch.
    pub curve: Vec<f64>,
}

/// Trains one model on `bag`. Parameters come back rounded to float32, the
/// precision checkpoints store.
pub fn train_bag(
    model: &Model,
    bag: &[Features],
    config: &TrainConfig,
    focal: &FocalConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    focal.validate()?;
    if bag.is_empty() {
        return Err(Error::InvalidInput("empty training bag".into()));
    }
    if !bag.iter().any(|x| x.target > 0.5) || !bag.iter().any(|x| x.target < 0.5) {
        return Err(Error::InvalidInput(
            "training bag must contain both classes".into(),
        ));
    }
    let mut params = model.init(derive_seed(seed, &[1]));
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            curve: vec![],
        });
    }
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let beta = if config.alpha_m > 0.0 {
        Some(Beta::new(config.alpha_m, config.alpha_m).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut rng = stream(seed, &[2]);
    let mut order: Vec<usize> = (0..bag.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Features> = match &beta {
                None => idx.iter().map(|&i| bag[i].clone()).collect(),
                Some(beta) => {
                    let mut partner = idx.to_vec();
                    partner.shuffle(&mut rng);
                    idx.iter()
                        .zip(&partner)
                        .map(|(&i, &j)| mixup_pair(&bag[i], &bag[j], beta.sample(&mut rng)))
                        .collect::<Result<_>>()?
                }
            };
            let (loss, grad) = match model.loss_and_grad(&params, &batch, focal) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
            adam.step(&mut params, &grad);
        }
        let mean = total / bag.len() as f64;
        if !mean.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        curve.push(mean);
    }
    round_to_f32(&mut params);
    Ok(TrainOutcome { params, curve })
}

/// Splits `train` into bags and trains one model per bag in parallel. Bag
/// `k` trains with seed `derive_seed(config.seed, [k])`.
pub fn train_ensemble(
    model: &Model,
    train: &[Features],
    config: &TrainConfig,
) -> Result<(FocalConfig, Vec<TrainOutcome>)> {
    config.validate()?;
    let (pos, neg): (Vec<Features>, Vec<Features>) =
        train.iter().cloned().partition(|x| x.target > 0.5);
    let focal = config
        .focal
        .resolve(pos.len(), neg.len(), config.bagging.n_bags)?;
    let bags = make_bags(&pos, &neg, config.bagging.n_bags, config.bagging.seed)?;
    let outcomes = bags
        .par_iter()
        .enumerate()
        .map(|(k, bag)| {
            train_bag(
                model,
                bag,
                config,
                &focal,
                derive_seed(config.seed, &[k as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((focal, outcomes))
}

/// Mean of the member probabilities.
pub fn predict_ensemble(model: &Model, members: &[Vec<f64>], x: &Features) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    let mut sum = 0.0;
    for params in members {
        sum += sigmoid(model.logit(params, x)?);
    }
    Ok(sum / members.len() as f64)
}

pub fn predict_ensemble_batch(
    model: &Model,
    members: &[Vec<f64>],
    xs: &[Features],
) -> Result<Vec<f64>> {
    xs.par_iter()
        .map(|x| predict_ensemble(model, members, x))
        .collect()
}
