//! Collision classifiers over cached planner queries.
//!
//! Two architectures share one interface: [`CatPlan`] (cross-attention over
//! agent motion queries) and [`Mlp`] (plan query only). Parameters are a
//! flat `Vec<f64>` described by a [`Layout`]; gradients have the same shape.

pub mod catplan;
pub mod checkpoint;
pub mod layout;
pub mod mlp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use catplan::CatPlan;
pub use layout::{Layout, Slot};
pub use mlp::Mlp;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::training::{focal_loss_logit, FocalConfig};

/// Logits are clamped here before the sigmoid so that `p` stays strictly
/// inside (0, 1) in double precision.
pub const LOGIT_CLAMP: f64 = 36.0;

/// Samples per gradient shard. Shards are reduced in index order so the
/// summed gradient does not depend on the thread count.
const SHARD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelHyper {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Hidden width of the head MLP and of the decoder feed-forward block.
    pub mlp_hidden: usize,
    pub n_modes: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            d: 64,
            n_heads: 4,
            n_layers: 1,
            mlp_hidden: 128,
            n_modes: 6,
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.mlp_hidden == 0 || self.n_modes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    CatPlan,
    Mlp,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::CatPlan => "catplan",
            Arch::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "catplan" => Some(Arch::CatPlan),
            "mlp" => Some(Arch::Mlp),
            _ => None,
        }
    }
}

/// Double-precision model input with a (possibly soft) target.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub h_plan: Vec<f64>,
    /// `N_a x N_m x d`, row-major.
    pub h_motion: Vec<f64>,
    /// 1 for visible agents, 0 for dropped or padded ones.
    pub mask: Vec<f64>,
    pub target: f64,
}

impl Features {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            h_plan: s.h_plan.iter().map(|&v| v as f64).collect(),
            h_motion: s.h_motion.iter().map(|&v| v as f64).collect(),
            mask: s.agent_mask.iter().map(|&v| v as f64).collect(),
            target: s.label as f64,
        }
    }
}

pub fn sigmoid(logit: f64) -> f64 {
    let z = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone)]
pub enum Model {
    CatPlan(CatPlan),
    Mlp(Mlp),
}

impl Model {
    pub fn new(arch: Arch, hyper: ModelHyper) -> Result<Self> {
        Ok(match arch {
            Arch::CatPlan => Model::CatPlan(CatPlan::new(hyper)?),
            Arch::Mlp => Model::Mlp(Mlp::new(hyper)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::CatPlan(_) => Arch::CatPlan,
            Model::Mlp(_) => Arch::Mlp,
        }
    }

    pub fn hyper(&self) -> &ModelHyper {
        match self {
            Model::CatPlan(m) => m.hyper(),
            Model::Mlp(m) => m.hyper(),
        }
    }

    pub fn layout(&self) -> &Layout {
        match self {
            Model::CatPlan(m) => m.layout(),
            Model::Mlp(m) => m.layout(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len()
    }

    /// Seeded initial parameters, already representable in float32 so that
    /// an untrained checkpoint reloads exactly.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut params = self
            .layout()
            .initialize(&mut crate::rng::stream(seed, &[0x1417]));
        checkpoint::round_to_f32(&mut params);
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: self.n_params().to_string(),
                got: params.len().to_string(),
            });
        }
        Ok(())
    }

    pub fn logit(&self, params: &[f64], x: &Features) -> Result<f64> {
        self.check_params(params)?;
        match self {
            Model::CatPlan(m) => m.logit(params, x),
            Model::Mlp(m) => m.logit(params, x),
        }
    }

    /// Collision probability in (0, 1).
    pub fn forward(&self, params: &[f64], x: &Features) -> Result<f64> {
        Ok(sigmoid(self.logit(params, x)?))
    }

    pub fn forward_batch(&self, params: &[f64], xs: &[Features]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.forward(params, x)).collect()
    }

    /// Adds `dlogit(logit) * d(logit)/d(params)` into `grad`.
    pub fn accumulate_grad(
        &self,
        params: &[f64],
        x: &Features,
        dlogit: impl FnOnce(f64) -> f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        match self {
            Model::CatPlan(m) => m.accumulate_grad(params, x, dlogit, grad),
            Model::Mlp(m) => m.accumulate_grad(params, x, dlogit, grad),
        }
    }

    /// Mean focal loss over `batch` (targets taken from `Features::target`)
    /// and its exact gradient.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        batch: &[Features],
        focal: &FocalConfig,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let n = batch.len() as f64;
        let shards: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut grad = vec![0.0; params.len()];
                let mut loss = 0.0;
                for x in chunk {
                    self.accumulate_grad(
                        params,
                        x,
                        |z| {
                            let (l, dl) = focal_loss_logit(z, x.target, focal.alpha, focal.gamma);
                            loss += l;
                            dl / n
                        },
                        &mut grad,
                    )?;
                }
                Ok((loss, grad))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for shard in shards {
            let (l, g) = shard?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("focal loss".into()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let (group, index) = self.layout().group_of(i).unwrap_or(("?", i));
            return Err(Error::Gradient {
                group: group.to_string(),
                index,
            });
        }
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests;
