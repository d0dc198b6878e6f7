//! Rule-based collision risk from chained Gaussian mixtures.
//!
//! For agent `a` and future step `k` the forecast modes define an isotropic
//! mixture with covariance `Sigma_k = k * sigma0 * I`. The risk of a plan is
//! the largest mixture density found at the plan's own waypoints, maximised
//! over steps and visible agents.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dims, Sample};
use crate::error::{Error, Result};
use crate::scenario::{AgentForecast, Point};

/// Slack on the simplex check; weights read back from float32 tensors sum
/// to one only to about 1e-7.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmParams {
    /// Covariance scale of the first step, in m².
    pub sigma0: f64,
    /// Report the natural log of the density instead of the density.
    pub use_log: bool,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            sigma0: 2.0,
            use_log: false,
        }
    }
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config(format!(
                "sigma0 must be > 0, got {}",
                self.sigma0
            )));
        }
        Ok(())
    }

    /// Covariance scale at 1-based step `k`.
    pub fn sigma_at(&self, k: usize) -> f64 {
        k as f64 * self.sigma0
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    if weights.is_empty() || !(min >= 0.0) || !((sum - 1.0).abs() <= SIMPLEX_TOLERANCE) {
        return Err(Error::NotSimplex { sum, min });
    }
    Ok(())
}

fn sq_dist(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// `sum_m pi_m N(x - mode_m; 0, sigma_k I)` in 2-D.
pub fn gmm_density(x: Point, modes: &[Point], weights: &[f64], sigma_k: f64) -> Result<f64> {
    if modes.len() != weights.len() {
        return Err(Error::Shape {
            what: "gmm_density modes/weights",
            expected: modes.len().to_string(),
            got: weights.len().to_string(),
        });
    }
    if !(sigma_k > 0.0) {
        return Err(Error::InvalidInput(format!(
            "covariance scale must be > 0, got {sigma_k}"
        )));
    }
    check_simplex(weights)?;
    Ok(density_unchecked(
        x,
        modes.iter().copied(),
        weights,
        sigma_k,
    ))
}

fn density_unchecked(
    x: Point,
    modes: impl Iterator<Item = Point>,
    weights: &[f64],
    sigma_k: f64,
) -> f64 {
    let norm = 1.0 / (2.0 * PI * sigma_k);
    modes
        .zip(weights)
        .map(|(mu, &w)| w * norm * (-sq_dist(x, mu) / (2.0 * sigma_k)).exp())
        .sum()
}

/// Log-density by log-sum-exp; finite even where the density underflows.
fn log_density_unchecked(
    x: Point,
    modes: impl Iterator<Item = Point>,
    weights: &[f64],
    sigma_k: f64,
) -> f64 {
    let terms: Vec<f64> = modes
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(mu, &w)| w.ln() - sq_dist(x, mu) / (2.0 * sigma_k))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    lse - (2.0 * PI * sigma_k).ln()
}

/// Maximum over visible agents and steps of the chained-mixture density at
/// the plan waypoints. No visible agents gives 0 (or -inf in log mode).
pub fn collision_risk(
    plan: &[Point],
    agents: &[AgentForecast],
    mask: &[bool],
    params: &GmmParams,
) -> Result<f64> {
    params.validate()?;
    if mask.len() != agents.len() {
        return Err(Error::Shape {
            what: "collision_risk mask",
            expected: agents.len().to_string(),
            got: mask.len().to_string(),
        });
    }
    let t = plan.len();
    let mut best = if params.use_log {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    for (agent, _) in agents.iter().zip(mask).filter(|(_, &visible)| visible) {
        if agent.modes.len() != agent.weights.len() {
            return Err(Error::Shape {
                what: "collision_risk modes/weights",
                expected: agent.modes.len().to_string(),
                got: agent.weights.len().to_string(),
            });
        }
        if let Some(bad) = agent.modes.iter().find(|m| m.len() != t) {
            return Err(Error::Shape {
                what: "collision_risk horizon",
                expected: t.to_string(),
                got: bad.len().to_string(),
            });
        }
        check_simplex(&agent.weights)?;
        for (k, &x) in plan.iter().enumerate() {
            let sigma_k = params.sigma_at(k + 1);
            let modes = agent.modes.iter().map(|m| m[k]);
            let v = if params.use_log {
                log_density_unchecked(x, modes, &agent.weights, sigma_k)
            } else {
                density_unchecked(x, modes, &agent.weights, sigma_k)
            };
            if v > best {
                best = v;
            }
        }
    }
    Ok(best)
}

/// Rebuilds the plan and per-agent forecasts stored in a sample's tensors.
pub fn sample_trajectories(
    sample: &Sample,
    dims: Dims,
) -> Result<(Vec<Point>, Vec<AgentForecast>, Vec<bool>)> {
    if !sample.has_trajectories() {
        return Err(Error::MissingTrajectories(sample.id));
    }
    sample.check_dims(dims)?;
    let (t, n_a, n_m) = (dims.horizon, dims.agents, dims.modes);
    let plan = (0..t)
        .map(|k| [sample.plan[2 * k] as f64, sample.plan[2 * k + 1] as f64])
        .collect();
    let agents = (0..n_a)
        .map(|a| AgentForecast {
            modes: (0..n_m)
                .map(|m| {
                    (0..t)
                        .map(|k| {
                            let base = ((a * n_m + m) * t + k) * 2;
                            [sample.motion[base] as f64, sample.motion[base + 1] as f64]
                        })
                        .collect()
                })
                .collect(),
            weights: (0..n_m)
                .map(|m| sample.mode_weights[a * n_m + m] as f64)
                .collect(),
        })
        .collect();
    let mask = sample.agent_mask.iter().map(|&v| v != 0.0).collect();
    Ok((plan, agents, mask))
}

/// One score per sample, in order. In log mode a sample with no visible
/// agent scores `f64::MIN` so that every score stays finite while keeping
/// the ranking of the linear score (which is 0 there).
pub fn score_dataset_baseline(
    samples: &[Sample],
    dims: Dims,
    params: &GmmParams,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    params.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let (plan, agents, mask) = sample_trajectories(s, dims)?;
            let r = collision_risk(&plan, &agents, &mask, params)?;
            Ok(if r == f64::NEG_INFINITY { f64::MIN } else { r })
        })
        .collect()
}
