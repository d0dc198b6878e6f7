//! Run-count balancing for simulated scenario sets.
//!
//! Each sequence pair `i` collides on `c_i` of its `t_i` timestamps per
//! run. Choosing `r_i` runs per pair, the pooled collision rate is
//! `sum c_i r_i / sum t_i r_i`. The program picks integers `r_i >= min_runs`
//! with `sum r_i <= max_total_runs` and pooled rate in `[rate_lo, rate_hi]`
//! that minimise the spread `D = max r - min r`. Ties go to the largest
//! total, then to the lexicographically smallest `r`.
//!
//! The integer program over `(r, L, D)` with `L <= r_i <= L + D` is solved
//! exactly by branch and bound on LP relaxations, once per level of the
//! lexicographic objective.

pub mod lp;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use lp::{Cmp, IntegerProgram, LpOutcome, Row};

/// Relative slack on the rate bounds, shared by the solver, the verifier and
/// the test oracles so that they agree on boundary cases.
pub const RATE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub id: String,
    /// Collision timestamps per run.
    pub c: f64,
    /// Timestamps per run.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceInstance {
    pub pairs: Vec<PairStats>,
    #[serde(default = "default_min_runs")]
    pub min_runs: u64,
    #[serde(default = "default_max_total")]
    pub max_total_runs: u64,
    #[serde(default = "default_lo")]
    pub rate_lo: f64,
    #[serde(default = "default_hi")]
    pub rate_hi: f64,
}

fn default_min_runs() -> u64 {
    45
}
fn default_max_total() -> u64 {
    1200
}
fn default_lo() -> f64 {
    0.46
}
fn default_hi() -> f64 {
    0.54
}

impl BalanceInstance {
    pub fn new(pairs: Vec<PairStats>) -> Self {
        Self {
            pairs,
            min_runs: default_min_runs(),
            max_total_runs: default_max_total(),
            rate_lo: default_lo(),
            rate_hi: default_hi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidInput(
                "balancing instance has no pairs".into(),
            ));
        }
        for p in &self.pairs {
            if !(p.t > 0.0 && p.t.is_finite() && p.c >= 0.0 && p.c <= p.t) {
                return Err(Error::InvalidInput(format!(
                    "pair {}: need 0 <= c <= t and t > 0, got c = {}, t = {}",
                    p.id, p.c, p.t
                )));
            }
        }
        if self.min_runs == 0 {
            return Err(Error::InvalidInput("min_runs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rate_lo)
            || !(0.0..=1.0).contains(&self.rate_hi)
            || self.rate_lo > self.rate_hi
        {
            return Err(Error::InvalidInput(format!(
                "rate bounds must satisfy 0 <= lo <= hi <= 1, got [{}, {}]",
                self.rate_lo, self.rate_hi
            )));
        }
        Ok(())
    }

    /// Pooled collision rate of a run plan.
    pub fn rate(&self, r: &[u64]) -> f64 {
        let (num, den) = self.rate_parts(r);
        num / den
    }

    fn rate_parts(&self, r: &[u64]) -> (f64, f64) {
        self.pairs
            .iter()
            .zip(r)
            .fold((0.0, 0.0), |(n, d), (p, &ri)| {
                (n + p.c * ri as f64, d + p.t * ri as f64)
            })
    }

    pub fn rate_above_lo(&self, r: &[u64]) -> bool {
        let (num, den) = self.rate_parts(r);
        num >= (self.rate_lo - RATE_SLACK) * den
    }

    pub fn rate_below_hi(&self, r: &[u64]) -> bool {
        let (num, den) = self.rate_parts(r);
        num <= (self.rate_hi + RATE_SLACK) * den
    }

    /// Every constraint except the spread.
    pub fn is_feasible(&self, r: &[u64]) -> bool {
        r.len() == self.pairs.len()
            && r.iter().all(|&v| v >= self.min_runs)
            && r.iter().sum::<u64>() <= self.max_total_runs
            && self.rate_above_lo(r)
            && self.rate_below_hi(r)
    }
}

/// Which constraint family makes an instance infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingConstraint {
    /// `n * min_runs` already exceeds the run budget.
    MinRunsVsBudget,
    /// No admissible plan reaches `rate_lo`.
    CollisionRateLower,
    /// No admissible plan gets down to `rate_hi`.
    CollisionRateUpper,
    /// The rate window is reachable fractionally but not with integer runs.
    RateWindowIntegrality,
}

impl fmt::Display for BindingConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindingConstraint::MinRunsVsBudget => {
                "minimum runs per pair exceed the total run budget"
            }
            BindingConstraint::CollisionRateLower => "collision rate cannot reach the lower bound",
            BindingConstraint::CollisionRateUpper => {
                "collision rate cannot get below the upper bound"
            }
            BindingConstraint::RateWindowIntegrality => {
                "no integer run plan lands inside the rate window"
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceSolution {
    pub ids: Vec<String>,
    pub r: Vec<u64>,
    pub d: u64,
    pub achieved_rate: f64,
}

impl BalanceSolution {
    fn from_runs(instance: &BalanceInstance, r: Vec<u64>) -> Self {
        let d = spread(&r);
        Self {
            ids: instance.pairs.iter().map(|p| p.id.clone()).collect(),
            achieved_rate: instance.rate(&r),
            d,
            r,
        }
    }

    pub fn total_runs(&self) -> u64 {
        self.r.iter().sum()
    }

    /// `{"r": {id: runs}, "D": .., "achieved_rate": .., "total_runs": ..}`
    pub fn to_json(&self) -> serde_json::Value {
        let r: BTreeMap<&str, u64> = self
            .ids
            .iter()
            .map(|s| s.as_str())
            .zip(self.r.iter().copied())
            .collect();
        serde_json::json!({
            "r": r,
            "D": self.d,
            "achieved_rate": self.achieved_rate,
            "total_runs": self.total_runs(),
        })
    }
}

fn spread(r: &[u64]) -> u64 {
    r.iter().max().copied().unwrap_or(0) - r.iter().min().copied().unwrap_or(0)
}

struct Program {
    ip: IntegerProgram,
    n: usize,
}

impl Program {
    /// Variables `r_0..r_{n-1}, L, D`.
    fn new(inst: &BalanceInstance) -> Self {
        let n = inst.pairs.len();
        let nv = n + 2;
        let (l, d) = (n, n + 1);
        let total = inst.max_total_runs as f64;
        let mut rows = Vec::new();
        for i in 0..n {
            let mut lower = vec![0.0; nv];
            lower[i] = 1.0;
            lower[l] = -1.0;
            rows.push(Row {
                coef: lower,
                cmp: Cmp::Ge,
                rhs: 0.0,
            });
            let mut upper = vec![0.0; nv];
            upper[i] = 1.0;
            upper[l] = -1.0;
            upper[d] = -1.0;
            rows.push(Row {
                coef: upper,
                cmp: Cmp::Le,
                rhs: 0.0,
            });
        }
        let mut sum = vec![1.0; n];
        sum.extend([0.0, 0.0]);
        rows.push(Row {
            coef: sum,
            cmp: Cmp::Le,
            rhs: total,
        });
        rows.push(rate_row(inst, inst.rate_lo - RATE_SLACK, Cmp::Ge));
        rows.push(rate_row(inst, inst.rate_hi + RATE_SLACK, Cmp::Le));
        let mut lower = vec![inst.min_runs as f64; n];
        lower.extend([0.0, 0.0]);
        Self {
            ip: IntegerProgram {
                objective: vec![0.0; nv],
                rows,
                lower,
                upper: vec![total; nv],
            },
            n,
        }
    }
}

fn rate_row(inst: &BalanceInstance, bound: f64, cmp: Cmp) -> Row {
    let mut coef: Vec<f64> = inst.pairs.iter().map(|p| p.c - bound * p.t).collect();
    coef.extend([0.0, 0.0]);
    Row {
        coef,
        cmp,
        rhs: 0.0,
    }
}

fn classify(inst: &BalanceInstance) -> BindingConstraint {
    let n = inst.pairs.len() as u64;
    if n * inst.min_runs > inst.max_total_runs {
        return BindingConstraint::MinRunsVsBudget;
    }
    // extremes of each rate slack over the budget polytope
    let n = inst.pairs.len();
    let mut base = Program::new(inst).ip;
    base.rows.truncate(2 * n + 1);
    let extreme = |row: Row, sign: f64| -> f64 {
        let mut ip = base.clone();
        ip.objective = row.coef.iter().map(|v| sign * v).collect();
        match ip.relax(&ip.lower, &ip.upper) {
            LpOutcome::Optimal { objective, .. } => sign * objective,
            _ => f64::NAN,
        }
    };
    let max_lo_slack = extreme(rate_row(inst, inst.rate_lo - RATE_SLACK, Cmp::Ge), -1.0);
    if max_lo_slack < 0.0 {
        return BindingConstraint::CollisionRateLower;
    }
    let min_hi_slack = extreme(rate_row(inst, inst.rate_hi + RATE_SLACK, Cmp::Le), 1.0);
    if min_hi_slack > 0.0 {
        return BindingConstraint::CollisionRateUpper;
    }
    BindingConstraint::RateWindowIntegrality
}

/// Exact lexicographic optimum: minimum spread, then maximum total, then
/// lexicographically smallest run vector.
pub fn solve_balance(instance: &BalanceInstance) -> Result<BalanceSolution> {
    instance.validate()?;
    let Program { mut ip, n } = Program::new(instance);
    let runs = |x: &[i64]| -> Option<Vec<u64>> {
        let r: Vec<u64> = x[..n].iter().map(|&v| v.max(0) as u64).collect();
        instance.is_feasible(&r).then_some(r)
    };

    // 1. minimum spread
    ip.objective[n + 1] = 1.0;
    let Some((_, d_star)) = ip.solve(&|x| runs(x).map(|r| spread(&r) as i64)) else {
        return Err(Error::Infeasible(classify(instance)));
    };
    let d_star = d_star as u64;

    // 2. maximum total at that spread
    ip.upper[n + 1] = d_star as f64;
    ip.objective = vec![0.0; n + 2];
    ip.objective[..n].iter_mut().for_each(|v| *v = -1.0);
    let within = |r: &Vec<u64>| spread(r) <= d_star;
    let (_, neg_total) = ip
        .solve(&|x| {
            runs(x)
                .filter(within)
                .map(|r| -(r.iter().sum::<u64>() as i64))
        })
        .expect("a minimum-spread plan exists");
    let total = (-neg_total) as f64;
    let sum_row = 2 * n;
    ip.rows[sum_row].cmp = Cmp::Eq;
    ip.rows[sum_row].rhs = total;

    // 3. lexicographically smallest r
    for i in 0..n {
        ip.objective = vec![0.0; n + 2];
        ip.objective[i] = 1.0;
        let (_, ri) = ip
            .solve(&|x| {
                runs(x)
                    .filter(within)
                    .filter(|r| r.iter().sum::<u64>() as f64 == total)
                    .map(|r| r[i] as i64)
            })
            .expect("the previous level is feasible");
        ip.lower[i] = ri as f64;
        ip.upper[i] = ri as f64;
    }
    let r: Vec<u64> = ip.lower[..n].iter().map(|&v| v as u64).collect();
    Ok(BalanceSolution::from_runs(instance, r))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape {
        expected: usize,
        got: usize,
    },
    PairSpread {
        a: String,
        b: String,
        diff: u64,
        d: u64,
    },
    SpreadMismatch {
        reported: u64,
        actual: u64,
    },
    MinRuns {
        id: String,
        r: u64,
        min: u64,
    },
    RateLower {
        rate: f64,
        bound: f64,
    },
    RateUpper {
        rate: f64,
        bound: f64,
    },
    Budget {
        total: u64,
        max: u64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { expected, got } => {
                write!(f, "expected {expected} run counts, got {got}")
            }
            Violation::PairSpread { a, b, diff, d } => {
                write!(f, "|r_{a} - r_{b}| = {diff} exceeds D = {d}")
            }
            Violation::SpreadMismatch { reported, actual } => {
                write!(
                    f,
                    "reported D = {reported} but the actual spread is {actual}"
                )
            }
            Violation::MinRuns { id, r, min } => {
                write!(f, "r_{id} = {r} is below the minimum {min}")
            }
            Violation::RateLower { rate, bound } => {
                write!(f, "collision rate {rate} is below {bound}")
            }
            Violation::RateUpper { rate, bound } => {
                write!(f, "collision rate {rate} is above {bound}")
            }
            Violation::Budget { total, max } => {
                write!(f, "total runs {total} exceed the budget {max}")
            }
        }
    }
}

/// Every violated constraint; empty means the solution is valid.
pub fn verify_solution(instance: &BalanceInstance, solution: &BalanceSolution) -> Vec<Violation> {
    let r = &solution.r;
    if r.len() != instance.pairs.len() {
        return vec![Violation::Shape {
            expected: instance.pairs.len(),
            got: r.len(),
        }];
    }
    let mut out = Vec::new();
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            let diff = r[i].abs_diff(r[j]);
            if diff > solution.d {
                out.push(Violation::PairSpread {
                    a: instance.pairs[i].id.clone(),
                    b: instance.pairs[j].id.clone(),
                    diff,
                    d: solution.d,
                });
            }
        }
    }
    let actual = spread(r);
    if actual != solution.d {
        out.push(Violation::SpreadMismatch {
            reported: solution.d,
            actual,
        });
    }
    for (p, &ri) in instance.pairs.iter().zip(r) {
        if ri < instance.min_runs {
            out.push(Violation::MinRuns {
                id: p.id.clone(),
                r: ri,
                min: instance.min_runs,
            });
        }
    }
    let total: u64 = r.iter().sum();
    if total == 0 || !instance.rate_above_lo(r) {
        out.push(Violation::RateLower {
            rate: instance.rate(r),
            bound: instance.rate_lo,
        });
    }
    if total > 0 && !instance.rate_below_hi(r) {
        out.push(Violation::RateUpper {
            rate: instance.rate(r),
            bound: instance.rate_hi,
        });
    }
    if total > instance.max_total_runs {
        out.push(Violation::Budget {
            total,
            max: instance.max_total_runs,
        });
    }
    out
}

/// One simulation run: timestamps observed and how many were collisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub timestamps: u64,
    pub collisions: u64,
}

/// Per-run means `(c_i, t_i)` for every pair.
pub fn estimate_stats(logs: &[(String, Vec<RunLog>)]) -> Result<Vec<PairStats>> {
    if logs.is_empty() {
        return Err(Error::InvalidInput("no run logs".into()));
    }
    logs.iter()
        .map(|(id, runs)| {
            if runs.is_empty() {
                return Err(Error::InvalidInput(format!("pair {id} has no runs")));
            }
            if let Some(bad) = runs.iter().find(|r| r.collisions > r.timestamps) {
                return Err(Error::InvalidInput(format!(
                    "pair {id}: {} collisions in {} timestamps",
                    bad.collisions, bad.timestamps
                )));
            }
            let n = runs.len() as f64;
            Ok(PairStats {
                id: id.clone(),
                c: runs.iter().map(|r| r.collisions as f64).sum::<f64>() / n,
                t: runs.iter().map(|r| r.timestamps as f64).sum::<f64>() / n,
            })
        })
        .collect()
}
