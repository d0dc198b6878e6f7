//! Dense two-phase simplex and a depth-first branch-and-bound on top of it.
//! Meant for a few dozen variables and rows; Bland's rule keeps it from
//! cycling at the cost of speed.

const EPS: f64 = 1e-9;
const INT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coef: Vec<f64>,
    pub cmp: Cmp,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

/// Minimises `c . x` subject to `rows` and `x >= 0`.
fn simplex(c: &[f64], rows: &[Row]) -> LpOutcome {
    let n = c.len();
    let m = rows.len();
    // column layout: originals | one slack/surplus per inequality | artificials
    let n_slack = rows.iter().filter(|r| r.cmp != Cmp::Eq).count();
    let mut normalized: Vec<(Vec<f64>, Cmp, f64)> = rows
        .iter()
        .map(|r| {
            if r.rhs < 0.0 {
                let flip = match r.cmp {
                    Cmp::Le => Cmp::Ge,
                    Cmp::Ge => Cmp::Le,
                    Cmp::Eq => Cmp::Eq,
                };
                (r.coef.iter().map(|v| -v).collect(), flip, -r.rhs)
            } else {
                (r.coef.clone(), r.cmp, r.rhs)
            }
        })
        .collect();
    let n_art = normalized.iter().filter(|r| r.1 != Cmp::Le).count();
    let width = n + n_slack + n_art;
    let mut t = vec![vec![0.0; width + 1]; m];
    let mut basis = vec![0usize; m];
    let (mut s, mut a) = (n, n + n_slack);
    for (i, (coef, cmp, rhs)) in normalized.iter_mut().enumerate() {
        t[i][..n].copy_from_slice(coef);
        t[i][width] = *rhs;
        match cmp {
            Cmp::Le => {
                t[i][s] = 1.0;
                basis[i] = s;
                s += 1;
            }
            Cmp::Ge => {
                t[i][s] = -1.0;
                s += 1;
                t[i][a] = 1.0;
                basis[i] = a;
                a += 1;
            }
            Cmp::Eq => {
                t[i][a] = 1.0;
                basis[i] = a;
                a += 1;
            }
        }
    }
    let art_start = n + n_slack;

    if n_art > 0 {
        let mut cost = vec![0.0; width];
        cost[art_start..].iter_mut().for_each(|v| *v = 1.0);
        if !run(&mut t, &mut basis, &cost, width) {
            return LpOutcome::Unbounded;
        }
        let infeas: f64 = basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| b >= art_start)
            .map(|(i, _)| t[i][width])
            .sum();
        let scale = 1.0 + rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
        if infeas > EPS * scale {
            return LpOutcome::Infeasible;
        }
        // pivot leftover (zero-valued) artificials out of the basis
        let mut i = 0;
        while i < t.len() {
            if basis[i] >= art_start {
                if let Some(j) = (0..art_start).find(|&j| t[i][j].abs() > EPS) {
                    pivot(&mut t, &mut basis, i, j);
                } else {
                    t.remove(i);
                    basis.remove(i);
                    continue;
                }
            }
            i += 1;
        }
    }
    for row in t.iter_mut() {
        let rhs = row[width];
        row.truncate(art_start);
        row.push(rhs);
    }
    let mut cost = vec![0.0; art_start];
    cost[..n].copy_from_slice(c);
    if !run(&mut t, &mut basis, &cost, art_start) {
        return LpOutcome::Unbounded;
    }
    let mut x = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            x[b] = t[i][art_start];
        }
    }
    let objective = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    LpOutcome::Optimal { x, objective }
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, col: usize) {
    let p = t[r][col];
    t[r].iter_mut().for_each(|v| *v /= p);
    let pivot_row = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r {
            let f = row[col];
            if f != 0.0 {
                row.iter_mut()
                    .zip(&pivot_row)
                    .for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    basis[r] = col;
}

/// Primal simplex with Bland's rule on the first `width` columns (the last
/// tableau column is the right-hand side). Returns false when unbounded.
fn run(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], width: usize) -> bool {
    loop {
        // reduced costs c_j - c_B B^-1 A_j
        let entering = (0..width).find(|&j| {
            let z: f64 = basis
                .iter()
                .enumerate()
                .map(|(i, &b)| cost[b] * t[i][j])
                .sum();
            cost[j] - z < -EPS
        });
        let Some(col) = entering else { return true };
        let mut best: Option<(usize, f64)> = None;
        for i in 0..t.len() {
            if t[i][col] > EPS {
                let ratio = t[i][width] / t[i][col];
                best = match best {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        if ratio < br - EPS || (ratio <= br + EPS && basis[i] < basis[bi]) {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = best else { return false };
        pivot(t, basis, r, col);
    }
}

/// Pure integer program: minimise `c . x`, `lower <= x <= upper`, integer
/// `x`, subject to `rows`.
#[derive(Debug, Clone)]
pub struct IntegerProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntegerProgram {
    /// LP relaxation in the original variables.
    pub fn relax(&self, lower: &[f64], upper: &[f64]) -> LpOutcome {
        let n = self.objective.len();
        if lower.iter().zip(upper).any(|(l, u)| l > u) {
            return LpOutcome::Infeasible;
        }
        // substitute x = lower + y, y >= 0
        let mut rows: Vec<Row> = self
            .rows
            .iter()
            .map(|r| Row {
                coef: r.coef.clone(),
                cmp: r.cmp,
                rhs: r.rhs - r.coef.iter().zip(lower).map(|(a, l)| a * l).sum::<f64>(),
            })
            .collect();
        for j in 0..n {
            if upper[j].is_finite() {
                let mut coef = vec![0.0; n];
                coef[j] = 1.0;
                rows.push(Row {
                    coef,
                    cmp: Cmp::Le,
                    rhs: upper[j] - lower[j],
                });
            }
        }
        match simplex(&self.objective, &rows) {
            LpOutcome::Optimal { x, .. } => {
                let x: Vec<f64> = x.iter().zip(lower).map(|(y, l)| y + l).collect();
                let objective = self.objective.iter().zip(&x).map(|(a, b)| a * b).sum();
                LpOutcome::Optimal { x, objective }
            }
            other => other,
        }
    }

    /// Depth-first branch and bound. `accept` re-checks a rounded integer
    /// point and returns its objective, or `None` to reject it. The
    /// objective must take integer values at integer points.
    pub fn solve(&self, accept: &dyn Fn(&[i64]) -> Option<i64>) -> Option<(Vec<i64>, i64)> {
        let mut best: Option<(Vec<i64>, i64)> = None;
        let mut stack = vec![(self.lower.clone(), self.upper.clone())];
        while let Some((lo, hi)) = stack.pop() {
            let LpOutcome::Optimal { x, objective } = self.relax(&lo, &hi) else {
                continue;
            };
            let bound = (objective - INT_TOL).ceil() as i64;
            if let Some((_, inc)) = &best {
                if bound >= *inc {
                    continue;
                }
            }
            let frac = x
                .iter()
                .enumerate()
                .map(|(j, v)| (j, (v - v.round()).abs()))
                .filter(|&(_, f)| f > INT_TOL)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match frac {
                None => {
                    let xi: Vec<i64> = x.iter().map(|v| v.round() as i64).collect();
                    if let Some(obj) = accept(&xi) {
                        if best.as_ref().is_none_or(|(_, inc)| obj < *inc) {
                            best = Some((xi, obj));
                        }
                    }
                }
                Some((j, _)) => {
                    let (mut down_hi, mut up_lo) = (hi.clone(), lo.clone());
                    down_hi[j] = x[j].floor();
                    up_lo[j] = x[j].ceil();
                    // explore the nearer side first (it is pushed last)
                    if x[j] - x[j].floor() < 0.5 {
                        stack.push((up_lo, hi));
                        stack.push((lo, down_hi));
                    } else {
                        stack.push((lo, down_hi));
                        stack.push((up_lo, hi));
                    }
                }
            }
        }
        best
    }
}
