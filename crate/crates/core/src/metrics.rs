//! Binary classification metrics over real-valued scores (higher means more
//! likely positive). Equal scores always form one threshold group.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recall levels reported by [`build_report`].
pub const RECALL_LEVELS: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

/// One threshold group: every sample scoring `>= threshold` is predicted
/// positive. `tp`/`fp` are cumulative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            what: "scores/labels",
            expected: scores.len().to_string(),
            got: labels.len().to_string(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} is not 0 or 1")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    Ok((n_pos, labels.len() as u64 - n_pos))
}

fn need_both(n_pos: u64, n_neg: u64) -> Result<()> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "need both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok(())
}

/// Threshold sweep in descending score order.
pub fn sweep(scores: &[f64], labels: &[u8]) -> Result<Vec<Step>> {
    check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps: Vec<Step> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push(Step {
            threshold: s,
            tp,
            fp,
        });
    }
    Ok(steps)
}

/// Mann-Whitney AUROC with half credit for ties, computed as the exact
/// integer `2 * concordant + ties` over `2 * n_pos * n_neg`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check(scores, labels)?;
    need_both(n_pos, n_neg)?;
    let steps = sweep(scores, labels)?;
    // walking down the ranking, each new positive beats every negative not
    // yet seen and ties with the negatives in its own group
    let mut twice: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for s in &steps {
        let (dp, dn) = (s.tp - prev_tp, s.fp - prev_fp);
        let below = n_neg - s.fp;
        twice += 2 * dp as u128 * below as u128 + dp as u128 * dn as u128;
        prev_tp = s.tp;
        prev_fp = s.fp;
    }
    Ok(twice as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Step-wise area under the precision-recall curve,
/// `sum_k (R_k - R_{k-1}) P_k` over threshold groups.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, _) = check(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::Metric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for s in sweep(scores, labels)? {
        if s.tp > prev_tp {
            let precision = s.tp as f64 / (s.tp + s.fp) as f64;
            ap += (s.tp - prev_tp) as f64 / n_pos as f64 * precision;
            prev_tp = s.tp;
        }
    }
    Ok(ap)
}

/// Largest precision over thresholds whose recall is at least `r`.
pub fn precision_at_recall(scores: &[f64], labels: &[u8], r: f64) -> Result<f64> {
    let (n_pos, n_neg) = check(scores, labels)?;
    need_both(n_pos, n_neg)?;
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "recall level must be in (0, 1], got {r}"
        )));
    }
    Ok(sweep(scores, labels)?
        .iter()
        .filter(|s| s.tp as f64 / n_pos as f64 >= r)
        .map(|s| s.tp as f64 / (s.tp + s.fp) as f64)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `None` for the ROC origin, which sits above every score.
    pub threshold: Option<f64>,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub ap: f64,
    /// Keyed by recall level formatted with one decimal ("0.3", ..., "1.0").
    pub pr_at: BTreeMap<String, f64>,
    pub n_pos: u64,
    pub n_neg: u64,
    /// (false positive rate, true positive rate), from (0, 0) to (1, 1).
    pub roc_points: Vec<CurvePoint>,
    /// (recall, precision), one point per threshold group.
    pub pr_points: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn pr(&self, level: f64) -> Option<f64> {
        self.pr_at.get(&format!("{level:.1}")).copied()
    }
}

pub fn build_report(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let (n_pos, n_neg) = check(scores, labels)?;
    need_both(n_pos, n_neg)?;
    let steps = sweep(scores, labels)?;
    let mut roc_points = vec![CurvePoint {
        threshold: None,
        x: 0.0,
        y: 0.0,
    }];
    roc_points.extend(steps.iter().map(|s| CurvePoint {
        threshold: Some(s.threshold),
        x: s.fp as f64 / n_neg as f64,
        y: s.tp as f64 / n_pos as f64,
    }));
    let pr_points = steps
        .iter()
        .map(|s| CurvePoint {
            threshold: Some(s.threshold),
            x: s.tp as f64 / n_pos as f64,
            y: s.tp as f64 / (s.tp + s.fp) as f64,
        })
        .collect();
    let mut pr_at = BTreeMap::new();
    for r in RECALL_LEVELS {
        pr_at.insert(format!("{r:.1}"), precision_at_recall(scores, labels, r)?);
    }
    Ok(EvalReport {
        auroc: roc_auc(scores, labels)?,
        ap: average_precision(scores, labels)?,
        pr_at,
        n_pos,
        n_neg,
        roc_points,
        pr_points,
    })
}

/// Trapezoid area under the ROC points.
pub fn trapezoid_area(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0)
        .sum()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman needs two equal-length series of length >= 2".into(),
        ));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("spearman of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,x,y\n");
    for p in points {
        match p.threshold {
            Some(t) => writeln!(out, "{t},{},{}", p.x, p.y).unwrap(),
            None => writeln!(out, "inf,{},{}", p.x, p.y).unwrap(),
        }
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `roc.csv`, `pr.csv` and `curves.svg` into `dir`.
pub fn write_report_dir(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_file(
        &dir.join("roc.csv"),
        curve_csv(&report.roc_points).as_bytes(),
    )?;
    write_file(&dir.join("pr.csv"), curve_csv(&report.pr_points).as_bytes())?;
    write_file(
        &dir.join("curves.svg"),
        render_curves_svg(&[(name, report)]).as_bytes(),
    )
}

pub fn write_curve_csvs(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_file(
        &dir.join(format!("{stem}.roc.csv")),
        curve_csv(&report.roc_points).as_bytes(),
    )?;
    write_file(
        &dir.join(format!("{stem}.pr.csv")),
        curve_csv(&report.pr_points).as_bytes(),
    )
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// ROC and PR panels side by side, axes fixed to [0, 1].
pub fn render_curves_svg(curves: &[(&str, &EvalReport)]) -> String {
    const W: f64 = 360.0;
    const PAD: f64 = 50.0;
    let mut svg = String::new();
    let total_w = 2.0 * (W + 2.0 * PAD);
    let total_h = W + 2.0 * PAD + 20.0 * curves.len() as f64;
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let panels = [
        ("ROC", "false positive rate", "true positive rate"),
        ("Precision-Recall", "recall", "precision"),
    ];
    for (pi, (title, xl, yl)) in panels.iter().enumerate() {
        let ox = pi as f64 * (W + 2.0 * PAD) + PAD;
        let oy = PAD;
        let px = |x: f64| ox + x * W;
        let py = |y: f64| oy + (1.0 - y) * W;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{title}</text>"#,
            px(0.5),
            oy - 15.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<rect x="{ox}" y="{oy}" width="{W}" height="{W}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        for t in 0..=5 {
            let v = t as f64 / 5.0;
            writeln!(
                svg,
                r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd"/>"##,
                px(v),
                py(0.0),
                px(v),
                py(1.0)
            )
            .unwrap();
            writeln!(
                svg,
                r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd"/>"##,
                px(0.0),
                py(v),
                px(1.0),
                py(v)
            )
            .unwrap();
            writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#,
                px(v),
                py(0.0) + 16.0
            )
            .unwrap();
            writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
                px(0.0) - 5.0,
                py(v) + 4.0
            )
            .unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{xl}</text>"#,
            px(0.5),
            py(0.0) + 34.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{yl}</text>"#,
            px(0.0) - 35.0,
            py(0.5),
            px(0.0) - 35.0,
            py(0.5)
        )
        .unwrap();
        for (ci, (_, report)) in curves.iter().enumerate() {
            let pts: Vec<(f64, f64)> = if pi == 0 {
                report.roc_points.iter().map(|p| (p.x, p.y)).collect()
            } else {
                // step-wise: precision holds until the next recall level
                let mut v = Vec::new();
                let mut prev_x = 0.0;
                for p in &report.pr_points {
                    v.push((prev_x, p.y));
                    v.push((p.x, p.y));
                    prev_x = p.x;
                }
                v
            };
            let path: Vec<String> = pts
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
                .collect();
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                PALETTE[ci % PALETTE.len()],
                path.join(" ")
            )
            .unwrap();
        }
    }
    for (ci, (name, report)) in curves.iter().enumerate() {
        let y = W + 2.0 * PAD + 20.0 * ci as f64 + 5.0;
        writeln!(
            svg,
            r#"<rect x="{PAD}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{name}: AUROC {:.3}, AP {:.3}</text>"#,
            y - 10.0,
            PALETTE[ci % PALETTE.len()],
            PAD + 18.0,
            y,
            report.auroc,
            report.ap
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
