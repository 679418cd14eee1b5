//! Change-detection accuracy metrics. The changed class is the positive class.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: usize = 101;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Tally predictions against ground truth.
pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("confusion needs at least one pixel".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        c.add(p, g);
    }
    Ok(c)
}

/// Every scalar metric; `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rates {
    pub mar: Option<f64>,
    pub far: Option<f64>,
    pub oer: Option<f64>,
    pub pcc: Option<f64>,
    pub pre: Option<f64>,
    pub kappa: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let total = c.total();
    let pcc = ratio(c.tp + c.tn, total);
    // Expected chance agreement from the row and column marginals.
    let pre = (total > 0).then(|| {
        let n = total as f64;
        let changed = (c.tp + c.fn_) as f64 * (c.tp + c.fp) as f64;
        let unchanged = (c.tn + c.fp) as f64 * (c.tn + c.fn_) as f64;
        (changed + unchanged) / (n * n)
    });
    let kappa = match (pcc, pre) {
        (Some(pcc), Some(pre)) if pre != 1.0 => Some((pcc - pre) / (1.0 - pre)),
        _ => None,
    };
    let mar = ratio(c.fn_, c.tp + c.fn_);
    Rates {
        mar,
        far: ratio(c.fp, c.fp + c.tn),
        oer: pcc.map(|p| 1.0 - p),
        pcc,
        pre,
        kappa,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: mar.map(|m| 1.0 - m),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Threshold-ordered curve with its trapezoidal area.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub auc: f64,
}

impl Curve {
    pub fn from_points(points: Vec<CurvePoint>) -> Self {
        let auc = trapezoid_auc(&points);
        Self { points, auc }
    }
}

/// Area under the polyline through `points` after sorting by `x`.
pub fn trapezoid_auc(points: &[CurvePoint]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    sorted
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// One row per threshold: confusion counts plus the curve coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub far: f64,
    pub mar: f64,
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// FAR against MAR; smaller area is better.
    pub fm: Curve,
    /// Precision against recall; larger area is better.
    pub pr: Curve,
    /// Thresholds whose precision is undefined (nothing predicted changed).
    pub dropped_pr_points: usize,
}

/// Uniformly spaced thresholds over `[0, 1]`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Sweep the decision threshold over `[0, 1]`; a pixel is changed when its
/// probability strictly exceeds the threshold.
pub fn sweep_curves(prob: &[f64], gt: &[bool], n_thresholds: usize) -> Result<Sweep> {
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 thresholds, got {n_thresholds}"
        )));
    }
    if prob.len() != gt.len() || prob.is_empty() {
        return Err(Error::shape("sweep_curves", &[prob.len()], &[gt.len()]));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 || positives == gt.len() {
        return Err(Error::Undefined(
            "ground truth contains a single class; FAR or MAR is undefined".into(),
        ));
    }

    // Sort once and count by binary search instead of re-scanning per threshold.
    let mut pos: Vec<f64> = Vec::with_capacity(positives);
    let mut neg: Vec<f64> = Vec::with_capacity(gt.len() - positives);
    for (&p, &g) in prob.iter().zip(gt) {
        if g {
            pos.push(p)
        } else {
            neg.push(p)
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let above = |sorted: &[f64], t: f64| (sorted.len() - sorted.partition_point(|&v| v <= t)) as u64;

    let mut rows = Vec::with_capacity(n_thresholds);
    let mut fm = Vec::with_capacity(n_thresholds);
    let mut pr = Vec::with_capacity(n_thresholds);
    let mut dropped = 0;
    for t in thresholds(n_thresholds) {
        let tp = above(&pos, t);
        let fp = above(&neg, t);
        let counts = ConfusionCounts {
            tp,
            fp,
            tn: neg.len() as u64 - fp,
            fn_: pos.len() as u64 - tp,
        };
        let r = rates(&counts);
        let (far, mar, recall) = (r.far.unwrap_or(0.0), r.mar.unwrap_or(0.0), r.recall.unwrap_or(0.0));
        fm.push(CurvePoint {
            threshold: t,
            x: mar,
            y: far,
        });
        match r.precision {
            Some(p) => pr.push(CurvePoint {
                threshold: t,
                x: recall,
                y: p,
            }),
            None => dropped += 1,
        }
        rows.push(SweepRow {
            threshold: t,
            counts,
            far,
            mar,
            precision: r.precision,
            recall,
        });
    }
    Ok(Sweep {
        rows,
        fm: Curve::from_points(fm),
        pr: Curve::from_points(pr),
        dropped_pr_points: dropped,
    })
}

/// `threshold,far,mar,precision,recall`; undefined precision is left empty.
pub fn sweep_csv(sweep: &Sweep) -> String {
    let mut out = String::from("threshold,far,mar,precision,recall\n");
    for r in &sweep.rows {
        let precision = r.precision.map(|p| format!("{p:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{:.2},{:.6},{:.6},{},{:.6}\n",
            r.threshold, r.far, r.mar, precision, r.recall
        ));
    }
    out
}
