//! Proposal evaluation: average recall at a proposal budget and the area
//! under the AR-AN curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{interval_iou, Interval};

/// `0.5:0.05:0.95`.
pub fn activitynet_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// `0.5:0.05:1.0`.
pub fn thumos_thresholds() -> Vec<f64> {
    (0..11).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Budgets reported alongside the AUC.
pub const REPORT_BUDGETS: [usize; 5] = [1, 5, 10, 50, 100];
/// The AUC integrates AR over `AN = 1..=AUC_MAX_BUDGET`.
pub const AUC_MAX_BUDGET: usize = 100;

/// Ranked proposals and ground truths of one video, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub id: String,
    pub proposals: Vec<Interval>,
    pub gts: Vec<Interval>,
}

/// Per ground truth, the best IoU among the top-`k` proposals for
/// `k = 1..=max_budget`, indexed `[gt][k - 1]`.
fn best_iou_prefix(video: &VideoEval, max_budget: usize) -> Result<Vec<Vec<f64>>> {
    video
        .gts
        .iter()
        .map(|&gt| {
            let mut best = 0.0f64;
            let mut row = Vec::with_capacity(max_budget);
            for k in 0..max_budget {
                if let Some(&p) = video.proposals.get(k) {
                    best = best.max(interval_iou(p, gt)?);
                }
                row.push(best);
            }
            Ok(row)
        })
        .collect()
}

/// Recall matrix averaged over videos: `[threshold][budget - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub max_budget: usize,
    pub recall: Vec<Vec<f64>>,
    /// Videos without ground truth, left out of every average.
    pub excluded: Vec<String>,
}

impl RecallCurve {
    pub fn compute(videos: &[VideoEval], thresholds: &[f64], max_budget: usize) -> Result<Self> {
        if thresholds.is_empty() || max_budget == 0 {
            return Err(Error::Invalid("recall needs at least one threshold and a positive budget".into()));
        }
        let mut recall = vec![vec![0.0; max_budget]; thresholds.len()];
        let mut excluded = Vec::new();
        let mut counted = 0usize;
        for video in videos {
            if video.gts.is_empty() {
                excluded.push(video.id.clone());
                continue;
            }
            counted += 1;
            let best = best_iou_prefix(video, max_budget)?;
            let n = video.gts.len() as f64;
            for (row, &t) in recall.iter_mut().zip(thresholds) {
                for (k, slot) in row.iter_mut().enumerate() {
                    let hits = best.iter().filter(|b| b[k] >= t).count();
                    *slot += hits as f64 / n;
                }
            }
        }
        if counted == 0 {
            return Err(Error::Invalid("no video with ground truth to evaluate".into()));
        }
        for v in recall.iter_mut().flatten() {
            *v /= counted as f64;
        }
        Ok(Self {
            thresholds: thresholds.to_vec(),
            max_budget,
            recall,
            excluded,
        })
    }

    /// AR at budget `an`, averaged over thresholds.
    pub fn average_recall(&self, an: usize) -> f64 {
        let k = an.clamp(1, self.max_budget) - 1;
        self.recall.iter().map(|row| row[k]).sum::<f64>() / self.thresholds.len() as f64
    }

    pub fn ar_curve(&self) -> Vec<f64> {
        (1..=self.max_budget).map(|an| self.average_recall(an)).collect()
    }
}

/// Mean over videos of the threshold-averaged recall of the top-`an` proposals.
pub fn average_recall(videos: &[VideoEval], an: usize, thresholds: &[f64]) -> Result<f64> {
    Ok(RecallCurve::compute(videos, thresholds, an.max(1))?.average_recall(an))
}

/// Trapezoidal area under AR over `AN = 1..=n`, scaled so constant AR 1 gives 100.
pub fn auc_of_curve(ar: &[f64]) -> Result<f64> {
    if ar.len() < 2 {
        return Err(Error::Invalid("AUC needs an AR curve over at least two budgets".into()));
    }
    let area: f64 = ar.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(100.0 * area / (ar.len() - 1) as f64)
}

pub fn auc_metric(videos: &[VideoEval], thresholds: &[f64]) -> Result<f64> {
    auc_of_curve(&RecallCurve::compute(videos, thresholds, AUC_MAX_BUDGET)?.ar_curve())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(AN, AR)` at [`REPORT_BUDGETS`].
    pub ar_at: Vec<(usize, f64)>,
    pub auc: f64,
    pub curve: RecallCurve,
}

impl EvalReport {
    pub fn compute(videos: &[VideoEval], thresholds: &[f64]) -> Result<Self> {
        let curve = RecallCurve::compute(videos, thresholds, AUC_MAX_BUDGET)?;
        Ok(Self {
            ar_at: REPORT_BUDGETS.iter().map(|&an| (an, curve.average_recall(an))).collect(),
            auc: auc_of_curve(&curve.ar_curve())?,
            curve,
        })
    }

    pub fn ar(&self, an: usize) -> f64 {
        self.curve.average_recall(an)
    }

    /// Summary table: one `AR@AN` row per reported budget plus the AUC.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (an, ar) in &self.ar_at {
            s.push_str(&format!("AR@{an},{ar}\n"));
        }
        s.push_str(&format!("AUC,{}\n", self.auc));
        s
    }

    /// `threshold,AR@1,...,AR@max` rows of the recall matrix.
    pub fn recall_matrix_csv(&self) -> String {
        let mut s = String::from("iou_threshold");
        for an in 1..=self.curve.max_budget {
            s.push_str(&format!(",AN{an}"));
        }
        s.push('\n');
        for (t, row) in self.curve.thresholds.iter().zip(&self.curve.recall) {
            s.push_str(&format!("{t}"));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}
