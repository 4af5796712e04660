//! Detection/ground-truth matching, FP/FN based miss rate and accuracy, and
//! per-image cell counts.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::head::Detection;

/// Class id of white blood cells.
pub const WBC_CLASS_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    /// A result carrying only counts (for replaying published tallies).
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        Self {
            tp,
            fp,
            fn_,
            pairs: Vec::new(),
        }
    }

    pub fn ground_truth(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn detections(&self) -> usize {
        self.tp + self.fp
    }
}

/// Greedy matching: detections in descending probability (ties by
/// ascending `x_min`, `y_min`, then input order) each claim the unclaimed
/// ground truth of highest IoU, provided that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.probability
            .total_cmp(&da.probability)
            .then(da.bbox.x_min.total_cmp(&db.bbox.x_min))
            .then(da.bbox.y_min.total_cmp(&db.bbox.y_min))
    });
    let mut claimed = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for d in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !claimed[*g])
            .map(|(g, gt)| (g, iou(&dets[d].bbox, gt)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= iou_threshold {
                claimed[g] = true;
                pairs.push(MatchedPair {
                    detection: d,
                    ground_truth: g,
                    iou: v,
                });
            }
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
    pub tp: usize,
    /// `fn / gt`.
    pub miss_rate: f64,
    /// `max(gt - fn - fp, 0) / gt`.
    pub accuracy: f64,
    /// Percent, rounded half-up to one decimal.
    pub miss_rate_percent: String,
    pub accuracy_percent: String,
    pub per_image_counts: Vec<usize>,
}

/// `num / den` as a percentage rounded half-up to one decimal, computed in
/// integer arithmetic: returns tenths of a percent.
fn percent_tenths(num: usize, den: usize) -> u128 {
    let (n, d) = (num as u128, den as u128);
    (2000 * n + d) / (2 * d)
}

fn format_tenths(t: u128) -> String {
    format!("{}.{}", t / 10, t % 10)
}

pub fn compute_metrics(results: &[MatchResult]) -> Result<MetricsReport> {
    let fp: usize = results.iter().map(|r| r.fp).sum();
    let fn_: usize = results.iter().map(|r| r.fn_).sum();
    let tp: usize = results.iter().map(|r| r.tp).sum();
    let gt = tp + fn_;
    if gt == 0 {
        return Err(Error::InvalidArgument(
            "metrics are undefined without ground-truth boxes".into(),
        ));
    }
    let correct = gt.saturating_sub(fn_ + fp);
    Ok(MetricsReport {
        images: results.len(),
        fp,
        fn_,
        gt,
        tp,
        miss_rate: fn_ as f64 / gt as f64,
        accuracy: correct as f64 / gt as f64,
        miss_rate_percent: format_tenths(percent_tenths(fn_, gt)),
        accuracy_percent: format_tenths(percent_tenths(correct, gt)),
        per_image_counts: results.iter().map(MatchResult::detections).collect(),
    })
}

impl MetricsReport {
    /// Aligned text table with the columns of the published results table.
    pub fn to_table(&self) -> String {
        let headers = [
            "No of Test Images",
            "False Positive",
            "False Negative",
            "Overall Miss Rate",
            "Overall Accuracy",
        ];
        let values = [
            self.images.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            format!("{}%", self.miss_rate_percent),
            format!("{}%", self.accuracy_percent),
        ];
        let widths: Vec<usize> = headers.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let headers: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        format!("{}\n{}\n", row(&headers), row(&values))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub per_image: Vec<usize>,
    pub total: usize,
}

pub fn count_cells(dets_per_image: &[Vec<Detection>]) -> CellCounts {
    let per_image: Vec<usize> = dets_per_image
        .iter()
        .map(|d| d.iter().filter(|x| x.class_id == WBC_CLASS_ID).count())
        .collect();
    let total = per_image.iter().sum();
    CellCounts { per_image, total }
}
