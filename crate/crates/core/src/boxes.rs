//! Axis-aligned box algebra: IoU, anchor grids, delta encoding, clipping and
//! greedy non-maximum suppression.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner;
//! a box's area is `(x_max - x_min) * (y_max - y_min)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Validated constructor; requires finite coordinates with positive extent.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidArgument(format!("degenerate box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contained_in(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

/// A box with a confidence score and class id (0 = background, 1 = WBC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Anchor layout: `k = scales.len() * ratios.len()` anchors per feature cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Side length in pixels of the square anchor with ratio 1.
    pub scales: Vec<f64>,
    /// Width divided by height.
    pub ratios: Vec<f64>,
    /// Pixels per feature-map cell.
    pub stride: usize,
}

impl AnchorSpec {
    pub fn k(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::InvalidArgument("anchor scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("anchor scales and ratios must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("anchor stride must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 24.0, 32.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 4,
        }
    }
}

/// Box deltas `(tx, ty, tw, th)` of a target relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Anchors for a `feat_w x feat_h` grid, ordered by row, then column, then
/// `(scale, ratio)` with ratio varying fastest. Each anchor is centred on its
/// cell's image-space centre; for scale `s` and ratio `r` the box is
/// `s*sqrt(r)` wide and `s/sqrt(r)` tall.
pub fn generate_anchors(feat_w: usize, feat_h: usize, spec: &AnchorSpec) -> Result<Vec<BBox>> {
    spec.validate()?;
    if feat_w == 0 || feat_h == 0 {
        return Err(Error::InvalidArgument("feature grid must be at least 1x1".into()));
    }
    let stride = spec.stride as f64;
    // cell (0, 0) anchors, shifted to every other cell
    let base: Vec<BBox> = spec
        .scales
        .iter()
        .flat_map(|&s| spec.ratios.iter().map(move |&r| (s * r.sqrt(), s / r.sqrt())))
        .map(|(w, h)| BBox::from_center(0.5 * stride, 0.5 * stride, w, h))
        .collect();
    let mut anchors = Vec::with_capacity(feat_w * feat_h * base.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (dx, dy) = (x as f64 * stride, y as f64 * stride);
            anchors.extend(base.iter().map(|b| b.translate(dx, dy)));
        }
    }
    Ok(anchors)
}

pub fn encode_box(anchor: &BBox, gt: &BBox) -> RegressionTarget {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    RegressionTarget {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    }
}

pub fn decode_box(anchor: &BBox, t: &RegressionTarget) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(ax + t.tx * aw, ay + t.ty * ah, aw * t.tw.exp(), ah * t.th.exp())
}

/// Clamps to `[0, img_w] x [0, img_h]`; `None` if nothing of positive area remains.
pub fn clip_box(b: &BBox, img_w: usize, img_h: usize) -> Option<BBox> {
    let (w, h) = (img_w as f64, img_h as f64);
    let clipped = BBox {
        x_min: b.x_min.clamp(0.0, w),
        y_min: b.y_min.clamp(0.0, h),
        x_max: b.x_max.clamp(0.0, w),
        y_max: b.y_max.clamp(0.0, h),
    };
    clipped.is_valid().then_some(clipped)
}

/// Detection order: score descending, ties by ascending `x_min` then `y_min`.
pub fn score_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
}

/// Greedy NMS: take the best remaining box, drop every remaining box whose
/// IoU with it exceeds `iou_threshold`, repeat until `max_keep` boxes are kept.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, max_keep: usize) -> Vec<ScoredBox> {
    let mut order: Vec<ScoredBox> = boxes.to_vec();
    order.sort_by(score_order);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if keep.len() >= max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        let best = order[i];
        keep.push(best);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(&best.bbox, &order[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
