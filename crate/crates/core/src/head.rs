//! Detection stage: ROI max pooling over the shared feature map, the
//! fully-connected classifier with its class-softmax and box-regression
//! branches, and end-to-end inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{clip_box, decode_box, nms, score_order, BBox, RegressionTarget, ScoredBox};
use crate::error::{Error, Result};
use crate::model::{denormalize_target, Detector};
use crate::rpn::ProposalConfig;
use crate::tensor::ops::softmax;
use crate::tensor::{LayerSpec, Parameter, Sequential, Tensor};

/// A `[C, P, P]` pooled region and, per output cell, the flat feature-map
/// index it was taken from (`None` for bins that fell outside the map).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub tensor: Tensor,
    pub argmax: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub probability: f64,
}

/// Integer cell range `[lo, hi)` covered by the continuous span `[a, b)`,
/// rounded outward, at least one cell wide, clipped to `[0, n)`.
fn bin_range(a: f64, b: f64, n: usize) -> (usize, usize) {
    let lo = a.floor();
    let mut hi = b.ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let clamp = |v: f64| v.clamp(0.0, n as f64) as usize;
    (clamp(lo), clamp(hi))
}

/// Max-pools the region `proposal * spatial_scale` of `feature_map` into a
/// `pooled x pooled` grid of evenly partitioned bins.
pub fn roi_pool(feature_map: &Tensor, proposal: &BBox, spatial_scale: f64, pooled: usize) -> Result<RoiFeature> {
    let (c, h, w) = feature_map.dims3()?;
    if pooled == 0 || !(spatial_scale > 0.0) {
        return Err(Error::InvalidArgument("roi pooling needs pooled >= 1 and a positive scale".into()));
    }
    let x0 = proposal.x_min * spatial_scale;
    let y0 = proposal.y_min * spatial_scale;
    let x1 = proposal.x_max * spatial_scale;
    let y1 = proposal.y_max * spatial_scale;
    if !(x1 > 0.0 && y1 > 0.0 && x0 < w as f64 && y0 < h as f64) {
        return Err(Error::InvalidArgument(format!(
            "proposal {proposal:?} lies outside the {w}x{h} feature map"
        )));
    }
    let edge = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / pooled as f64;
    let cols: Vec<(usize, usize)> = (0..pooled)
        .map(|j| bin_range(edge(x0, x1, j), edge(x0, x1, j + 1), w))
        .collect();
    let rows: Vec<(usize, usize)> = (0..pooled)
        .map(|i| bin_range(edge(y0, y1, i), edge(y0, y1, i + 1), h))
        .collect();
    let data = feature_map.data();
    let mut out = Vec::with_capacity(c * pooled * pooled);
    let mut argmax = Vec::with_capacity(c * pooled * pooled);
    for ci in 0..c {
        for &(ry0, ry1) in &rows {
            for &(rx0, rx1) in &cols {
                let mut best: Option<(usize, f64)> = None;
                for y in ry0..ry1 {
                    for x in rx0..rx1 {
                        let idx = (ci * h + y) * w + x;
                        if best.is_none_or(|(_, v)| data[idx] > v) {
                            best = Some((idx, data[idx]));
                        }
                    }
                }
                out.push(best.map_or(0.0, |(_, v)| v));
                argmax.push(best.map(|(i, _)| i));
            }
        }
    }
    Ok(RoiFeature {
        tensor: Tensor::new(vec![c, pooled, pooled], out)?,
        argmax,
    })
}

/// Adds the gradient of every pooled cell into its argmax feature cell.
pub fn roi_pool_backward(grad_features: &mut Tensor, roi: &RoiFeature, grad: &Tensor) -> Result<()> {
    if grad.shape() != roi.tensor.shape() {
        return Err(Error::Shape("roi gradient shape mismatch".into()));
    }
    let gf = grad_features.data_mut();
    for (idx, g) in roi.argmax.iter().zip(grad.data()) {
        if let Some(i) = idx {
            gf[*i] += g;
        }
    }
    Ok(())
}

/// Class probabilities and per-foreground-class deltas for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub probabilities: Vec<f64>,
    pub deltas: Vec<RegressionTarget>,
}

/// Fully-connected trunk with a class-logit branch and a box-delta branch
/// (one delta quadruple per foreground class).
#[derive(Debug, Clone)]
pub struct DetectorHead {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub trunk: Sequential,
    pub cls: Sequential,
    pub reg: Sequential,
}

impl DetectorHead {
    pub fn new(channels: usize, pooled: usize, hidden: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("head needs background plus at least one class".into()));
        }
        let inputs = channels * pooled * pooled;
        let fc = |inputs, outputs| LayerSpec::FullyConnected { inputs, outputs };
        Ok(Self {
            input_shape: [channels, pooled, pooled],
            num_classes,
            trunk: Sequential::from_specs("head.fc", &[fc(inputs, hidden), LayerSpec::Relu], rng)?,
            cls: Sequential::from_specs("head.cls", &[fc(hidden, num_classes)], rng)?,
            reg: Sequential::from_specs("head.reg", &[fc(hidden, 4 * (num_classes - 1))], rng)?,
        })
    }

    fn check(&self, roi: &Tensor) -> Result<()> {
        if roi.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "head expects {:?}, got {:?}",
                self.input_shape,
                roi.shape()
            )));
        }
        Ok(())
    }

    fn split_deltas(t: &Tensor) -> Vec<RegressionTarget> {
        t.data()
            .chunks_exact(4)
            .map(|c| RegressionTarget::from_array([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    /// Training forward: returns `(class logits, deltas)` and retains activations.
    pub fn forward(&mut self, roi: &Tensor) -> Result<(Tensor, Vec<RegressionTarget>)> {
        self.check(roi)?;
        let h = self.trunk.forward(roi)?;
        let logits = self.cls.forward(&h)?;
        let deltas = Self::split_deltas(&self.reg.forward(&h)?);
        Ok((logits, deltas))
    }

    /// Returns the gradient with respect to the pooled input.
    pub fn backward(&mut self, grad_logits: &Tensor, grad_deltas: &[[f64; 4]]) -> Result<Tensor> {
        let gd: Vec<f64> = grad_deltas.iter().flatten().copied().collect();
        let gd = Tensor::new(vec![gd.len()], gd)?;
        let mut gh = self.cls.backward(grad_logits)?;
        gh.add_assign(&self.reg.backward(&gd)?)?;
        self.trunk.backward(&gh)
    }

    pub fn classify(&self, roi: &Tensor) -> Result<HeadOutput> {
        self.check(roi)?;
        let h = self.trunk.infer(roi)?;
        let probs = softmax(&self.cls.infer(&h)?);
        Ok(HeadOutput {
            probabilities: probs.into_data(),
            deltas: Self::split_deltas(&self.reg.infer(&h)?),
        })
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.trunk.params().chain(self.cls.params()).chain(self.reg.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.trunk
            .params_mut()
            .chain(self.cls.params_mut())
            .chain(self.reg.params_mut())
    }
}

pub fn classify_rois(roi: &RoiFeature, head: &DetectorHead) -> Result<HeadOutput> {
    head.classify(&roi.tensor)
}

/// Full inference: backbone, proposals, ROI pooling, classification,
/// class-specific box decoding, thresholding and per-class NMS. Output is
/// sorted by descending probability.
pub fn detect(
    image: &Tensor,
    model: &Detector,
    proposal_cfg: &ProposalConfig,
    score_threshold: f64,
    final_nms_iou: f64,
) -> Result<Vec<Detection>> {
    let (_, img_h, img_w) = image.dims3()?;
    let features = model.features(image)?;
    let proposals = model.propose(&features, img_w, img_h, proposal_cfg)?;
    let scale = model.config.spatial_scale();

    let mut per_class: Vec<Vec<ScoredBox>> = vec![Vec::new(); model.head.num_classes];
    for p in &proposals {
        let roi = roi_pool(&features, &p.bbox, scale, model.config.pooled)?;
        let out = classify_rois(&roi, &model.head)?;
        for class in 1..model.head.num_classes {
            let prob = out.probabilities[class];
            if prob < score_threshold {
                continue;
            }
            if let Some(bbox) = clip_box(&decode_box(&p.bbox, &denormalize_target(&out.deltas[class - 1], &model.config.head_target_stds)), img_w, img_h) {
                per_class[class].push(ScoredBox {
                    bbox,
                    score: prob,
                    class_id: class,
                });
            }
        }
    }
    let mut kept: Vec<ScoredBox> = per_class
        .iter()
        .flat_map(|boxes| nms(boxes, final_nms_iou, usize::MAX))
        .collect();
    kept.sort_by(score_order);
    Ok(kept
        .into_iter()
        .map(|s| Detection {
            bbox: s.bbox,
            class_id: s.class_id,
            probability: s.score,
        })
        .collect())
}
