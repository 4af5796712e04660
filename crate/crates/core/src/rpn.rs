//! Region proposal network: anchor labelling, minibatch sampling, the
//! two-term objectness/regression loss, the convolutional head, and proposal
//! generation.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{clip_box, decode_box, encode_box, iou, nms, score_order, BBox, RegressionTarget, ScoredBox};
use crate::error::{Error, Result};
use crate::tensor::ops::{smooth_l1, smooth_l1_grad, softmax};
use crate::tensor::{LayerSpec, Parameter, Sequential, Tensor};

/// Largest log-scale delta applied when decoding proposals (`ln(1000/16)`).
pub const MAX_LOG_DELTA: f64 = 4.135166556742356;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelState {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLabel {
    pub state: LabelState,
    pub matched_gt: Option<usize>,
}

impl AnchorLabel {
    const NEGATIVE: Self = Self {
        state: LabelState::Negative,
        matched_gt: None,
    };
    const IGNORE: Self = Self {
        state: LabelState::Ignore,
        matched_gt: None,
    };

    fn positive(gt: usize) -> Self {
        Self {
            state: LabelState::Positive,
            matched_gt: Some(gt),
        }
    }

    pub fn is_positive(&self) -> bool {
        self.state == LabelState::Positive
    }

    pub fn is_negative(&self) -> bool {
        self.state == LabelState::Negative
    }
}

/// Per-anchor objectness probabilities `[background, object]` and deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub objectness: Vec<[f64; 2]>,
    pub deltas: Vec<RegressionTarget>,
}

impl RpnOutput {
    /// Builds the output from per-anchor logit pairs.
    pub fn from_logits(logits: &[[f64; 2]], deltas: Vec<RegressionTarget>) -> Result<Self> {
        if logits.len() != deltas.len() {
            return Err(Error::Shape("one logit pair and one delta per anchor required".into()));
        }
        let objectness = logits
            .iter()
            .map(|l| {
                let p = softmax(&Tensor::new(vec![2], l.to_vec()).expect("2 elements"));
                [p.data()[0], p.data()[1]]
            })
            .collect();
        Ok(Self { objectness, deltas })
    }

    pub fn len(&self) -> usize {
        self.objectness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty()
    }
}

/// Loss weighting: `total = cls_sum / n_cls + lambda * reg_sum / n_reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub n_cls: usize,
    pub n_reg: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.n_cls == 0 || self.n_reg == 0 {
            return Err(Error::InvalidArgument(format!("loss config must be positive: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        // n_reg is the number of anchor locations of a 32x32 feature map.
        Self {
            lambda: 10.0,
            n_cls: 256,
            n_reg: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_nms_top == 0 || self.post_nms_top == 0 || self.post_nms_top > self.pre_nms_top {
            return Err(Error::InvalidArgument(
                "proposal counts must satisfy 0 < post_nms_top <= pre_nms_top".into(),
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || !(self.min_size >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid proposal config {self:?}")));
        }
        Ok(())
    }
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 6000,
            post_nms_top: 300,
            nms_iou: 0.7,
            min_size: 4.0,
        }
    }
}

/// Labels anchors against ground truth.
///
/// An anchor is positive if it attains some ground-truth box's highest IoU
/// (all tied anchors included, provided that IoU is non-zero) or if its IoU
/// with any box exceeds `pos_iou`. Remaining anchors whose best IoU is below
/// `neg_iou` are negative; everything else is ignored.
pub fn label_anchors(anchors: &[BBox], gt: &[BBox], pos_iou: f64, neg_iou: f64) -> Result<Vec<AnchorLabel>> {
    if !(pos_iou > neg_iou) {
        return Err(Error::InvalidArgument(format!(
            "pos_iou ({pos_iou}) must exceed neg_iou ({neg_iou})"
        )));
    }
    if gt.is_empty() {
        return Ok(vec![AnchorLabel::NEGATIVE; anchors.len()]);
    }
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    let mut gt_best = vec![0.0f64; gt.len()];
    for row in &overlaps {
        for (best, &v) in gt_best.iter_mut().zip(row) {
            *best = best.max(v);
        }
    }
    let labels = overlaps
        .iter()
        .map(|row| {
            // rule (a): first gt for which this anchor is a best match
            if let Some(g) = (0..gt.len()).find(|&g| gt_best[g] > 0.0 && row[g] == gt_best[g]) {
                return AnchorLabel::positive(g);
            }
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
            if max > pos_iou {
                AnchorLabel::positive(arg)
            } else if max < neg_iou {
                AnchorLabel::NEGATIVE
            } else {
                AnchorLabel::IGNORE
            }
        })
        .collect();
    Ok(labels)
}

/// Regression targets for positive anchors, `None` elsewhere.
pub fn regression_targets(anchors: &[BBox], labels: &[AnchorLabel], gt: &[BBox]) -> Vec<Option<RegressionTarget>> {
    anchors
        .iter()
        .zip(labels)
        .map(|(a, l)| l.matched_gt.map(|g| encode_box(a, &gt[g])))
        .collect()
}

/// Seeded minibatch sampler; owns its generator state.
#[derive(Debug, Clone)]
pub struct AnchorSampler {
    rng: ChaCha8Rng,
}

impl AnchorSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Picks up to `floor(size * pos_fraction)` positives and fills the rest
    /// with negatives, without replacement. Indices come back sorted.
    pub fn sample(&mut self, labels: &[AnchorLabel], size: usize, pos_fraction: f64) -> Result<Vec<usize>> {
        if size == 0 || !(pos_fraction > 0.0 && pos_fraction < 1.0) {
            return Err(Error::InvalidArgument("minibatch needs size >= 1 and 0 < pos_fraction < 1".into()));
        }
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_negative()).collect();
        if neg.is_empty() {
            return Err(Error::InvalidArgument("no negative anchors available for the minibatch".into()));
        }
        let n_pos = pos.len().min((size as f64 * pos_fraction).floor() as usize);
        let n_neg = neg.len().min(size - n_pos);
        let mut out: Vec<usize> = pick(&mut self.rng, &pos, n_pos);
        out.extend(pick(&mut self.rng, &neg, n_neg));
        out.sort_unstable();
        Ok(out)
    }
}

fn pick(rng: &mut impl Rng, from: &[usize], n: usize) -> Vec<usize> {
    index::sample(rng, from.len(), n).into_iter().map(|i| from[i]).collect()
}

pub fn sample_minibatch(labels: &[AnchorLabel], size: usize, pos_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    AnchorSampler::new(seed).sample(labels, size, pos_fraction)
}

/// Loss value with its gradients. Gradients are indexed by anchor and are
/// zero outside the batch; the objectness gradient is taken with respect to
/// the logit pair feeding the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub total: f64,
    pub cls_term: f64,
    pub reg_term: f64,
    pub grad_logits: Vec<[f64; 2]>,
    pub grad_deltas: Vec<[f64; 4]>,
}

/// `total = (1/n_cls) * sum CE(p_i, p*_i) + lambda * (1/n_reg) * sum p*_i * smoothL1(t_i - t*_i)`
/// over the anchors in `batch`. Ignored anchors in the batch contribute nothing.
pub fn rpn_loss(
    output: &RpnOutput,
    labels: &[AnchorLabel],
    targets: &[Option<RegressionTarget>],
    cfg: &LossConfig,
    batch: &[usize],
) -> Result<RpnLoss> {
    cfg.validate()?;
    let n = output.len();
    if labels.len() != n || targets.len() != n || output.deltas.len() != n {
        return Err(Error::Shape("output, labels and targets must cover the same anchors".into()));
    }
    let mut grad_logits = vec![[0.0; 2]; n];
    let mut grad_deltas = vec![[0.0; 4]; n];
    let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
    let inv_cls = 1.0 / cfg.n_cls as f64;
    let reg_scale = cfg.lambda / cfg.n_reg as f64;
    for &i in batch {
        if i >= n {
            return Err(Error::InvalidArgument(format!("batch index {i} out of range")));
        }
        let truth = match labels[i].state {
            LabelState::Positive => 1,
            LabelState::Negative => 0,
            LabelState::Ignore => continue,
        };
        let p = output.objectness[i];
        cls_sum += -p[truth].max(f64::MIN_POSITIVE).ln();
        for c in 0..2 {
            let onehot = if c == truth { 1.0 } else { 0.0 };
            grad_logits[i][c] = (p[c] - onehot) * inv_cls;
        }
        if truth == 1 {
            let target = targets[i].ok_or_else(|| {
                Error::InvalidArgument(format!("missing regression target for positive anchor {i}"))
            })?;
            let pred = output.deltas[i].to_array();
            for (c, (p, t)) in pred.iter().zip(target.to_array()).enumerate() {
                let d = p - t;
                reg_sum += smooth_l1(d);
                grad_deltas[i][c] = reg_scale * smooth_l1_grad(d);
            }
        }
    }
    let cls_term = cls_sum * inv_cls;
    let reg_term = reg_scale * reg_sum;
    Ok(RpnLoss {
        total: cls_term + reg_term,
        cls_term,
        reg_term,
        grad_logits,
        grad_deltas,
    })
}

/// Decode, clip, size-filter, top-k by objectness, NMS, truncate.
pub fn generate_proposals(
    output: &RpnOutput,
    anchors: &[BBox],
    img_w: usize,
    img_h: usize,
    cfg: &ProposalConfig,
) -> Result<Vec<ScoredBox>> {
    cfg.validate()?;
    if output.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "{} rpn outputs for {} anchors",
            output.len(),
            anchors.len()
        )));
    }
    let mut candidates: Vec<ScoredBox> = anchors
        .iter()
        .zip(output.deltas.iter().zip(&output.objectness))
        .filter_map(|(a, (t, p))| {
            let t = RegressionTarget {
                tw: t.tw.min(MAX_LOG_DELTA),
                th: t.th.min(MAX_LOG_DELTA),
                ..*t
            };
            let b = clip_box(&decode_box(a, &t), img_w, img_h)?;
            (b.width() >= cfg.min_size && b.height() >= cfg.min_size).then_some(ScoredBox {
                bbox: b,
                score: p[1],
                class_id: 1,
            })
        })
        .collect();
    candidates.sort_by(score_order);
    candidates.truncate(cfg.pre_nms_top);
    Ok(nms(&candidates, cfg.nms_iou, cfg.post_nms_top))
}

/// Raw head output on a `[C, H, W]` feature map.
#[derive(Debug, Clone)]
pub struct RpnRaw {
    /// `[2k, H, W]`; channels `2a` / `2a + 1` are the background / object
    /// logits of anchor `a`.
    pub logits: Tensor,
    /// `[4k, H, W]`; channels `4a..4a + 4` are `(tx, ty, tw, th)` of anchor `a`.
    pub deltas: Tensor,
}

/// The RPN-specific layers: a 3x3 conv + ReLU shared by a 1x1 objectness
/// branch and a 1x1 box-delta branch.
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub k: usize,
    pub shared: Sequential,
    pub cls: Sequential,
    pub reg: Sequential,
}

impl RpnHead {
    pub fn new(in_channels: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let conv = |i, o, kernel, pad| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel,
            stride: 1,
            pad,
        };
        Ok(Self {
            k,
            shared: Sequential::from_specs("rpn.shared", &[conv(in_channels, hidden, 3, 1), LayerSpec::Relu], rng)?,
            cls: Sequential::from_specs("rpn.cls", &[conv(hidden, 2 * k, 1, 0)], rng)?,
            reg: Sequential::from_specs("rpn.reg", &[conv(hidden, 4 * k, 1, 0)], rng)?,
        })
    }

    pub fn forward(&mut self, features: &Tensor) -> Result<RpnRaw> {
        let h = self.shared.forward(features)?;
        Ok(RpnRaw {
            logits: self.cls.forward(&h)?,
            deltas: self.reg.forward(&h)?,
        })
    }

    pub fn infer(&self, features: &Tensor) -> Result<RpnRaw> {
        let h = self.shared.infer(features)?;
        Ok(RpnRaw {
            logits: self.cls.infer(&h)?,
            deltas: self.reg.infer(&h)?,
        })
    }

    /// Flattens the raw maps into anchor order `(y, x, a)`.
    pub fn to_output(&self, raw: &RpnRaw) -> Result<RpnOutput> {
        let (c, h, w) = raw.logits.dims3()?;
        if c != 2 * self.k || raw.deltas.shape() != [4 * self.k, h, w] {
            return Err(Error::Shape("rpn raw output does not match anchor count".into()));
        }
        let mut logits = Vec::with_capacity(h * w * self.k);
        let mut deltas = Vec::with_capacity(h * w * self.k);
        for y in 0..h {
            for x in 0..w {
                for a in 0..self.k {
                    logits.push([raw.logits.at3(2 * a, y, x), raw.logits.at3(2 * a + 1, y, x)]);
                    let d = |j| raw.deltas.at3(4 * a + j, y, x);
                    deltas.push(RegressionTarget {
                        tx: d(0),
                        ty: d(1),
                        tw: d(2),
                        th: d(3),
                    });
                }
            }
        }
        RpnOutput::from_logits(&logits, deltas)
    }

    /// Backpropagates per-anchor gradients; returns the feature-map gradient.
    pub fn backward(&mut self, grad_logits: &[[f64; 2]], grad_deltas: &[[f64; 4]], h: usize, w: usize) -> Result<Tensor> {
        let k = self.k;
        if grad_logits.len() != h * w * k || grad_deltas.len() != h * w * k {
            return Err(Error::Shape("rpn gradient length does not match anchors".into()));
        }
        let mut gl = Tensor::zeros(&[2 * k, h, w]);
        let mut gd = Tensor::zeros(&[4 * k, h, w]);
        {
            let (gl, gd) = (gl.data_mut(), gd.data_mut());
            for y in 0..h {
                for x in 0..w {
                    for a in 0..k {
                        let i = (y * w + x) * k + a;
                        for c in 0..2 {
                            gl[((2 * a + c) * h + y) * w + x] = grad_logits[i][c];
                        }
                        for c in 0..4 {
                            gd[((4 * a + c) * h + y) * w + x] = grad_deltas[i][c];
                        }
                    }
                }
            }
        }
        let mut gh = self.cls.backward(&gl)?;
        gh.add_assign(&self.reg.backward(&gd)?)?;
        self.shared.backward(&gh)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.shared.params().chain(self.cls.params()).chain(self.reg.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.shared
            .params_mut()
            .chain(self.cls.params_mut())
            .chain(self.reg.params_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{generate_anchors, AnchorSpec};

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn identical_anchor_is_positive() {
        let gt = [b(10., 10., 30., 30.)];
        let anchors = [b(10., 10., 30., 30.), b(60., 60., 80., 80.)];
        let labels = label_anchors(&anchors, &gt, 0.7, 0.3).unwrap();
        assert_eq!(labels[0], AnchorLabel::positive(0));
        assert!(labels[1].is_negative());
    }

    #[test]
    fn best_anchor_positive_even_below_threshold() {
        let gt = [b(0., 0., 10., 10.)];
        // (0,0,10,4) lies inside gt: IoU = 40/100
        let anchors = [b(0., 0., 10., 4.), b(0., 0., 10., 2.), b(50., 50., 60., 60.)];
        assert!((iou(&anchors[0], &gt[0]) - 0.4).abs() < 1e-12);
        let labels = label_anchors(&anchors, &gt, 0.7, 0.3).unwrap();
        assert!(labels[0].is_positive());
        assert!(labels[1].is_negative()); // IoU 0.2
        assert!(labels[2].is_negative());
    }

    #[test]
    fn ties_for_best_are_all_positive_and_ignore_band_exists() {
        let gt = [b(0., 0., 10., 10.), b(100., 100., 110., 110.)];
        let anchors = [
            b(0., 0., 10., 5.),
            b(0., 5., 10., 10.),
            b(100., 100., 110., 115.),
            b(100., 100., 110., 108.5),
        ];
        let labels = label_anchors(&anchors, &gt, 0.7, 0.3).unwrap();
        assert_eq!(labels[0], AnchorLabel::positive(0));
        assert_eq!(labels[1], AnchorLabel::positive(0));
        // IoU 0.85 (best of gt 1) and IoU 0.667 (ignore band)
        assert_eq!(labels[3], AnchorLabel::positive(1));
        assert_eq!(labels[2].state, LabelState::Ignore);
        assert!(label_anchors(&anchors, &gt, 0.3, 0.3).is_err());
    }

    #[test]
    fn empty_gt_all_negative() {
        let anchors = generate_anchors(3, 3, &AnchorSpec::default()).unwrap();
        let labels = label_anchors(&anchors, &[], 0.7, 0.3).unwrap();
        assert!(labels.iter().all(|l| l.is_negative() && l.matched_gt.is_none()));
    }

    fn synthetic_labels(pos: usize, neg: usize) -> Vec<AnchorLabel> {
        let mut v = vec![AnchorLabel::positive(0); pos];
        v.extend(vec![AnchorLabel::NEGATIVE; neg]);
        v.push(AnchorLabel::IGNORE);
        v
    }

    #[test]
    fn minibatch_counts() {
        let labels = synthetic_labels(10, 1000);
        let batch = sample_minibatch(&labels, 256, 0.5, 1).unwrap();
        let pos = batch.iter().filter(|&&i| labels[i].is_positive()).count();
        assert_eq!((pos, batch.len() - pos), (10, 246));
        assert!(batch.iter().all(|&i| labels[i].state != LabelState::Ignore));

        let labels = synthetic_labels(200, 200);
        let batch = sample_minibatch(&labels, 256, 0.5, 1).unwrap();
        let pos = batch.iter().filter(|&&i| labels[i].is_positive()).count();
        assert_eq!((pos, batch.len() - pos), (128, 128));
        let mut dedup = batch.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), batch.len());
    }

    #[test]
    fn minibatch_deterministic_and_needs_negatives() {
        let labels = synthetic_labels(50, 500);
        assert_eq!(
            sample_minibatch(&labels, 64, 0.5, 42).unwrap(),
            sample_minibatch(&labels, 64, 0.5, 42).unwrap()
        );
        assert!(sample_minibatch(&synthetic_labels(5, 0), 8, 0.5, 0).is_err());
    }

    fn two_anchor_fixture(delta: f64) -> (RpnOutput, Vec<AnchorLabel>, Vec<Option<RegressionTarget>>) {
        let out = RpnOutput {
            objectness: vec![[0.5, 0.5], [0.5, 0.5]],
            deltas: vec![
                RegressionTarget {
                    tx: delta,
                    ..Default::default()
                },
                RegressionTarget::default(),
            ],
        };
        let labels = vec![AnchorLabel::positive(0), AnchorLabel::NEGATIVE];
        let targets = vec![Some(RegressionTarget::default()), None];
        (out, labels, targets)
    }

    #[test]
    fn loss_hand_evaluated_fixture() {
        let (out, labels, targets) = two_anchor_fixture(0.5);
        let cfg = LossConfig {
            lambda: 10.0,
            n_cls: 2,
            n_reg: 2,
        };
        let l = rpn_loss(&out, &labels, &targets, &cfg, &[0, 1]).unwrap();
        let ln2 = 2f64.ln();
        assert!((l.cls_term - ln2).abs() < 1e-12);
        assert!((l.reg_term - 0.625).abs() < 1e-12);
        assert!((l.total - (ln2 + 0.625)).abs() < 1e-12);
    }

    #[test]
    fn negative_only_batch_has_zero_reg_term() {
        let (out, labels, targets) = two_anchor_fixture(3.0);
        let l = rpn_loss(&out, &labels, &targets, &LossConfig::default(), &[1]).unwrap();
        assert_eq!(l.reg_term, 0.0);
    }

    #[test]
    fn perfect_prediction_zero_loss_and_missing_target_rejected() {
        let out = RpnOutput {
            objectness: vec![[0.0, 1.0], [1.0, 0.0]],
            deltas: vec![
                RegressionTarget {
                    tx: 0.2,
                    ty: -0.1,
                    tw: 0.3,
                    th: 0.0,
                },
                RegressionTarget::default(),
            ],
        };
        let labels = vec![AnchorLabel::positive(0), AnchorLabel::NEGATIVE];
        let targets = vec![Some(out.deltas[0]), None];
        let l = rpn_loss(&out, &labels, &targets, &LossConfig::default(), &[0, 1]).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(rpn_loss(&out, &labels, &[None, None], &LossConfig::default(), &[0, 1]).is_err());
    }

    #[test]
    fn proposals_single_anchor_and_duplicates() {
        let anchors = [b(-4., -4., 12., 12.)];
        let out = RpnOutput::from_logits(&[[0.0, 0.0]], vec![RegressionTarget::default()]).unwrap();
        let p = generate_proposals(&out, &anchors, 100, 100, &ProposalConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, b(0., 0., 12., 12.));

        let anchors = [b(10., 10., 30., 30.), b(10., 10., 30., 30.)];
        let out = RpnOutput::from_logits(&[[0.0, 1.0], [0.0, 2.0]], vec![RegressionTarget::default(); 2]).unwrap();
        let p = generate_proposals(&out, &anchors, 100, 100, &ProposalConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].score, out.objectness[1][1]);
    }

    #[test]
    fn head_output_layout_matches_anchor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = RpnHead::new(3, 4, 2, &mut rng).unwrap();
        let feat = Tensor::uniform(&[3, 2, 3], 1.0, &mut rng);
        let raw = head.infer(&feat).unwrap();
        let out = head.to_output(&raw).unwrap();
        assert_eq!(out.len(), 2 * 3 * 2);
        // anchor index (y=1, x=2, a=1)
        let i = (3 + 2) * 2 + 1;
        assert_eq!(out.deltas[i].th, raw.deltas.at3(7, 1, 2));
        let s: f64 = out.objectness[i].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
