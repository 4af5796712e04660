//! Checks behind the numbered acceptance criteria. Each returns a short
//! summary on success and a description of the first violation otherwise.

use rand::Rng;
use wbcdet::boxes::{self, AnchorSpec, BBox, RegressionTarget, ScoredBox};
use wbcdet::data::{parse_voc_xml, serialize_voc_xml, AnnotatedObject, Annotation};
use wbcdet::eval::{compute_metrics, MatchResult};
use wbcdet::rpn::{self, AnchorLabel, LabelState, LossConfig, ProposalConfig, RpnOutput};

use super::gradcheck::{self, INSTANCES, LAYERS};
use super::{nms_oracle, pixel_iou, random_box, random_int_box, rng, BCCD_FIXTURE, FD_TOLERANCE};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// 314 single-cell images, 4 missed, 1 spurious.
pub fn published_table() -> Outcome {
    let mut results = vec![MatchResult::from_counts(1, 0, 0); 314];
    for r in results.iter_mut().take(4) {
        *r = MatchResult::from_counts(0, 0, 1);
    }
    results[200].fp = 1;
    let m = compute_metrics(&results).map_err(|e| e.to_string())?;
    let got = (m.miss_rate_percent.as_str(), m.accuracy_percent.as_str());
    ensure(got == ("1.3", "98.4"), || format!("got miss {}% accuracy {}%", got.0, got.1))?;
    Ok(format!("miss rate {}%, accuracy {}%", got.0, got.1))
}

pub fn default_anchor_spec() -> AnchorSpec {
    AnchorSpec {
        scales: vec![16.0, 24.0, 32.0],
        ratios: vec![0.5, 1.0, 2.0],
        stride: 4,
    }
}

/// Count law and exact shift invariance on every grid up to `max_side`.
pub fn anchor_law(spec: &AnchorSpec, max_side: usize) -> Outcome {
    let k = spec.scales.len() * spec.ratios.len();
    let s = spec.stride as f64;
    for h in 1..=max_side {
        for w in 1..=max_side {
            let anchors = boxes::generate_anchors(w, h, spec).map_err(|e| e.to_string())?;
            ensure(anchors.len() == w * h * k, || format!("{w}x{h}: {} anchors", anchors.len()))?;
            for y in 0..h {
                for x in 0..w {
                    for a in 0..k {
                        let got = anchors[(y * w + x) * k + a];
                        let want = anchors[a].translate(x as f64 * s, y as f64 * s);
                        ensure(got == want, || format!("{w}x{h}: anchor ({y},{x},{a}) is {got:?}, shift gives {want:?}"))?;
                    }
                }
            }
        }
    }
    Ok(format!("W*H*{k} anchors and exact shifts on all grids up to {max_side}x{max_side}"))
}

fn random_scored(rng: &mut impl Rng, n: usize) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| ScoredBox {
            bbox: random_box(rng, 100.0, 40.0),
            // coarse scores so ties occur
            score: rng.gen_range(0..20) as f64 / 20.0,
            class_id: 1,
        })
        .collect()
}

pub fn nms_contract() -> Outcome {
    let mut r = rng(3);
    let spec = default_anchor_spec();
    let anchors = boxes::generate_anchors(32, 32, &spec).map_err(|e| e.to_string())?;
    let logits: Vec<[f64; 2]> = anchors.iter().map(|_| [0.0, r.gen_range(-4.0..4.0)]).collect();
    let deltas = anchors
        .iter()
        .map(|_| RegressionTarget::from_array(std::array::from_fn(|_| r.gen_range(-0.2..0.2))))
        .collect();
    let out = RpnOutput::from_logits(&logits, deltas).map_err(|e| e.to_string())?;
    let proposals =
        rpn::generate_proposals(&out, &anchors, 128, 128, &ProposalConfig::default()).map_err(|e| e.to_string())?;
    ensure(anchors.len() > 6000, || format!("only {} candidates", anchors.len()))?;
    ensure(proposals.len() <= 300, || format!("{} proposals survive", proposals.len()))?;
    for case in 0..1000 {
        let n = r.gen_range(0..=50);
        let set = random_scored(&mut r, n);
        let thr = r.gen_range(0.05..0.95);
        let keep = r.gen_range(1..=60);
        let got = boxes::nms(&set, thr, keep);
        let want = nms_oracle(&set, thr, keep);
        ensure(got == want, || format!("set {case}: nms kept {} boxes, oracle {}", got.len(), want.len()))?;
    }
    Ok(format!(
        "{} candidates -> {} proposals; 1000 random sets match the greedy oracle",
        anchors.len(),
        proposals.len()
    ))
}

pub fn rpn_loss_contract() -> Outcome {
    let out = RpnOutput {
        objectness: vec![[0.5, 0.5], [0.5, 0.5]],
        deltas: vec![
            RegressionTarget {
                tx: 0.5,
                ..Default::default()
            },
            RegressionTarget::default(),
        ],
    };
    let labels = vec![
        AnchorLabel {
            state: LabelState::Positive,
            matched_gt: Some(0),
        },
        AnchorLabel {
            state: LabelState::Negative,
            matched_gt: None,
        },
    ];
    let targets = vec![Some(RegressionTarget::default()), None];
    let cfg = LossConfig {
        lambda: 10.0,
        n_cls: 2,
        n_reg: 2,
    };
    let l = rpn::rpn_loss(&out, &labels, &targets, &cfg, &[0, 1]).map_err(|e| e.to_string())?;
    // cls: two anchors at p = 0.5 -> (ln 2 + ln 2) / 2; reg: 10 * (0.5 * 0.5^2) / 2
    let cls = (2.0f64.ln() + 2.0f64.ln()) / 2.0;
    let reg = 10.0 * (0.5 * 0.5 * 0.5) / 2.0;
    ensure((l.cls_term - cls).abs() <= 1e-12 && (l.reg_term - reg).abs() <= 1e-12, || {
        format!("cls {} reg {}", l.cls_term, l.reg_term)
    })?;

    let mut r = rng(11);
    for _ in 0..100 {
        let n = r.gen_range(1..20);
        let logits: Vec<[f64; 2]> = (0..n).map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)]).collect();
        let deltas = (0..n)
            .map(|_| RegressionTarget::from_array(std::array::from_fn(|_| r.gen_range(-3.0..3.0))))
            .collect();
        let out = RpnOutput::from_logits(&logits, deltas).map_err(|e| e.to_string())?;
        let neg = vec![
            AnchorLabel {
                state: LabelState::Negative,
                matched_gt: None,
            };
            n
        ];
        let batch: Vec<usize> = (0..n).collect();
        let l = rpn::rpn_loss(&out, &neg, &vec![None; n], &LossConfig::default(), &batch).map_err(|e| e.to_string())?;
        ensure(l.reg_term == 0.0, || format!("negative batch regression term {}", l.reg_term))?;
    }

    let worst = (0..5).map(|s| gradcheck::rpn_loss_grad(&mut rng(s))).fold(0.0, f64::max);
    ensure(worst <= FD_TOLERANCE, || format!("gradient relative error {worst:e}"))?;
    Ok(format!(
        "cls {:.12}, reg {:.12}; negative-only reg = 0; gradient error {worst:.1e}",
        l.cls_term, l.reg_term
    ))
}

pub fn gradient_suite() -> Outcome {
    let mut parts = Vec::new();
    for (i, (name, check)) in LAYERS.iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let worst = (0..INSTANCES).map(|_| check(&mut r)).fold(0.0, f64::max);
        ensure(worst <= FD_TOLERANCE, || format!("{name}: relative error {worst:e}"))?;
        parts.push(format!("{name} {worst:.0e}"));
    }
    Ok(parts.join(", "))
}

pub fn geometry_oracles() -> Outcome {
    let mut r = rng(5);
    let mut worst_iou: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_int_box(&mut r, 100, 50);
        // bias towards overlapping pairs
        let b = if r.gen_bool(0.7) {
            let dx = r.gen_range(-20..=20) as f64;
            let dy = r.gen_range(-20..=20) as f64;
            let t = a.translate(dx, dy);
            BBox::new(t.x_min, t.y_min, t.x_max + r.gen_range(0..10) as f64, t.y_max + r.gen_range(0..10) as f64)
                .map_err(|e| e.to_string())?
        } else {
            random_int_box(&mut r, 100, 50)
        };
        worst_iou = worst_iou.max((boxes::iou(&a, &b) - pixel_iou(&a, &b)).abs());
    }
    ensure(worst_iou <= 0.02, || format!("IoU differs from pixel count by {worst_iou}"))?;
    let mut worst_rt: f64 = 0.0;
    for _ in 0..1000 {
        let anchor = random_box(&mut r, 200.0, 60.0);
        let gt = random_box(&mut r, 200.0, 60.0);
        let back = boxes::decode_box(&anchor, &boxes::encode_box(&anchor, &gt));
        for (x, y) in [
            (back.x_min, gt.x_min),
            (back.y_min, gt.y_min),
            (back.x_max, gt.x_max),
            (back.y_max, gt.y_max),
        ] {
            worst_rt = worst_rt.max((x - y).abs());
        }
    }
    ensure(worst_rt < 1e-9, || format!("encode/decode error {worst_rt:e}"))?;
    Ok(format!("IoU vs pixel count {worst_iou:.1e}, roundtrip {worst_rt:.1e}"))
}

const NAME_CHARS: &[char] = &['a', 'B', 'c', 'W', 'R', '0', '7', ' ', '-', '_', '&', '<', '>', '"', '\'', 'é'];

fn random_text(rng: &mut impl Rng, max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| NAME_CHARS[rng.gen_range(0..NAME_CHARS.len())]).collect()
}

/// A valid annotation with integer boxes inside the image.
pub fn random_annotation(rng: &mut impl Rng) -> Annotation {
    let width = rng.gen_range(1..=1000);
    let height = rng.gen_range(1..=1000);
    let objects = (0..rng.gen_range(0..=6))
        .map(|_| {
            let x0 = rng.gen_range(0..width);
            let y0 = rng.gen_range(0..height);
            let x1 = rng.gen_range(x0 + 1..=width);
            let y1 = rng.gen_range(y0 + 1..=height);
            let name = match rng.gen_range(0..4) {
                0 => "WBC".to_string(),
                1 => "RBC".to_string(),
                _ => random_text(rng, 12),
            };
            AnnotatedObject {
                name,
                bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap(),
                difficult: rng.gen_bool(0.2),
            }
        })
        .collect();
    Annotation {
        filename: random_text(rng, 20),
        width,
        height,
        depth: if rng.gen_bool(0.8) { 3 } else { 1 },
        objects,
    }
}

pub fn voc_roundtrip() -> Outcome {
    let mut r = rng(9);
    for case in 0..200 {
        let a = random_annotation(&mut r);
        let back = parse_voc_xml(&serialize_voc_xml(&a)).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back == a, || format!("case {case}: {a:?} came back as {back:?}"))?;
    }
    let fixture = parse_voc_xml(BCCD_FIXTURE).map_err(|e| e.to_string())?;
    ensure(fixture.objects.len() == 1 && fixture.objects[0].bbox == BBox::new(34., 112., 156., 230.).unwrap(), || {
        format!("fixture parsed as {fixture:?}")
    })?;
    let back = parse_voc_xml(&serialize_voc_xml(&fixture)).map_err(|e| e.to_string())?;
    ensure(back == fixture, || "fixture does not roundtrip".into())?;
    Ok("200 random annotations and the BCCD-style fixture roundtrip".into())
}
