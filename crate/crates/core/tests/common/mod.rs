//! Independent oracles and helpers shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wbcdet::boxes::{BBox, ScoredBox};
use wbcdet::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Elements where both gradients are below this are treated as zero.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values in `(-1, 1)` spaced `2 / n` apart in random order, so max-based
/// ops have a unique argmax that a finite-difference step cannot flip.
pub fn distinct_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_fn(shape, |i| -1.0 + 2.0 * (ranks[i] as f64 + 0.5) / n as f64)
}

/// Values bounded away from zero by `margin`.
pub fn nonzero_tensor(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between an analytic and a numeric gradient.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale <= FD_FLOOR {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn assert_grad(what: &str, analytic: &[f64], numeric: &[f64]) {
    let e = max_rel_error(analytic, numeric);
    assert!(e <= FD_TOLERANCE, "{what}: relative error {e:e}");
}

/// `sum(r * y)`: the scalar a random upstream gradient `r` projects onto.
pub fn dot(r: &Tensor, y: &Tensor) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

pub fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

/// Direct-loop convolution accumulating over `(c, ki, kj)` then the bias.
pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for o in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((o * c + ci) * kh + ki) * kw + kj];
                            acc += wv * xv;
                        }
                    }
                }
                out.push(acc + b.data()[o]);
            }
        }
    }
    Tensor::new(vec![k, oh, ow], out).unwrap()
}

pub fn max_pool_oracle(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::new();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        m = m.max(x.data()[(ci * h + oy * stride + dy) * w + ox * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

/// IoU of integer boxes by counting covered unit pixels.
pub fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
    let x0 = a.x_min.min(b.x_min) as i64;
    let y0 = a.y_min.min(b.y_min) as i64;
    let x1 = a.x_max.max(b.x_max) as i64;
    let y1 = a.y_max.max(b.y_max) as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn overlap_ratio(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS written as repeated "pick the best survivor, delete its
/// neighbours" passes over a shrinking candidate list.
pub fn nms_oracle(boxes: &[ScoredBox], threshold: f64, max_keep: usize) -> Vec<ScoredBox> {
    let mut pool = boxes.to_vec();
    let mut keep = Vec::new();
    while !pool.is_empty() && keep.len() < max_keep {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            let better = a.score > b.score
                || (a.score == b.score
                    && (a.bbox.x_min < b.bbox.x_min || (a.bbox.x_min == b.bbox.x_min && a.bbox.y_min < b.bbox.y_min)));
            if better {
                best = i;
            }
        }
        let chosen = pool.remove(best);
        pool.retain(|b| overlap_ratio(&chosen.bbox, &b.bbox) <= threshold);
        keep.push(chosen);
    }
    keep
}

/// Largest number of detection/ground-truth pairs with IoU at or above the
/// threshold under a one-to-one assignment, by exhaustive search.
pub fn max_matching(dets: &[BBox], gts: &[BBox], threshold: f64) -> usize {
    fn go(d: usize, dets: &[BBox], gts: &[BBox], used: &mut Vec<bool>, threshold: f64) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, dets, gts, used, threshold);
        for g in 0..gts.len() {
            if !used[g] && overlap_ratio(&dets[d], &gts[g]) >= threshold {
                used[g] = true;
                best = best.max(1 + go(d + 1, dets, gts, used, threshold));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], threshold)
}

pub fn random_box(rng: &mut impl Rng, extent: f64, max_side: f64) -> BBox {
    let w = rng.gen_range(1.0..max_side);
    let h = rng.gen_range(1.0..max_side);
    let x = rng.gen_range(0.0..extent - w);
    let y = rng.gen_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

pub fn random_int_box(rng: &mut impl Rng, extent: i64, max_side: i64) -> BBox {
    let w = rng.gen_range(1..=max_side);
    let h = rng.gen_range(1..=max_side);
    let x = rng.gen_range(0..=extent - w);
    let y = rng.gen_range(0..=extent - h);
    BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
}

pub const BCCD_FIXTURE: &str = include_str!("../fixtures/BloodImage_00000.xml");
