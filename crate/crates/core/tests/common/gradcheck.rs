//! Finite-difference checks; each returns the worst relative error found.

use rand::Rng;
use wbcdet::boxes::{BBox, RegressionTarget};
use wbcdet::head;
use wbcdet::rpn::{self, AnchorLabel, LabelState, LossConfig, RpnOutput};
use wbcdet::tensor::ops;
use wbcdet::tensor::{LayerSpec, Sequential, Tensor};

use super::{distinct_tensor, dot, max_rel_error, nonzero_tensor, numeric_grad, random_tensor, with_data};

pub const INSTANCES: usize = 10;

pub fn conv2d(rng: &mut impl Rng) -> f64 {
    let c = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let kernel = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let h = rng.gen_range(kernel..=7);
    let w = rng.gen_range(kernel..=7);
    let x = random_tensor(&[c, h, w], rng);
    let wt = random_tensor(&[k, c, kernel, kernel], rng);
    let b = random_tensor(&[k], rng);
    let y = ops::conv2d(&x, &wt, &b, stride, pad).unwrap();
    let r = random_tensor(y.shape(), rng);
    let (gx, gw, gb) = ops::conv2d_backward(&x, &wt, stride, pad, &r).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&r, &ops::conv2d(&with_data(&x, d), &wt, &b, stride, pad).unwrap()));
    let nw = numeric_grad(wt.data(), |d| dot(&r, &ops::conv2d(&x, &with_data(&wt, d), &b, stride, pad).unwrap()));
    let nb = numeric_grad(b.data(), |d| dot(&r, &ops::conv2d(&x, &wt, &with_data(&b, d), stride, pad).unwrap()));
    max_rel_error(gx.data(), &nx)
        .max(max_rel_error(gw.data(), &nw))
        .max(max_rel_error(gb.data(), &nb))
}

pub fn max_pool2d(rng: &mut impl Rng) -> f64 {
    let c = rng.gen_range(1..=3);
    let window = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=window);
    let h = rng.gen_range(window..=8);
    let w = rng.gen_range(window..=8);
    let x = distinct_tensor(&[c, h, w], rng);
    let (y, argmax) = ops::max_pool2d(&x, window, stride).unwrap();
    let r = random_tensor(y.shape(), rng);
    let gx = ops::max_pool2d_backward(x.shape(), &argmax, &r).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&r, &ops::max_pool2d(&with_data(&x, d), window, stride).unwrap().0));
    max_rel_error(gx.data(), &nx)
}

pub fn relu(rng: &mut impl Rng) -> f64 {
    let n = rng.gen_range(1..=40);
    let x = nonzero_tensor(&[n], 1e-2, rng);
    let r = random_tensor(&[n], rng);
    let gx = ops::relu_backward(&x, &r).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&r, &ops::relu(&with_data(&x, d))));
    max_rel_error(gx.data(), &nx)
}

pub fn fully_connected(rng: &mut impl Rng) -> f64 {
    let n = rng.gen_range(1..=12);
    let m = rng.gen_range(1..=6);
    let x = random_tensor(&[n], rng);
    let wt = random_tensor(&[m, n], rng);
    let b = random_tensor(&[m], rng);
    let r = random_tensor(&[m], rng);
    let (gx, gw, gb) = ops::fully_connected_backward(&x, &wt, &r).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&r, &ops::fully_connected(&with_data(&x, d), &wt, &b).unwrap()));
    let nw = numeric_grad(wt.data(), |d| dot(&r, &ops::fully_connected(&x, &with_data(&wt, d), &b).unwrap()));
    let nb = numeric_grad(b.data(), |d| dot(&r, &ops::fully_connected(&x, &wt, &with_data(&b, d)).unwrap()));
    max_rel_error(gx.data(), &nx)
        .max(max_rel_error(gw.data(), &nw))
        .max(max_rel_error(gb.data(), &nb))
}

/// Softmax on its own and fused with cross-entropy.
pub fn softmax_cross_entropy(rng: &mut impl Rng) -> f64 {
    let n = rng.gen_range(2..=6);
    let target = rng.gen_range(0..n);
    let x = Tensor::from_fn(&[n], |_| rng.gen_range(-3.0..3.0));
    let (_, g) = ops::softmax_cross_entropy(&x, target).unwrap();
    let nx = numeric_grad(x.data(), |d| ops::softmax_cross_entropy(&with_data(&x, d), target).unwrap().0);
    let r = random_tensor(&[n], rng);
    let gs = ops::softmax_backward(&ops::softmax(&x), &r).unwrap();
    let ns = numeric_grad(x.data(), |d| dot(&r, &ops::softmax(&with_data(&x, d))));
    max_rel_error(g.data(), &nx).max(max_rel_error(gs.data(), &ns))
}

/// A residual magnitude in `[0.05, 0.9] U [1.1, 2.5]`, clear of the kink at 1.
fn off_kink(rng: &mut impl Rng) -> f64 {
    let v = if rng.gen_bool(0.5) {
        rng.gen_range(0.05..0.9)
    } else {
        rng.gen_range(1.1..2.5)
    };
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

pub fn smooth_l1(rng: &mut impl Rng) -> f64 {
    let xs: Vec<f64> = (0..8).map(|_| off_kink(rng)).collect();
    let analytic: Vec<f64> = xs.iter().map(|&x| ops::smooth_l1_grad(x)).collect();
    let numeric = numeric_grad(&xs, |d| d.iter().map(|&x| ops::smooth_l1(x)).sum());
    max_rel_error(&analytic, &numeric)
}

pub fn roi_pool(rng: &mut impl Rng) -> f64 {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=8);
    let w = rng.gen_range(3..=8);
    let pooled = rng.gen_range(1..=4);
    let scale = [0.25, 0.5, 1.0][rng.gen_range(0..3)];
    let x = distinct_tensor(&[c, h, w], rng);
    let (iw, ih) = (w as f64 / scale, h as f64 / scale);
    let x0 = rng.gen_range(0.0..iw * 0.7);
    let y0 = rng.gen_range(0.0..ih * 0.7);
    let proposal = BBox::new(x0, y0, rng.gen_range(x0 + 0.5..iw), rng.gen_range(y0 + 0.5..ih)).unwrap();
    let roi = head::roi_pool(&x, &proposal, scale, pooled).unwrap();
    let r = random_tensor(roi.tensor.shape(), rng);
    let mut gx = Tensor::zeros(x.shape());
    head::roi_pool_backward(&mut gx, &roi, &r).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&r, &head::roi_pool(&with_data(&x, d), &proposal, scale, pooled).unwrap().tensor));
    max_rel_error(gx.data(), &nx)
}

pub const LAYERS: [(&str, fn(&mut rand_chacha::ChaCha8Rng) -> f64); 7] = [
    ("conv2d", conv2d),
    ("max_pool2d", max_pool2d),
    ("relu", relu),
    ("fully_connected", fully_connected),
    ("softmax+cross-entropy", softmax_cross_entropy),
    ("smooth_l1", smooth_l1),
    ("roi_pool", roi_pool),
];

/// conv -> relu -> pool -> fc, checked end to end for input and parameters.
pub fn small_network(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let specs = [
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        LayerSpec::FullyConnected { inputs: 27, outputs: 4 },
    ];
    let mut net = Sequential::from_specs("net", &specs, rng).unwrap();
    let x = random_tensor(&[2, 6, 6], rng);
    let y = net.forward(&x).unwrap();
    let r = random_tensor(y.shape(), rng);
    let gx = net.backward(&r).unwrap();
    let mut worst = max_rel_error(gx.data(), &numeric_grad(x.data(), |d| dot(&r, &net.infer(&with_data(&x, d)).unwrap())));
    for p in 0..net.params().count() {
        let value = net.params().nth(p).unwrap().value.clone();
        let analytic = net.params().nth(p).unwrap().grad.clone();
        let mut probe = net.clone();
        let numeric = numeric_grad(value.data(), |d| {
            probe.params_mut().nth(p).unwrap().value = with_data(&value, d);
            dot(&r, &probe.infer(&x).unwrap())
        });
        worst = worst.max(max_rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Gradient of the RPN loss with respect to logits and deltas.
pub fn rpn_loss_grad(rng: &mut impl Rng) -> f64 {
    let n = 12;
    let logits: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    let mut deltas = Vec::new();
    for i in 0..n {
        let state = [LabelState::Positive, LabelState::Negative, LabelState::Ignore][i % 3];
        let t = RegressionTarget::from_array(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let d = RegressionTarget::from_array(std::array::from_fn(|j| t.to_array()[j] + off_kink(rng)));
        labels.push(AnchorLabel {
            state,
            matched_gt: (state == LabelState::Positive).then_some(0),
        });
        targets.push((state == LabelState::Positive).then_some(t));
        deltas.push(d);
    }
    let cfg = LossConfig {
        lambda: 10.0,
        n_cls: 8,
        n_reg: 5,
    };
    let batch: Vec<usize> = (0..n).collect();
    let loss_of = |logits: &[[f64; 2]], deltas: &[RegressionTarget]| {
        let out = RpnOutput::from_logits(logits, deltas.to_vec()).unwrap();
        rpn::rpn_loss(&out, &labels, &targets, &cfg, &batch).unwrap()
    };
    let base = loss_of(&logits, &deltas);
    let flat_logits: Vec<f64> = logits.iter().flatten().copied().collect();
    let numeric_logits = numeric_grad(&flat_logits, |d| {
        let l: Vec<[f64; 2]> = d.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        loss_of(&l, &deltas).total
    });
    let flat_deltas: Vec<f64> = deltas.iter().flat_map(|d| d.to_array()).collect();
    let numeric_deltas = numeric_grad(&flat_deltas, |d| {
        let ds: Vec<RegressionTarget> = d.chunks_exact(4).map(|c| RegressionTarget::from_array([c[0], c[1], c[2], c[3]])).collect();
        loss_of(&logits, &ds).total
    });
    let analytic_logits: Vec<f64> = base.grad_logits.iter().flatten().copied().collect();
    let analytic_deltas: Vec<f64> = base.grad_deltas.iter().flatten().copied().collect();
    max_rel_error(&analytic_logits, &numeric_logits).max(max_rel_error(&analytic_deltas, &numeric_deltas))
}
