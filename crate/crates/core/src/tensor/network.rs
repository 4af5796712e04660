use rand::Rng;

use super::{ops, Parameter, Tensor};
use crate::error::{Error, Result};

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0,
            LayerSpec::MaxPool2d { window, stride } => window == 0 || stride == 0,
            LayerSpec::FullyConnected { inputs, outputs } => inputs == 0 || outputs == 0,
            LayerSpec::Relu | LayerSpec::Softmax => false,
        };
        if bad {
            return Err(Error::InvalidArgument(format!("invalid layer spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor),
    Pool { shape: Vec<usize>, argmax: Vec<usize> },
    Output(Tensor),
}

/// A layer and its parameters (`[weight, bias]` for conv and fc layers).
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Parameter>,
}

impl Layer {
    /// Builds the layer with Glorot-uniform weights and zero biases.
    pub fn init(name: &str, spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: k,
                kernel,
                ..
            } => {
                let area = kernel * kernel;
                vec![
                    Parameter::glorot(format!("{name}.weight"), &[k, c, kernel, kernel], c * area, k * area, rng),
                    Parameter::zeros(format!("{name}.bias"), &[k]),
                ]
            }
            LayerSpec::FullyConnected { inputs, outputs } => vec![
                Parameter::glorot(format!("{name}.weight"), &[outputs, inputs], inputs, outputs, rng),
                Parameter::zeros(format!("{name}.bias"), &[outputs]),
            ],
            _ => Vec::new(),
        };
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self.spec {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let y = ops::conv2d(x, &self.params[0].value, &self.params[1].value, stride, pad)?;
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::Relu => Ok((ops::relu(x), Cache::Input(x.clone()))),
            LayerSpec::MaxPool2d { window, stride } => {
                let (y, argmax) = ops::max_pool2d(x, window, stride)?;
                Ok((
                    y,
                    Cache::Pool {
                        shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            LayerSpec::FullyConnected { .. } => {
                let y = ops::fully_connected(x, &self.params[0].value, &self.params[1].value)?;
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::Softmax => {
                let y = ops::softmax(x);
                Ok((y.clone(), Cache::Output(y)))
            }
        }
    }

    fn backward(&mut self, cache: &Cache, grad: &Tensor) -> Result<Tensor> {
        match (self.spec, cache) {
            (LayerSpec::Conv2d { stride, pad, .. }, Cache::Input(x)) => {
                let (gx, gw, gb) = ops::conv2d_backward(x, &self.params[0].value, stride, pad, grad)?;
                self.params[0].accumulate(&gw)?;
                self.params[1].accumulate(&gb)?;
                Ok(gx)
            }
            (LayerSpec::Relu, Cache::Input(x)) => ops::relu_backward(x, grad),
            (LayerSpec::MaxPool2d { .. }, Cache::Pool { shape, argmax }) => {
                ops::max_pool2d_backward(shape, argmax, grad)
            }
            (LayerSpec::FullyConnected { .. }, Cache::Input(x)) => {
                let (gx, gw, gb) = ops::fully_connected_backward(x, &self.params[0].value, grad)?;
                self.params[0].accumulate(&gw)?;
                self.params[1].accumulate(&gb)?;
                Ok(gx)
            }
            (LayerSpec::Softmax, Cache::Output(y)) => ops::softmax_backward(y, grad),
            _ => unreachable!("cache kind always matches its layer"),
        }
    }
}

/// A chain of layers that retains every intermediate activation on
/// [`Sequential::forward`] so that [`Sequential::backward`] can run.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    cache: Option<Vec<Cache>>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers, cache: None }
    }

    /// Initialises layers named `{prefix}.{index}`.
    pub fn from_specs(prefix: &str, specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &s)| Layer::init(&format!("{prefix}.{i}"), s, rng))
            .collect::<Result<_>>()?;
        Ok(Self::new(layers))
    }

    /// Forward pass retaining activations for a later backward pass.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&cur)?;
            caches.push(c);
            cur = y;
        }
        self.cache = Some(caches);
        Ok(cur)
    }

    /// Forward pass without retention; usable through a shared reference.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients for `grad` at the output and returns
    /// the gradient with respect to the input of the last forward pass.
    /// Frozen parameters are left untouched.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let caches = self.cache.take().ok_or(Error::NoForward("sequential network"))?;
        let mut g = grad.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&caches).rev() {
            g = layer.backward(cache, &g)?;
        }
        self.cache = Some(caches);
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(|p| p.frozen)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }
}

/// Plain SGD: `value -= lr * grad` for unfrozen parameters, then clears all
/// gradients.
pub fn sgd_update<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
    for p in params {
        if !p.frozen {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(rng: &mut ChaCha8Rng) -> Sequential {
        Sequential::from_specs(
            "net",
            &[
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::FullyConnected { inputs: 12, outputs: 2 },
            ],
            rng,
        )
        .unwrap()
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = small_net(&mut rng);
        assert!(matches!(
            net.backward(&Tensor::zeros(&[2])),
            Err(Error::NoForward(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = small_net(&mut rng);
        let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        net.forward(&x).unwrap();
        net.backward(&Tensor::zeros(&[2])).unwrap();
        assert!(net.params().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_fc_weight_grad_equals_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net =
            Sequential::from_specs("fc", &[LayerSpec::FullyConnected { inputs: 5, outputs: 1 }], &mut rng).unwrap();
        let x = Tensor::uniform(&[5], 1.0, &mut rng);
        net.forward(&x).unwrap();
        net.backward(&Tensor::full(&[1], 1.0)).unwrap();
        assert_eq!(net.layers[0].params[0].grad.data(), x.data());
        assert_eq!(net.layers[0].params[1].grad.data(), &[1.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient_and_no_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = small_net(&mut rng);
        net.layers[0].params.iter_mut().for_each(|p| p.frozen = true);
        let before: Vec<Vec<u64>> = net.layers[0]
            .params
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        for _ in 0..3 {
            let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
            net.forward(&x).unwrap();
            net.backward(&Tensor::full(&[2], 1.0)).unwrap();
            assert!(net.layers[0].params.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
            sgd_update(net.params_mut(), 0.5);
        }
        let after: Vec<Vec<u64>> = net.layers[0]
            .params
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Parameter::new("p", Tensor::full(&[1], 1.0));
        p.grad = Tensor::full(&[1], 0.5);
        sgd_update([&mut p], 0.1);
        assert_eq!(p.value.data(), &[0.95]);
        assert_eq!(p.grad.data(), &[0.0]);

        let mut q = Parameter::new("q", Tensor::full(&[2], 3.0));
        q.grad = Tensor::full(&[2], 7.0);
        sgd_update([&mut q], 0.0);
        assert_eq!(q.value.data(), &[3.0, 3.0]);

        q.frozen = true;
        q.grad = Tensor::full(&[2], 7.0);
        sgd_update([&mut q], 1.0);
        assert_eq!(q.value.data(), &[3.0, 3.0]);
    }

    #[test]
    fn forward_backward_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut net = small_net(&mut rng);
            let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
            let y = net.forward(&x).unwrap();
            let gx = net.backward(&Tensor::full(&[2], 1.0)).unwrap();
            let grads: Vec<u64> = net.params().flat_map(|p| p.grad.data().iter().map(|v| v.to_bits())).collect();
            (y, gx, grads)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Layer::init("x", LayerSpec::MaxPool2d { window: 0, stride: 1 }, &mut rng).is_err());
    }
}
