//! The assembled detector: shared convolutional backbone, RPN head and
//! detection head, plus conversion to and from parameter files.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{generate_anchors, AnchorSpec, RegressionTarget, ScoredBox};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::head::DetectorHead;
use crate::rpn::{generate_proposals, ProposalConfig, RpnHead};
use crate::tensor::checkpoint::ParamFile;
use crate::tensor::{LayerSpec, Parameter, Sequential, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub anchors: AnchorSpec,
    /// Output channels of the three backbone convolutions.
    pub backbone_channels: [usize; 3],
    pub rpn_hidden: usize,
    pub head_hidden: usize,
    /// Side of the pooled ROI grid.
    pub pooled: usize,
    pub num_classes: usize,
    /// Per-channel value subtracted from `[0, 1]` images before the backbone.
    pub pixel_mean: [f64; 3],
    /// Multiplier applied after mean subtraction.
    pub input_scale: f64,
    /// The RPN predicts box deltas divided by these.
    pub rpn_target_stds: [f64; 4],
    /// The detector head predicts box deltas divided by these.
    pub head_target_stds: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorSpec::default(),
            backbone_channels: [8, 16, 3],
            rpn_hidden: 256,
            head_hidden: 64,
            pooled: 32,
            num_classes: 2,
            pixel_mean: [0.5, 0.5, 0.5],
            input_scale: 1.0,
            rpn_target_stds: [0.1, 0.1, 0.2, 0.2],
            head_target_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

/// Total downsampling of the backbone (two 2x max-pools).
pub const BACKBONE_STRIDE: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.anchors.stride != BACKBONE_STRIDE {
            return Err(Error::InvalidArgument(format!(
                "anchor stride must equal the backbone stride {BACKBONE_STRIDE}"
            )));
        }
        if self.backbone_channels.contains(&0) || self.rpn_hidden == 0 || self.head_hidden == 0 || self.pooled == 0 {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::InvalidArgument("input_scale must be positive".into()));
        }
        if !self.rpn_target_stds.iter().chain(&self.head_target_stds).all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument("target stds must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Backbone input for a `[3, H, W]` image in `[0, 1]`.
    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {c}")));
        }
        let plane = h * w;
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.pixel_mean[i / plane]) * self.input_scale)
            .collect();
        Tensor::new(vec![c, h, w], data)
    }

    pub fn spatial_scale(&self) -> f64 {
        1.0 / self.anchors.stride as f64
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[2]
    }

    pub fn backbone_specs(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3] = self.backbone_channels;
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let pool = LayerSpec::MaxPool2d { window: 2, stride: 2 };
        vec![
            conv(3, c1),
            LayerSpec::Relu,
            pool,
            conv(c1, c2),
            LayerSpec::Relu,
            pool,
            conv(c2, c3),
            LayerSpec::Relu,
        ]
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("anchor_scales", join(&self.anchors.scales));
        kv.set("anchor_ratios", join(&self.anchors.ratios));
        kv.set("anchor_stride", self.anchors.stride);
        kv.set("backbone_channels", join(&self.backbone_channels));
        kv.set("rpn_hidden", self.rpn_hidden);
        kv.set("head_hidden", self.head_hidden);
        kv.set("pooled", self.pooled);
        kv.set("num_classes", self.num_classes);
        kv.set("pixel_mean", join(&self.pixel_mean));
        kv.set("input_scale", self.input_scale);
        kv.set("rpn_target_stds", join(&self.rpn_target_stds));
        kv.set("head_target_stds", join(&self.head_target_stds));
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.get_list::<f64>("anchor_scales")? {
            self.anchors.scales = v;
        }
        if let Some(v) = kv.get_list::<f64>("anchor_ratios")? {
            self.anchors.ratios = v;
        }
        kv.update("anchor_stride", &mut self.anchors.stride)?;
        if let Some(v) = kv.get_list::<usize>("backbone_channels")? {
            self.backbone_channels = v
                .try_into()
                .map_err(|_| Error::Config("backbone_channels needs three values".into()))?;
        }
        kv.update("rpn_hidden", &mut self.rpn_hidden)?;
        kv.update("head_hidden", &mut self.head_hidden)?;
        kv.update("pooled", &mut self.pooled)?;
        kv.update("num_classes", &mut self.num_classes)?;
        if let Some(v) = kv.get_list::<f64>("pixel_mean")? {
            self.pixel_mean = v
                .try_into()
                .map_err(|_| Error::Config("pixel_mean needs three values".into()))?;
        }
        kv.update("input_scale", &mut self.input_scale)?;
        for (key, slot) in [
            ("rpn_target_stds", &mut self.rpn_target_stds),
            ("head_target_stds", &mut self.head_target_stds),
        ] {
            if let Some(v) = kv.get_list::<f64>(key)? {
                *slot = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs four values")))?;
            }
        }
        Ok(())
    }
}

/// `t / stds`, componentwise: the quantity a regression branch predicts.
pub fn normalize_target(t: &RegressionTarget, stds: &[f64; 4]) -> RegressionTarget {
    let mut a = t.to_array();
    a.iter_mut().zip(stds).for_each(|(v, s)| *v /= s);
    RegressionTarget::from_array(a)
}

/// Inverse of [`normalize_target`].
pub fn denormalize_target(t: &RegressionTarget, stds: &[f64; 4]) -> RegressionTarget {
    let mut a = t.to_array();
    a.iter_mut().zip(stds).for_each(|(v, s)| *v *= s);
    RegressionTarget::from_array(a)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Backbone, RPN head and detection head sharing one feature map.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Sequential,
    pub rpn: RpnHead,
    pub head: DetectorHead,
}

impl Detector {
    /// Backbone feature map of a `[3, H, W]` image in `[0, 1]`.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.backbone.infer(&self.config.normalize(image)?)
    }

    /// RPN proposals over `features` for an `img_w x img_h` image.
    pub fn propose(&self, features: &Tensor, img_w: usize, img_h: usize, cfg: &ProposalConfig) -> Result<Vec<ScoredBox>> {
        let (_, fh, fw) = features.dims3()?;
        let anchors = generate_anchors(fw, fh, &self.config.anchors)?;
        let mut out = self.rpn.to_output(&self.rpn.infer(features)?)?;
        let stds = self.config.rpn_target_stds;
        out.deltas.iter_mut().for_each(|d| *d = denormalize_target(d, &stds));
        generate_proposals(&out, &anchors, img_w, img_h, cfg)
    }

    /// Randomly initialised detector, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = new_backbone(&config, &mut rng)?;
        let c = config.feature_channels();
        let rpn = RpnHead::new(c, config.rpn_hidden, config.anchors.k(), &mut rng)?;
        let head = DetectorHead::new(c, config.pooled, config.head_hidden, config.num_classes, &mut rng)?;
        Ok(Self {
            config,
            backbone,
            rpn,
            head,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.backbone.params().chain(self.rpn.params()).chain(self.head.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.backbone
            .params_mut()
            .chain(self.rpn.params_mut())
            .chain(self.head.params_mut())
    }

    pub fn to_param_file(&self, meta: Vec<(String, String)>) -> ParamFile {
        ParamFile {
            meta,
            params: self.params().cloned().collect(),
        }
    }

    /// Copies every parameter of `file` whose name matches one of ours. With
    /// `require_all`, every parameter of the model must be present.
    pub fn load_params(&mut self, file: &ParamFile, require_all: bool) -> Result<()> {
        let mut loaded = 0;
        for p in self.params_mut() {
            match file.param(&p.name) {
                Some(src) => {
                    if src.value.shape() != p.value.shape() {
                        return Err(Error::IncompatibleCheckpoint(format!(
                            "{} has shape {:?}, model expects {:?}",
                            p.name,
                            src.value.shape(),
                            p.value.shape()
                        )));
                    }
                    p.value = src.value.clone();
                    p.frozen = src.frozen;
                    p.zero_grad();
                    loaded += 1;
                }
                None if require_all => {
                    return Err(Error::IncompatibleCheckpoint(format!("missing parameter {}", p.name)));
                }
                None => {}
            }
        }
        if loaded == 0 {
            return Err(Error::IncompatibleCheckpoint("no matching parameters".into()));
        }
        Ok(())
    }
}

pub fn new_backbone(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Sequential> {
    Sequential::from_specs("backbone", &config.backbone_specs(), rng)
}

/// Bit patterns of all backbone parameters, for freeze checks.
pub fn backbone_bits(model: &Detector) -> Vec<u64> {
    model
        .backbone
        .params()
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}
