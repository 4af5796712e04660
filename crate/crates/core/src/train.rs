//! Training: synthetic backbone pretraining, the four-stage alternating
//! schedule (RPN, detector, RPN on a frozen backbone, detector on a frozen
//! backbone), and frozen-backbone transfer learning.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::{encode_box, generate_anchors, iou, BBox, RegressionTarget};
use crate::config::KvMap;
use crate::data::{generate_synthetic, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::head::{roi_pool, roi_pool_backward};
use crate::model::{normalize_target, Detector, ModelConfig};
use crate::rpn::{label_anchors, regression_targets, rpn_loss, AnchorLabel, AnchorSampler, LossConfig, ProposalConfig};
use crate::tensor::checkpoint::ParamFile;
use crate::tensor::ops::{smooth_l1, smooth_l1_grad, softmax_cross_entropy};
use crate::tensor::{sgd_update, Layer, LayerSpec, Sequential, Tensor};

/// Consecutive epoch-loss increases that flag a stage as diverging.
pub const DIVERGENCE_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Training patches (half cell, half background).
    pub patches: usize,
    pub heldout_patches: usize,
    pub patch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 10,
            patches: 400,
            heldout_patches: 200,
            patch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Learning rate of every non-backbone layer.
    pub lr_rpn: f64,
    /// Learning rate of the shared backbone while it is trainable.
    pub lr_cnn: f64,
    /// Epochs per stage.
    pub max_epochs: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub proposals: ProposalConfig,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    /// IoU at which a sampled region counts as a cell for the detector head.
    pub roi_fg_iou: f64,
    /// Background regions are preferably drawn from `[roi_bg_iou_lo, roi_fg_iou)`.
    pub roi_bg_iou_lo: f64,
    pub head_reg_weight: f64,
    /// Backbone frozen flag for stages 1..=4.
    pub freeze_backbone: [bool; 4],
    pub pretrain: PretrainConfig,
    pub synth: SyntheticConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_rpn: 1e-4,
            lr_cnn: 1e-5,
            max_epochs: 15,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            proposals: ProposalConfig::default(),
            pos_iou: 0.7,
            neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            roi_batch: 32,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_bg_iou_lo: 0.1,
            head_reg_weight: 1.0,
            freeze_backbone: [false, false, true, true],
            pretrain: PretrainConfig::default(),
            synth: SyntheticConfig::default(),
            seed: 0,
        }
    }
}

fn flag_list(v: &[bool]) -> String {
    v.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(",")
}

impl TrainingConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr_rpn",
        "lr_cnn",
        "max_epochs",
        "lambda",
        "n_cls",
        "n_reg",
        "pre_nms_top",
        "post_nms_top",
        "nms_iou",
        "min_size",
        "pos_iou",
        "neg_iou",
        "rpn_batch",
        "rpn_pos_fraction",
        "roi_batch",
        "roi_pos_fraction",
        "roi_fg_iou",
        "roi_bg_iou_lo",
        "head_reg_weight",
        "freeze_backbone",
        "pretrain_lr",
        "pretrain_epochs",
        "pretrain_patches",
        "pretrain_heldout_patches",
        "pretrain_patch_size",
        "seed",
        "anchor_scales",
        "anchor_ratios",
        "anchor_stride",
        "backbone_channels",
        "rpn_hidden",
        "head_hidden",
        "pooled",
        "num_classes",
        "pixel_mean",
        "input_scale",
        "rpn_target_stds",
        "head_target_stds",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_rpn > 0.0 && self.lr_cnn > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.proposals.validate()?;
        self.synth.validate()?;
        if !(self.pos_iou > self.neg_iou) || self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(Error::InvalidArgument("invalid sampling configuration".into()));
        }
        if self.pretrain.patch_size % 4 != 0 || self.pretrain.patch_size == 0 {
            return Err(Error::InvalidArgument("pretrain patch size must be a positive multiple of 4".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr_rpn", self.lr_rpn);
        kv.set("lr_cnn", self.lr_cnn);
        kv.set("max_epochs", self.max_epochs);
        kv.set("lambda", self.loss.lambda);
        kv.set("n_cls", self.loss.n_cls);
        kv.set("n_reg", self.loss.n_reg);
        kv.set("pre_nms_top", self.proposals.pre_nms_top);
        kv.set("post_nms_top", self.proposals.post_nms_top);
        kv.set("nms_iou", self.proposals.nms_iou);
        kv.set("min_size", self.proposals.min_size);
        kv.set("pos_iou", self.pos_iou);
        kv.set("neg_iou", self.neg_iou);
        kv.set("rpn_batch", self.rpn_batch);
        kv.set("rpn_pos_fraction", self.rpn_pos_fraction);
        kv.set("roi_batch", self.roi_batch);
        kv.set("roi_pos_fraction", self.roi_pos_fraction);
        kv.set("roi_fg_iou", self.roi_fg_iou);
        kv.set("roi_bg_iou_lo", self.roi_bg_iou_lo);
        kv.set("head_reg_weight", self.head_reg_weight);
        kv.set("freeze_backbone", flag_list(&self.freeze_backbone));
        kv.set("pretrain_lr", self.pretrain.lr);
        kv.set("pretrain_epochs", self.pretrain.epochs);
        kv.set("pretrain_patches", self.pretrain.patches);
        kv.set("pretrain_heldout_patches", self.pretrain.heldout_patches);
        kv.set("pretrain_patch_size", self.pretrain.patch_size);
        kv.set("seed", self.seed);
        self.model.write_kv(&mut kv);
        self.synth.write_kv(&mut kv);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.update("lr_rpn", &mut self.lr_rpn)?;
        kv.update("lr_cnn", &mut self.lr_cnn)?;
        kv.update("max_epochs", &mut self.max_epochs)?;
        kv.update("lambda", &mut self.loss.lambda)?;
        kv.update("n_cls", &mut self.loss.n_cls)?;
        kv.update("n_reg", &mut self.loss.n_reg)?;
        kv.update("pre_nms_top", &mut self.proposals.pre_nms_top)?;
        kv.update("post_nms_top", &mut self.proposals.post_nms_top)?;
        kv.update("nms_iou", &mut self.proposals.nms_iou)?;
        kv.update("min_size", &mut self.proposals.min_size)?;
        kv.update("pos_iou", &mut self.pos_iou)?;
        kv.update("neg_iou", &mut self.neg_iou)?;
        kv.update("rpn_batch", &mut self.rpn_batch)?;
        kv.update("rpn_pos_fraction", &mut self.rpn_pos_fraction)?;
        kv.update("roi_batch", &mut self.roi_batch)?;
        kv.update("roi_pos_fraction", &mut self.roi_pos_fraction)?;
        kv.update("roi_fg_iou", &mut self.roi_fg_iou)?;
        kv.update("roi_bg_iou_lo", &mut self.roi_bg_iou_lo)?;
        kv.update("head_reg_weight", &mut self.head_reg_weight)?;
        if let Some(v) = kv.get_list::<u8>("freeze_backbone")? {
            let flags: Vec<bool> = v.iter().map(|&x| x != 0).collect();
            self.freeze_backbone = flags
                .try_into()
                .map_err(|_| Error::Config("freeze_backbone needs four flags".into()))?;
        }
        kv.update("pretrain_lr", &mut self.pretrain.lr)?;
        kv.update("pretrain_epochs", &mut self.pretrain.epochs)?;
        kv.update("pretrain_patches", &mut self.pretrain.patches)?;
        kv.update("pretrain_heldout_patches", &mut self.pretrain.heldout_patches)?;
        kv.update("pretrain_patch_size", &mut self.pretrain.patch_size)?;
        kv.update("seed", &mut self.seed)?;
        self.model.apply_kv(kv)?;
        self.synth.apply_kv(kv)?;
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    pub fn all_keys() -> Vec<&'static str> {
        Self::KEYS.iter().chain(SyntheticConfig::KEYS).copied().collect()
    }
}

/// A model snapshot tagged with the stage that produced it and the
/// configuration it was trained under.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub stage: String,
    pub config: KvMap,
    pub model: Detector,
}

pub const PRETRAIN_STAGE: &str = "pretrain";

impl ModelCheckpoint {
    pub fn new(stage: &str, config: &TrainingConfig, model: &Detector) -> Self {
        Self {
            stage: stage.to_string(),
            config: config.to_kv(),
            model: model.clone(),
        }
    }

    /// Backbone-only checkpoints carry no trained heads.
    pub fn is_complete(&self) -> bool {
        self.stage != PRETRAIN_STAGE
    }

    fn param_file(&self) -> ParamFile {
        let mut meta = vec![("stage".to_string(), self.stage.clone())];
        meta.extend(self.config.iter().map(|(k, v)| (format!("config.{k}"), v.to_string())));
        let mut file = self.model.to_param_file(meta);
        if !self.is_complete() {
            file.params.retain(|p| p.name.starts_with("backbone."));
        }
        file
    }

    pub fn to_text(&self) -> Result<String> {
        self.param_file().to_text()
    }

    /// Writes through a temporary file so a failed save leaves nothing behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_text()?;
        let tmp = path.with_extension("ckpt.partial");
        std::fs::write(&tmp, text).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(format!("renaming to {}", path.display()), e)
        })
    }

    pub fn from_param_file(file: &ParamFile) -> Result<Self> {
        let stage = file
            .meta_value("stage")
            .ok_or_else(|| Error::Checkpoint("missing stage tag".into()))?
            .to_string();
        let mut config = KvMap::new();
        for (k, v) in &file.meta {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v);
            }
        }
        let cfg = TrainingConfig::from_kv(&config)?;
        let mut model = Detector::new(cfg.model.clone(), cfg.seed)?;
        model.load_params(file, stage != PRETRAIN_STAGE)?;
        Ok(Self { stage, config, model })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_param_file(&ParamFile::read_from(BufReader::new(f))?)
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        TrainingConfig::from_kv(&self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub backbone_frozen: bool,
    pub epochs: Vec<EpochReport>,
    /// Set when the loss rose for `DIVERGENCE_WINDOW` consecutive epochs.
    pub divergence_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochReport>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Machine-readable training record. Wall-clock timings are kept apart in
/// `timing` so the serialised report is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct TrainReport {
    pub config: BTreeMap<String, String>,
    pub pretrain: Option<PretrainReport>,
    pub stages: Vec<StageReport>,
    #[serde(skip)]
    pub timing: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    fn new(cfg: &TrainingConfig) -> Self {
        Self {
            config: cfg.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Pretraining

/// Labelled crops: class 1 = cell, 0 = background.
#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub patches: Vec<(Tensor, usize)>,
}

fn crop(image: &Tensor, x0: usize, y0: usize, size: usize) -> Tensor {
    let (c, h, w) = image.dims3().expect("image tensor");
    debug_assert!(x0 + size <= w && y0 + size <= h);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&image.data()[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(vec![c, size, size], out).expect("crop shape")
}

/// Balanced cell/background crops from synthetic frames `first..`.
pub fn synthetic_patches(cfg: &SyntheticConfig, count: usize, patch: usize, first: u64) -> Result<PatchSet> {
    if patch > cfg.width || patch > cfg.height {
        return Err(Error::InvalidArgument("patch larger than synthetic image".into()));
    }
    let mut set = PatchSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7061_7463_6865_7300);
    rng.set_stream(first);
    let mut index = first;
    let (w, h) = (cfg.width, cfg.height);
    while set.patches.len() < count {
        let sample = generate_synthetic(cfg, index)?;
        index += 1;
        let gts = sample.gt_boxes();
        if let Some(g) = gts.first() {
            let (cx, cy) = g.center();
            let x0 = (cx - patch as f64 / 2.0).round().clamp(0.0, (w - patch) as f64) as usize;
            let y0 = (cy - patch as f64 / 2.0).round().clamp(0.0, (h - patch) as f64) as usize;
            set.patches.push((crop(&sample.image, x0, y0, patch), 1));
        }
        for _ in 0..50 {
            let x0 = rng.gen_range(0..=w - patch);
            let y0 = rng.gen_range(0..=h - patch);
            let b = BBox::new(x0 as f64, y0 as f64, (x0 + patch) as f64, (y0 + patch) as f64)?;
            if gts.iter().all(|g| iou(g, &b) < 0.1) {
                set.patches.push((crop(&sample.image, x0, y0, patch), 0));
                break;
            }
        }
    }
    set.patches.truncate(count);
    Ok(set)
}

fn patch_classifier(backbone: Sequential, cfg: &ModelConfig, patch: usize, rng: &mut ChaCha8Rng) -> Result<Sequential> {
    let window = patch / cfg.anchors.stride;
    let mut layers = backbone.layers;
    layers.push(Layer::init("pretrain.pool", LayerSpec::MaxPool2d { window, stride: window }, rng)?);
    layers.push(Layer::init(
        "pretrain.fc",
        LayerSpec::FullyConnected {
            inputs: cfg.feature_channels(),
            outputs: 2,
        },
        rng,
    )?);
    Ok(Sequential::new(layers))
}

fn accuracy(net: &Sequential, set: &PatchSet) -> Result<f64> {
    if set.patches.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, label) in &set.patches {
        let out = net.infer(x)?;
        let pred = usize::from(out.data()[1] > out.data()[0]);
        correct += usize::from(pred == *label);
    }
    Ok(correct as f64 / set.patches.len() as f64)
}

/// Trains the backbone as a cell/background patch classifier (backbone,
/// global max-pool, 2-way linear layer) and returns the backbone layers.
/// Fails if held-out accuracy stays below 60%.
pub fn pretrain_backbone(
    train: &PatchSet,
    heldout: &PatchSet,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Sequential, PretrainReport)> {
    if train.patches.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining set".into()));
    }
    let normalize = |set: &PatchSet| -> Result<PatchSet> {
        Ok(PatchSet {
            patches: set
                .patches
                .iter()
                .map(|(x, l)| Ok((model_cfg.normalize(x)?, *l)))
                .collect::<Result<_>>()?,
        })
    };
    let (train, heldout) = (&normalize(train)?, &normalize(heldout)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = crate::model::new_backbone(model_cfg, &mut rng)?;
    let n_backbone = backbone.layers.len();
    let mut net = patch_classifier(backbone, model_cfg, cfg.patch_size, &mut rng)?;
    let mut order: Vec<usize> = (0..train.patches.len()).collect();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (x, label) = &train.patches[i];
            let logits = net.forward(x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, *label)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: PRETRAIN_STAGE.into(),
                    epoch,
                    message: "non-finite loss".into(),
                });
            }
            total += loss;
            net.backward(&grad)?;
            sgd_update(net.params_mut(), cfg.lr);
        }
        let mean = total / order.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.5}");
        epochs.push(EpochReport {
            epoch,
            loss: mean,
            cls: mean,
            reg: 0.0,
        });
    }
    net.clear_cache();
    let train_accuracy = accuracy(&net, train)?;
    let heldout_accuracy = if heldout.patches.is_empty() {
        train_accuracy
    } else {
        accuracy(&net, heldout)?
    };
    if heldout_accuracy < 0.6 {
        return Err(Error::PretrainFailed {
            accuracy: heldout_accuracy,
            epochs: cfg.epochs,
        });
    }
    net.layers.truncate(n_backbone);
    Ok((
        net,
        PretrainReport {
            epochs,
            train_accuracy,
            heldout_accuracy,
        },
    ))
}

/// Pretrains on synthetic patches drawn with a seed derived from `cfg.seed`.
pub fn pretrain_synthetic(cfg: &TrainingConfig) -> Result<(Sequential, PretrainReport)> {
    let synth = SyntheticConfig {
        seed: cfg.seed ^ 0x5052_4554_5241_494e,
        ..cfg.synth.clone()
    };
    let p = &cfg.pretrain;
    let train = synthetic_patches(&synth, p.patches, p.patch_size, 0)?;
    let heldout = synthetic_patches(&synth, p.heldout_patches, p.patch_size, 1 << 32)?;
    pretrain_backbone(&train, &heldout, &cfg.model, p, cfg.seed)
}

// ---------------------------------------------------------------------------
// RPN and detector stages

struct RpnTargets {
    labels: Vec<AnchorLabel>,
    targets: Vec<Option<RegressionTarget>>,
}

fn feature_dims(sample: &Sample, cfg: &ModelConfig) -> (usize, usize) {
    let s = cfg.anchors.stride;
    (sample.width() / s, sample.height() / s)
}

fn anchors_for(sample: &Sample, cfg: &ModelConfig) -> Result<Vec<BBox>> {
    let (fw, fh) = feature_dims(sample, cfg);
    generate_anchors(fw, fh, &cfg.anchors)
}

fn rpn_targets(samples: &[Sample], cfg: &TrainingConfig) -> Result<Vec<RpnTargets>> {
    samples
        .iter()
        .map(|s| {
            let anchors = anchors_for(s, &cfg.model)?;
            let gt = s.gt_boxes();
            let labels = label_anchors(&anchors, &gt, cfg.pos_iou, cfg.neg_iou)?;
            let stds = cfg.model.rpn_target_stds;
            let targets = regression_targets(&anchors, &labels, &gt)
                .into_iter()
                .map(|t| t.map(|t| normalize_target(&t, &stds)))
                .collect();
            Ok(RpnTargets { labels, targets })
        })
        .collect()
}

/// Normalised backbone inputs for every sample.
fn backbone_inputs(samples: &[Sample], cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| cfg.normalize(&s.image)).collect()
}

fn stage_rng(cfg: &TrainingConfig, stage: &str, stream: u64) -> ChaCha8Rng {
    let tag = stage.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ tag);
    rng.set_stream(stream);
    rng
}

/// One SGD step over the whole model: the backbone moves with `lr_cnn`,
/// every other layer with `lr_rpn`. Frozen parameters never move.
pub fn apply_updates(model: &mut Detector, cfg: &TrainingConfig) {
    sgd_update(model.backbone.params_mut(), cfg.lr_cnn);
    sgd_update(model.rpn.params_mut(), cfg.lr_rpn);
    sgd_update(model.head.params_mut(), cfg.lr_rpn);
}

fn check_finite(stage: &str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.into(),
            epoch,
            message: "loss became non-finite".into(),
        })
    }
}

fn rising(epochs: &[EpochReport]) -> bool {
    epochs.len() > DIVERGENCE_WINDOW
        && epochs[epochs.len() - DIVERGENCE_WINDOW - 1..]
            .windows(2)
            .all(|w| w[1].loss > w[0].loss)
}

fn finish_epoch(report: &mut StageReport, epoch: usize, sums: (f64, f64, f64), n: usize) {
    let n = n.max(1) as f64;
    let e = EpochReport {
        epoch,
        loss: sums.0 / n,
        cls: sums.1 / n,
        reg: sums.2 / n,
    };
    log::info!("{} epoch {epoch}: loss {:.6} (cls {:.6}, reg {:.6})", report.stage, e.loss, e.cls, e.reg);
    report.epochs.push(e);
    if rising(&report.epochs) && !report.divergence_warning {
        log::warn!("{}: loss rose for {DIVERGENCE_WINDOW} consecutive epochs", report.stage);
        report.divergence_warning = true;
    }
}

/// Mean RPN loss over `samples`, using a fixed-seed minibatch per image.
pub fn rpn_dataset_loss(model: &Detector, samples: &[Sample], cfg: &TrainingConfig) -> Result<f64> {
    let targets = rpn_targets(samples, cfg)?;
    let mut sampler = AnchorSampler::new(cfg.seed ^ 0xe7a1);
    let inputs = backbone_inputs(samples, &model.config)?;
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(&targets) {
        let feat = model.backbone.infer(x)?;
        let out = model.rpn.to_output(&model.rpn.infer(&feat)?)?;
        let batch = sampler.sample(&t.labels, cfg.rpn_batch, cfg.rpn_pos_fraction)?;
        total += rpn_loss(&out, &t.labels, &t.targets, &cfg.loss, &batch)?.total;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains the RPN head (and the backbone unless frozen) for `max_epochs`.
pub fn train_rpn_stage(model: &mut Detector, samples: &[Sample], cfg: &TrainingConfig, stage: &str, freeze_backbone: bool) -> Result<(StageReport, StageTiming)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    model.backbone.set_frozen(freeze_backbone);
    let targets = rpn_targets(samples, cfg)?;
    let inputs = backbone_inputs(samples, &model.config)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = stage_rng(cfg, stage, 0);
    let mut sampler = AnchorSampler::new(rng.gen());
    let mut report = StageReport {
        stage: stage.into(),
        backbone_frozen: freeze_backbone,
        epochs: Vec::new(),
        divergence_warning: false,
    };
    let mut timing = StageTiming {
        stage: stage.into(),
        epoch_seconds: Vec::new(),
    };
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for &i in &order {
            let t = &targets[i];
            let feat = if freeze_backbone {
                model.backbone.infer(&inputs[i])?
            } else {
                model.backbone.forward(&inputs[i])?
            };
            let (_, fh, fw) = feat.dims3()?;
            let raw = model.rpn.forward(&feat)?;
            let out = model.rpn.to_output(&raw)?;
            let batch = sampler.sample(&t.labels, cfg.rpn_batch, cfg.rpn_pos_fraction)?;
            let loss = rpn_loss(&out, &t.labels, &t.targets, &cfg.loss, &batch)?;
            check_finite(stage, epoch, loss.total)?;
            sums = (sums.0 + loss.total, sums.1 + loss.cls_term, sums.2 + loss.reg_term);
            let grad_feat = model.rpn.backward(&loss.grad_logits, &loss.grad_deltas, fh, fw)?;
            if !freeze_backbone {
                model.backbone.backward(&grad_feat)?;
            }
            apply_updates(model, cfg);
        }
        finish_epoch(&mut report, epoch, sums, samples.len());
        timing.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    model.backbone.clear_cache();
    Ok((report, timing))
}

/// Region sampled for the detector head: label 1 = cell, 0 = background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub bbox: BBox,
    pub label: usize,
    pub target: Option<RegressionTarget>,
}

/// Samples head training regions from proposals plus ground truth.
/// Background is drawn first from near misses (IoU in
/// `[roi_bg_iou_lo, roi_fg_iou)`), then topped up from the rest.
pub fn sample_rois(proposals: &[BBox], gt: &[BBox], cfg: &TrainingConfig, rng: &mut impl Rng) -> Vec<RoiSample> {
    let mut fg = Vec::new();
    let mut hard = Vec::new();
    let mut easy = Vec::new();
    for b in proposals.iter().chain(gt) {
        let best = gt
            .iter()
            .map(|g| iou(b, g))
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        let bg = RoiSample {
            bbox: *b,
            label: 0,
            target: None,
        };
        match best {
            Some((g, v)) if v >= cfg.roi_fg_iou => fg.push(RoiSample {
                bbox: *b,
                label: 1,
                target: Some(encode_box(b, &gt[g])),
            }),
            Some((_, v)) if v >= cfg.roi_bg_iou_lo => hard.push(bg),
            _ => easy.push(bg),
        }
    }
    let mut pick = |pool: &[RoiSample], n: usize| -> Vec<RoiSample> {
        let mut idx = index::sample(rng, pool.len(), n.min(pool.len())).into_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| pool[i]).collect()
    };
    let n_fg = fg.len().min((cfg.roi_batch as f64 * cfg.roi_pos_fraction).floor() as usize);
    let mut out = pick(&fg, n_fg);
    let n_bg = cfg.roi_batch - out.len();
    let hard = pick(&hard, n_bg);
    let rest = n_bg - hard.len();
    out.extend(hard);
    out.extend(pick(&easy, rest));
    out
}

/// Proposals of `model` for every sample.
pub fn proposals_for(model: &Detector, samples: &[Sample], cfg: &ProposalConfig) -> Result<Vec<Vec<BBox>>> {
    samples
        .iter()
        .map(|s| {
            let feat = model.features(&s.image)?;
            Ok(model
                .propose(&feat, s.width(), s.height(), cfg)?
                .into_iter()
                .map(|p| p.bbox)
                .collect())
        })
        .collect()
}

/// Trains the detector head (and the backbone unless frozen) on fixed
/// per-image proposals.
pub fn train_detector_stage(
    model: &mut Detector,
    samples: &[Sample],
    proposals: &[Vec<BBox>],
    cfg: &TrainingConfig,
    stage: &str,
    freeze_backbone: bool,
) -> Result<(StageReport, StageTiming)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    model.backbone.set_frozen(freeze_backbone);
    let scale = model.config.spatial_scale();
    let pooled = model.config.pooled;
    let inputs = backbone_inputs(samples, &model.config)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = stage_rng(cfg, stage, 0);
    let mut roi_rng = stage_rng(cfg, stage, 1);
    let mut report = StageReport {
        stage: stage.into(),
        backbone_frozen: freeze_backbone,
        epochs: Vec::new(),
        divergence_warning: false,
    };
    let mut timing = StageTiming {
        stage: stage.into(),
        epoch_seconds: Vec::new(),
    };
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for &i in &order {
            let s = &samples[i];
            let feat = if freeze_backbone {
                model.backbone.infer(&inputs[i])?
            } else {
                model.backbone.forward(&inputs[i])?
            };
            let rois = sample_rois(&proposals[i], &s.gt_boxes(), cfg, &mut roi_rng);
            if rois.is_empty() {
                continue;
            }
            let inv = 1.0 / rois.len() as f64;
            let mut grad_feat = Tensor::zeros(feat.shape());
            let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
            for roi in &rois {
                let pooled_roi = roi_pool(&feat, &roi.bbox, scale, pooled)?;
                let (logits, deltas) = model.head.forward(&pooled_roi.tensor)?;
                let (ce, mut g_logits) = softmax_cross_entropy(&logits, roi.label)?;
                g_logits.scale(inv);
                cls_sum += ce * inv;
                let mut g_deltas = vec![[0.0; 4]; deltas.len()];
                if let Some(t) = roi.target {
                    let pred = deltas[roi.label - 1].to_array();
                    for (c, (p, q)) in pred.iter().zip(normalize_target(&t, &model.config.head_target_stds).to_array()).enumerate() {
                        reg_sum += cfg.head_reg_weight * inv * smooth_l1(p - q);
                        g_deltas[roi.label - 1][c] = cfg.head_reg_weight * inv * smooth_l1_grad(p - q);
                    }
                }
                let g_pooled = model.head.backward(&g_logits, &g_deltas)?;
                if !freeze_backbone {
                    roi_pool_backward(&mut grad_feat, &pooled_roi, &g_pooled)?;
                }
            }
            let total = cls_sum + reg_sum;
            check_finite(stage, epoch, total)?;
            sums = (sums.0 + total, sums.1 + cls_sum, sums.2 + reg_sum);
            if !freeze_backbone {
                model.backbone.backward(&grad_feat)?;
            }
            apply_updates(model, cfg);
        }
        finish_epoch(&mut report, epoch, sums, samples.len());
        timing.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    model.backbone.clear_cache();
    Ok((report, timing))
}

/// Outcome of a multi-stage run: one checkpoint per stage plus the report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<ModelCheckpoint>,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &ModelCheckpoint {
        self.checkpoints.last().expect("at least one stage")
    }
}

/// Four-stage alternating schedule starting from a pretrained backbone:
/// 1. RPN on the pretrained backbone;
/// 2. a separate detector (again from the pretrained backbone) on stage-1 proposals;
/// 3. RPN head on the stage-2 backbone, backbone frozen;
/// 4. detector head on stage-3 proposals, backbone frozen.
pub fn alternating_train(
    samples: &[Sample],
    pretrained: &Sequential,
    cfg: &TrainingConfig,
    pretrain_report: Option<PretrainReport>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut report = TrainReport::new(cfg);
    report.pretrain = pretrain_report;
    let mut checkpoints = Vec::new();
    let init = Detector::new(cfg.model.clone(), cfg.seed)?;
    let with_backbone = |m: &Detector| {
        let mut m = m.clone();
        m.backbone = pretrained.clone();
        m.backbone.set_frozen(false);
        m
    };
    let push = |report: &mut TrainReport, (r, t): (StageReport, StageTiming)| {
        report.stages.push(r);
        report.timing.push(t);
    };

    let mut rpn_net = with_backbone(&init);
    push(&mut report, train_rpn_stage(&mut rpn_net, samples, cfg, "stage1", cfg.freeze_backbone[0])?);
    checkpoints.push(ModelCheckpoint::new("stage1", cfg, &rpn_net));

    let proposals = proposals_for(&rpn_net, samples, &cfg.proposals)?;
    let mut det_net = with_backbone(&init);
    det_net.rpn = rpn_net.rpn.clone();
    push(
        &mut report,
        train_detector_stage(&mut det_net, samples, &proposals, cfg, "stage2", cfg.freeze_backbone[1])?,
    );
    checkpoints.push(ModelCheckpoint::new("stage2", cfg, &det_net));

    let mut model = det_net;
    push(&mut report, train_rpn_stage(&mut model, samples, cfg, "stage3", cfg.freeze_backbone[2])?);
    checkpoints.push(ModelCheckpoint::new("stage3", cfg, &model));

    let proposals = proposals_for(&model, samples, &cfg.proposals)?;
    push(
        &mut report,
        train_detector_stage(&mut model, samples, &proposals, cfg, "stage4", cfg.freeze_backbone[3])?,
    );
    checkpoints.push(ModelCheckpoint::new("stage4", cfg, &model));
    Ok(TrainOutcome { checkpoints, report })
}

/// Fine-tunes the RPN head and then the detector head of `checkpoint` on a
/// new dataset with the backbone frozen. Classes stay {background, WBC}.
pub fn transfer_learn(checkpoint: &ModelCheckpoint, samples: &[Sample], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !checkpoint.is_complete() {
        return Err(Error::IncompatibleCheckpoint("transfer needs a fully trained checkpoint".into()));
    }
    let classes = checkpoint.model.head.num_classes;
    if classes != 2 || cfg.model.num_classes != 2 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "transfer targets 2 classes, checkpoint head has {classes}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut report = TrainReport::new(cfg);
    let mut model = checkpoint.model.clone();
    let t = |r: &mut TrainReport, (s, tm): (StageReport, StageTiming)| {
        r.stages.push(s);
        r.timing.push(tm);
    };
    t(&mut report, train_rpn_stage(&mut model, samples, cfg, "transfer-rpn", true)?);
    let proposals = proposals_for(&model, samples, &cfg.proposals)?;
    t(
        &mut report,
        train_detector_stage(&mut model, samples, &proposals, cfg, "transfer-head", true)?,
    );
    Ok(TrainOutcome {
        checkpoints: vec![ModelCheckpoint::new("transfer", cfg, &model)],
        report,
    })
}
