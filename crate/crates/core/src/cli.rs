//! Command-line front end. Every subcommand reads an optional flat
//! `key = value` config file; explicit flags override it, and built-in
//! defaults fill the rest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::config::KvMap;
use crate::data::{encode_ppm, generate_synthetic, serialize_voc_xml, split_indices, Manifest, ManifestEntry, Sample};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, count_cells, match_detections, CellCounts, MatchResult, MetricsReport, WBC_CLASS_ID};
use crate::head::{detect, Detection};
use crate::render::render_annotations;
use crate::train::{alternating_train, pretrain_synthetic, transfer_learn, ModelCheckpoint, StageTiming, TrainOutcome, TrainingConfig, PRETRAIN_STAGE};

#[derive(Debug, Parser)]
#[command(name = "wbcdet", version, about = "White blood cell detection and counting")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (generation, splits, initialisation, sampling).
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset manifest: one `image<TAB>annotation` pair per line.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Model checkpoint to read.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Minimum class probability for a detection to be reported.
    #[arg(long, global = true, value_name = "REAL")]
    pub score_threshold: Option<f64>,
    /// IoU threshold: final NMS for `detect`/`count`, matching for `evaluate`.
    #[arg(long, global = true, value_name = "REAL")]
    pub iou_threshold: Option<f64>,
    /// Also write annotated PPM images.
    #[arg(long, global = true)]
    pub render: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (PPM images, VOC XML, manifest).
    Synth {
        /// Number of images.
        #[arg(long)]
        n: usize,
    },
    /// Pretrain the backbone as a cell/background patch classifier.
    Pretrain,
    /// Four-stage alternating training on a manifest.
    Train {
        /// Split the manifest with the run seed, train on this many images and
        /// write train/test manifests next to the checkpoints.
        #[arg(long)]
        train_count: Option<usize>,
    },
    /// Retrain the RPN and detector heads of a checkpoint with the backbone frozen.
    Transfer,
    /// Run a checkpoint over a manifest and write a detections document.
    Detect,
    /// Compute miss rate and accuracy against manifest ground truth.
    Evaluate {
        /// Detections document from `detect` (otherwise `--checkpoint` is run).
        #[arg(long, value_name = "PATH")]
        detections: Option<PathBuf>,
        /// JSON list of per-image `{tp, fp, fn}` tallies, evaluated as is.
        #[arg(long, value_name = "PATH", conflicts_with = "detections")]
        matches: Option<PathBuf>,
    },
    /// Count detected cells per image.
    Count {
        /// Detections document from `detect` (otherwise `--checkpoint` is run).
        #[arg(long, value_name = "PATH")]
        detections: Option<PathBuf>,
    },
}

/// Detection-time keys accepted in config files on top of the training keys.
pub const DETECT_KEYS: &[&str] = &["score_threshold", "final_nms_iou", "match_iou"];

/// Effective settings after merging defaults, config file and flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub score_threshold: f64,
    pub final_nms_iou: f64,
    pub match_iou: f64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn resolve(common: &CommonArgs, command: &Command) -> Result<Self> {
        let file = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading config {}", p.display()), e))?;
                let kv = KvMap::parse(&text)?;
                let mut known = TrainingConfig::all_keys();
                known.extend_from_slice(DETECT_KEYS);
                kv.check_known(&known)?;
                kv
            }
            None => KvMap::new(),
        };
        let mut training = TrainingConfig::from_kv(&file)?;
        let mut score_threshold = 0.5;
        let mut final_nms_iou = 0.3;
        let mut match_iou = 0.5;
        file.update("score_threshold", &mut score_threshold)?;
        file.update("final_nms_iou", &mut final_nms_iou)?;
        file.update("match_iou", &mut match_iou)?;

        if let Some(seed) = common.seed {
            training.seed = seed;
        }
        if let Some(s) = common.score_threshold {
            score_threshold = s;
        }
        if let Some(t) = common.iou_threshold {
            match command {
                Command::Evaluate { .. } => match_iou = t,
                _ => final_nms_iou = t,
            }
        }
        for (name, v) in [("score threshold", score_threshold), ("iou threshold", final_nms_iou), ("iou threshold", match_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if match_iou <= 0.0 {
            return Err(Error::InvalidArgument("matching IoU threshold must be positive".into()));
        }
        training.synth.seed = training.seed;
        training.validate()?;
        Ok(Self {
            training,
            score_threshold,
            final_nms_iou,
            match_iou,
            out: common.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        })
    }

    /// Every effective setting, as echoed into reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut kv = self.training.to_kv();
        kv.set("score_threshold", self.score_threshold);
        kv.set("final_nms_iou", self.final_nms_iou);
        kv.set("match_iou", self.match_iou);
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }
}

/// One record of a detections document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub filename: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub probability: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            xmin: d.bbox.x_min,
            ymin: d.bbox.y_min,
            xmax: d.bbox.x_max,
            ymax: d.bbox.y_max,
            probability: d.probability,
        }
    }
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Result<Detection> {
        Ok(Detection {
            bbox: BBox::new(self.xmin, self.ymin, self.xmax, self.ymax)?,
            class_id: WBC_CLASS_ID,
            probability: self.probability,
        })
    }
}

/// Per-image tallies accepted by `evaluate --matches`.
#[derive(Debug, Clone, Copy, Deserialize)]
struct Tally {
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    config: BTreeMap<String, String>,
    metrics: &'a MetricsReport,
}

#[derive(Serialize)]
struct CountsDocument<'a> {
    config: BTreeMap<String, String>,
    images: Vec<(&'a str, usize)>,
    total: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
}

fn read_manifest(common: &CommonArgs) -> Result<Manifest> {
    let m = Manifest::read(require(&common.manifest, "manifest")?)?;
    m.check_files()?;
    Ok(m)
}

fn load_checkpoint(common: &CommonArgs) -> Result<ModelCheckpoint> {
    let path = require(&common.checkpoint, "checkpoint")?;
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!("missing checkpoint {}", path.display())));
    }
    ModelCheckpoint::load(path)
}

fn load_detector(common: &CommonArgs) -> Result<ModelCheckpoint> {
    let ck = load_checkpoint(common)?;
    if !ck.is_complete() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "stage '{}' checkpoint has no trained heads",
            ck.stage
        )));
    }
    Ok(ck)
}

fn image_name(entry: &ManifestEntry) -> String {
    entry
        .image
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_timing(path: &Path, timing: &[StageTiming]) -> Result<()> {
    write_json(path, &timing)
}

fn save_outcome(out: &Path, outcome: &TrainOutcome, report_name: &str) -> Result<()> {
    for ck in &outcome.checkpoints {
        ck.save(out.join(format!("{}.ckpt", ck.stage)))?;
    }
    outcome.final_checkpoint().save(out.join("model.ckpt"))?;
    write_json(&out.join(report_name), &outcome.report)?;
    write_timing(&out.join("timing.json"), &outcome.report.timing)
}

fn cmd_synth(run: &RunConfig, n: usize) -> Result<()> {
    let cfg = &run.training.synth;
    let (img_dir, ann_dir) = (run.out.join("images"), run.out.join("annotations"));
    ensure_dir(&img_dir)?;
    ensure_dir(&ann_dir)?;
    let mut manifest = Manifest::default();
    for i in 0..n as u64 {
        let sample = generate_synthetic(cfg, i)?;
        let stem = format!("synth_{i:05}");
        let image = img_dir.join(format!("{stem}.ppm"));
        let annotation = ann_dir.join(format!("{stem}.xml"));
        write_file(&image, encode_ppm(&sample.image)?)?;
        write_file(&annotation, serialize_voc_xml(&sample.annotation))?;
        manifest.entries.push(ManifestEntry { image, annotation });
    }
    manifest.write(run.out.join("manifest.txt"))?;
    log::info!("wrote {n} synthetic samples to {}", run.out.display());
    Ok(())
}

fn cmd_pretrain(run: &RunConfig) -> Result<()> {
    ensure_dir(&run.out)?;
    let cfg = &run.training;
    let (backbone, report) = pretrain_synthetic(cfg)?;
    log::info!("pretraining held-out accuracy {:.4}", report.heldout_accuracy);
    let mut model = crate::model::Detector::new(cfg.model.clone(), cfg.seed)?;
    model.backbone = backbone;
    ModelCheckpoint::new(PRETRAIN_STAGE, cfg, &model).save(run.out.join("pretrain.ckpt"))?;
    #[derive(Serialize)]
    struct Doc<'a> {
        config: BTreeMap<String, String>,
        pretrain: &'a crate::train::PretrainReport,
    }
    write_json(
        &run.out.join("pretrain_report.json"),
        &Doc {
            config: run.echo(),
            pretrain: &report,
        },
    )
}

fn cmd_train(run: &RunConfig, common: &CommonArgs, train_count: Option<usize>) -> Result<()> {
    let manifest = read_manifest(common)?;
    let pretrained = match &common.checkpoint {
        Some(_) => Some(load_checkpoint(common)?),
        None => None,
    };
    ensure_dir(&run.out)?;
    let cfg = &run.training;
    let train_manifest = match train_count {
        Some(count) => {
            let (train, test) = split_indices(manifest.len(), count, cfg.seed)?;
            let pick = |idx: &[usize]| Manifest {
                entries: idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
            };
            let (train, test) = (pick(&train), pick(&test));
            train.write(run.out.join("train_manifest.txt"))?;
            test.write(run.out.join("test_manifest.txt"))?;
            log::info!("split {} images into {} train / {} test", manifest.len(), train.len(), test.len());
            train
        }
        None => manifest,
    };
    let samples = train_manifest.load_samples()?;
    let (backbone, pre_report) = match pretrained {
        Some(ck) => (ck.model.backbone, None),
        None => {
            let (b, r) = pretrain_synthetic(cfg)?;
            log::info!("pretraining held-out accuracy {:.4}", r.heldout_accuracy);
            (b, Some(r))
        }
    };
    let outcome = alternating_train(&samples, &backbone, cfg, pre_report)?;
    save_outcome(&run.out, &outcome, "train_report.json")
}

fn cmd_transfer(run: &RunConfig, common: &CommonArgs) -> Result<()> {
    let manifest = read_manifest(common)?;
    let ck = load_detector(common)?;
    ensure_dir(&run.out)?;
    let samples = manifest.load_samples()?;
    let outcome = transfer_learn(&ck, &samples, &run.training)?;
    save_outcome(&run.out, &outcome, "transfer_report.json")
}

/// Runs the checkpoint over the manifest, optionally rendering each image.
fn run_detection(run: &RunConfig, common: &CommonArgs, manifest: &Manifest) -> Result<Vec<ImageDetections>> {
    let ck = load_detector(common)?;
    let render_dir = run.out.join("rendered");
    if common.render {
        ensure_dir(&render_dir)?;
    }
    let mut doc = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let image = crate::data::load_image(&entry.image)?;
        let dets = detect(
            &image,
            &ck.model,
            &run.training.proposals,
            run.score_threshold,
            run.final_nms_iou,
        )?;
        let filename = image_name(entry);
        if common.render {
            let stem = Path::new(&filename).file_stem().unwrap_or_default().to_string_lossy().into_owned();
            write_file(&render_dir.join(format!("{stem}.ppm")), encode_ppm(&render_annotations(&image, &dets))?)?;
        }
        doc.push(ImageDetections {
            filename,
            detections: dets.iter().map(DetectionRecord::from).collect(),
        });
    }
    Ok(doc)
}

fn cmd_detect(run: &RunConfig, common: &CommonArgs) -> Result<()> {
    let manifest = read_manifest(common)?;
    ensure_dir(&run.out)?;
    let doc = run_detection(run, common, &manifest)?;
    write_json(&run.out.join("detections.json"), &doc)
}

fn detections_from(run: &RunConfig, common: &CommonArgs, path: &Option<PathBuf>, manifest: &Manifest) -> Result<Vec<ImageDetections>> {
    match path {
        Some(p) => read_json(p),
        None => run_detection(run, common, manifest),
    }
}

fn to_detections(records: &[DetectionRecord]) -> Result<Vec<Detection>> {
    records.iter().map(DetectionRecord::to_detection).collect()
}

fn cmd_evaluate(run: &RunConfig, common: &CommonArgs, detections: &Option<PathBuf>, matches: &Option<PathBuf>) -> Result<MetricsReport> {
    let results: Vec<MatchResult> = match matches {
        Some(p) => read_json::<Vec<Tally>>(p)?
            .into_iter()
            .map(|t| MatchResult::from_counts(t.tp, t.fp, t.fn_))
            .collect(),
        None => {
            let manifest = read_manifest(common)?;
            ensure_dir(&run.out)?;
            let doc = detections_from(run, common, detections, &manifest)?;
            let by_name: BTreeMap<&str, &ImageDetections> = doc.iter().map(|d| (d.filename.as_str(), d)).collect();
            let mut results = Vec::with_capacity(manifest.len());
            for entry in &manifest.entries {
                let sample: Sample = Manifest::load_sample(entry)?;
                let name = image_name(entry);
                let record = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("no detections recorded for {name}")))?;
                results.push(match_detections(&to_detections(&record.detections)?, &sample.gt_boxes(), run.match_iou));
            }
            results
        }
    };
    let metrics = compute_metrics(&results)?;
    ensure_dir(&run.out)?;
    write_json(
        &run.out.join("metrics.json"),
        &MetricsDocument {
            config: run.echo(),
            metrics: &metrics,
        },
    )?;
    write_file(&run.out.join("metrics.txt"), metrics.to_table())?;
    Ok(metrics)
}

fn cmd_count(run: &RunConfig, common: &CommonArgs, detections: &Option<PathBuf>) -> Result<CellCounts> {
    let doc = match detections {
        Some(p) => read_json::<Vec<ImageDetections>>(p)?,
        None => {
            let manifest = read_manifest(common)?;
            ensure_dir(&run.out)?;
            run_detection(run, common, &manifest)?
        }
    };
    let per_image: Vec<Vec<Detection>> = doc.iter().map(|d| to_detections(&d.detections)).collect::<Result<_>>()?;
    let counts = count_cells(&per_image);
    ensure_dir(&run.out)?;
    write_json(
        &run.out.join("counts.json"),
        &CountsDocument {
            config: run.echo(),
            images: doc.iter().map(|d| d.filename.as_str()).zip(counts.per_image.iter().copied()).collect(),
            total: counts.total,
        },
    )?;
    Ok(counts)
}

/// Executes a parsed command line, printing summaries to `stdout`.
pub fn run(cli: &Cli, stdout: &mut impl Write) -> Result<()> {
    let run = RunConfig::resolve(&cli.common, &cli.command)?;
    let common = &cli.common;
    let io = |e| Error::io("writing to stdout", e);
    match &cli.command {
        Command::Synth { n } => cmd_synth(&run, *n),
        Command::Pretrain => cmd_pretrain(&run),
        Command::Train { train_count } => cmd_train(&run, common, *train_count),
        Command::Transfer => cmd_transfer(&run, common),
        Command::Detect => cmd_detect(&run, common),
        Command::Evaluate { detections, matches } => {
            let m = cmd_evaluate(&run, common, detections, matches)?;
            write!(stdout, "{}", m.to_table()).map_err(io)
        }
        Command::Count { detections } => {
            let c = cmd_count(&run, common, detections)?;
            for (i, n) in c.per_image.iter().enumerate() {
                writeln!(stdout, "image {i}: {n}").map_err(io)?;
            }
            writeln!(stdout, "total: {}", c.total).map_err(io)
        }
    }
}
