//! Deterministic synthetic blood-smear frames: a noisy pale background with
//! stained cells, each a light cytoplasm ellipse around a dark nucleus.
//! Ground-truth boxes are the exact ellipse extents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedObject, Annotation, Sample, WBC_CLASS};
use crate::boxes::{iou, BBox};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum pairwise IoU between generated cells.
pub const MAX_CELL_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of cells per image.
    pub cells: (usize, usize),
    /// Inclusive range of the mean semi-axis in pixels.
    pub radius: (f64, f64),
    /// Largest ratio between the two semi-axes.
    pub max_elongation: f64,
    pub background: [f64; 3],
    pub cytoplasm: [f64; 3],
    pub nucleus: [f64; 3],
    /// Per-image / per-cell colour jitter amplitude.
    pub color_jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            cells: (1, 3),
            radius: (8.0, 13.0),
            max_elongation: 1.3,
            background: [0.92, 0.84, 0.86],
            cytoplasm: [0.74, 0.64, 0.84],
            nucleus: [0.36, 0.20, 0.55],
            color_jitter: 0.03,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && hi >= lo) || self.cells.0 > self.cells.1 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!("invalid synthetic config {self:?}")));
        }
        if !(self.max_elongation >= 1.0) || self.noise < 0.0 || self.color_jitter < 0.0 {
            return Err(Error::InvalidArgument("elongation >= 1 and non-negative noise required".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        let rgb = |c: [f64; 3]| format!("{},{},{}", c[0], c[1], c[2]);
        kv.set("synth_width", self.width);
        kv.set("synth_height", self.height);
        kv.set("synth_min_cells", self.cells.0);
        kv.set("synth_max_cells", self.cells.1);
        kv.set("synth_min_radius", self.radius.0);
        kv.set("synth_max_radius", self.radius.1);
        kv.set("synth_max_elongation", self.max_elongation);
        kv.set("synth_background", rgb(self.background));
        kv.set("synth_cytoplasm", rgb(self.cytoplasm));
        kv.set("synth_nucleus", rgb(self.nucleus));
        kv.set("synth_color_jitter", self.color_jitter);
        kv.set("synth_noise", self.noise);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.update("synth_width", &mut self.width)?;
        kv.update("synth_height", &mut self.height)?;
        kv.update("synth_min_cells", &mut self.cells.0)?;
        kv.update("synth_max_cells", &mut self.cells.1)?;
        kv.update("synth_min_radius", &mut self.radius.0)?;
        kv.update("synth_max_radius", &mut self.radius.1)?;
        kv.update("synth_max_elongation", &mut self.max_elongation)?;
        for (key, slot) in [
            ("synth_background", &mut self.background),
            ("synth_cytoplasm", &mut self.cytoplasm),
            ("synth_nucleus", &mut self.nucleus),
        ] {
            if let Some(v) = kv.get_list::<f64>(key)? {
                *slot = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs three values")))?;
            }
        }
        kv.update("synth_color_jitter", &mut self.color_jitter)?;
        kv.update("synth_noise", &mut self.noise)?;
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "synth_width",
        "synth_height",
        "synth_min_cells",
        "synth_max_cells",
        "synth_min_radius",
        "synth_max_radius",
        "synth_max_elongation",
        "synth_background",
        "synth_cytoplasm",
        "synth_nucleus",
        "synth_color_jitter",
        "synth_noise",
    ];
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    nucleus_dx: f64,
    nucleus_dy: f64,
    nucleus_scale: f64,
    cytoplasm: [f64; 3],
    nucleus: [f64; 3],
}

impl Cell {
    fn bbox(&self) -> BBox {
        BBox {
            x_min: self.cx - self.rx,
            y_min: self.cy - self.ry,
            x_max: self.cx + self.rx,
            y_max: self.cy + self.ry,
        }
    }
}

fn jitter(base: [f64; 3], amp: f64, rng: &mut impl Rng) -> [f64; 3] {
    let shift = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
    base.map(|c| (c + shift).clamp(0.0, 1.0))
}

fn place_cells(cfg: &SyntheticConfig, count: usize, rng: &mut impl Rng) -> Result<Vec<Cell>> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut cells: Vec<Cell> = Vec::with_capacity(count);
    for n in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.gen_range(cfg.radius.0..=cfg.radius.1);
            let e = rng.gen_range(1.0..=cfg.max_elongation).sqrt();
            let (rx, ry) = if rng.gen_bool(0.5) { (r * e, r / e) } else { (r / e, r * e) };
            if 2.0 * rx > w || 2.0 * ry > h {
                continue;
            }
            let cx = rng.gen_range(rx..=w - rx);
            let cy = rng.gen_range(ry..=h - ry);
            let cell = Cell {
                cx,
                cy,
                rx,
                ry,
                nucleus_dx: rng.gen_range(-0.15..=0.15) * rx,
                nucleus_dy: rng.gen_range(-0.15..=0.15) * ry,
                nucleus_scale: rng.gen_range(0.45..=0.65),
                cytoplasm: jitter(cfg.cytoplasm, cfg.color_jitter, rng),
                nucleus: jitter(cfg.nucleus, cfg.color_jitter, rng),
            };
            let b = cell.bbox();
            if cells.iter().all(|c| iou(&c.bbox(), &b) <= MAX_CELL_IOU) {
                placed = Some(cell);
                break;
            }
        }
        match placed {
            Some(c) => cells.push(c),
            None => {
                return Err(Error::Generation(format!(
                    "could not place cell {} of {count} with radius up to {} in a {}x{} image",
                    n + 1,
                    cfg.radius.1,
                    cfg.width,
                    cfg.height
                )))
            }
        }
    }
    Ok(cells)
}

fn inside(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (px - cx) / rx;
    let dy = (py - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Renders sample `index`; the result depends only on `(cfg, index)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let count = rng.gen_range(cfg.cells.0..=cfg.cells.1);
    let cells = place_cells(cfg, count, &mut rng)?;
    let background = jitter(cfg.background, cfg.color_jitter, &mut rng);

    let (w, h) = (cfg.width, cfg.height);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = background;
            for c in &cells {
                if inside(px, py, c.cx, c.cy, c.rx, c.ry) {
                    let (ncx, ncy) = (c.cx + c.nucleus_dx, c.cy + c.nucleus_dy);
                    let s = c.nucleus_scale;
                    color = if inside(px, py, ncx, ncy, c.rx * s, c.ry * s) {
                        c.nucleus
                    } else {
                        c.cytoplasm
                    };
                }
            }
            for ch in 0..3 {
                let n = if cfg.noise > 0.0 { rng.gen_range(-cfg.noise..=cfg.noise) } else { 0.0 };
                data[ch * plane + y * w + x] = (color[ch] + n).clamp(0.0, 1.0);
            }
        }
    }
    let annotation = Annotation {
        filename: format!("synth_{index:05}.ppm"),
        width: w,
        height: h,
        depth: 3,
        objects: cells
            .iter()
            .map(|c| AnnotatedObject {
                name: WBC_CLASS.to_string(),
                bbox: c.bbox(),
                difficult: false,
            })
            .collect(),
    };
    Sample::new(Tensor::new(vec![3, h, w], data)?, annotation)
}
