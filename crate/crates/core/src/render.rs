//! Draws detections onto an image: 2-px yellow rectangles and a percent
//! label in a built-in 3x5 bitmap font.

use crate::head::Detection;
use crate::tensor::Tensor;

pub const YELLOW: [f64; 3] = [1.0, 1.0, 0.0];
const LABEL_BG: [f64; 3] = [0.0, 0.0, 0.0];
pub const LINE_WIDTH: usize = 2;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
/// Scale factor applied to every glyph pixel.
const GLYPH_SCALE: usize = 1;
const PAD: usize = 1;

/// Rows of a 3x5 glyph, most significant bit on the left.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        _ => [0; GLYPH_H],
    }
}

/// Probability as a one-decimal percentage, e.g. `0.9876 -> "98.8%"`.
pub fn percent_label(probability: f64) -> String {
    format!("{:.1}%", (probability * 100.0).clamp(0.0, 100.0))
}

struct Canvas<'a> {
    data: &'a mut [f64],
    w: usize,
    h: usize,
}

impl Canvas<'_> {
    fn put(&mut self, x: i64, y: i64, rgb: [f64; 3]) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        for (c, v) in rgb.iter().enumerate() {
            self.data[(c * self.h + y) * self.w + x] = *v;
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f64; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, rgb);
            }
        }
    }
}

/// Pixel extent `[x0, x1) x [y0, y1)` of a label whose top-left is `(x, y)`.
fn label_size(text: &str) -> (i64, i64) {
    let n = text.chars().count();
    let w = n * (GLYPH_W + 1) * GLYPH_SCALE - GLYPH_SCALE + 2 * PAD;
    let h = GLYPH_H * GLYPH_SCALE + 2 * PAD;
    (w as i64, h as i64)
}

fn draw_label(canvas: &mut Canvas, x: i64, y: i64, text: &str) {
    let (w, h) = label_size(text);
    canvas.fill(x, y, x + w, y + h, LABEL_BG);
    let s = GLYPH_SCALE as i64;
    for (i, c) in text.chars().enumerate() {
        let gx = x + PAD as i64 + i as i64 * (GLYPH_W as i64 + 1) * s;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    let px = gx + col as i64 * s;
                    let py = y + PAD as i64 + row as i64 * s;
                    canvas.fill(px, py, px + s, py + s, YELLOW);
                }
            }
        }
    }
}

/// Returns a copy of `image` (`[3, H, W]`) with every detection outlined
/// and labelled. The label sits just above the box, or just below it when
/// there is no room above.
pub fn render_annotations(image: &Tensor, dets: &[Detection]) -> Tensor {
    let mut out = image.clone();
    let shape = out.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut canvas = Canvas {
        data: out.data_mut(),
        w,
        h,
    };
    let lw = LINE_WIDTH as i64;
    for d in dets {
        let x0 = d.bbox.x_min.round() as i64;
        let y0 = d.bbox.y_min.round() as i64;
        let x1 = (d.bbox.x_max.round() as i64).max(x0 + 1);
        let y1 = (d.bbox.y_max.round() as i64).max(y0 + 1);
        canvas.fill(x0, y0, x1, (y0 + lw).min(y1), YELLOW);
        canvas.fill(x0, (y1 - lw).max(y0), x1, y1, YELLOW);
        canvas.fill(x0, y0, (x0 + lw).min(x1), y1, YELLOW);
        canvas.fill((x1 - lw).max(x0), y0, x1, y1, YELLOW);

        let text = percent_label(d.probability);
        let (_, lh) = label_size(&text);
        let ly = if y0 - lh >= 0 { y0 - lh } else { y1 };
        draw_label(&mut canvas, x0, ly, &text);
    }
    out
}

/// Pixels touched by `render_annotations` for one detection: its outline
/// and its label block.
pub fn annotation_footprint(det: &Detection, w: usize, h: usize) -> Vec<(usize, usize)> {
    let x0 = det.bbox.x_min.round() as i64;
    let y0 = det.bbox.y_min.round() as i64;
    let x1 = (det.bbox.x_max.round() as i64).max(x0 + 1);
    let y1 = (det.bbox.y_max.round() as i64).max(y0 + 1);
    let lw = LINE_WIDTH as i64;
    let (lbw, lbh) = label_size(&percent_label(det.probability));
    let ly = if y0 - lbh >= 0 { y0 - lbh } else { y1 };
    let mut px = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let in_box = x >= x0 && x < x1 && y >= y0 && y < y1;
            let border = in_box && (x < x0 + lw || x >= x1 - lw || y < y0 + lw || y >= y1 - lw);
            let label = x >= x0 && x < x0 + lbw && y >= ly && y < ly + lbh;
            if border || label {
                px.push((x as usize, y as usize));
            }
        }
    }
    px
}
