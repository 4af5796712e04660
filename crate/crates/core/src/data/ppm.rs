//! Netpbm binary images: P6 (RGB) and P5 (grayscale, promoted to RGB).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_pnm(&bytes).map_err(|msg| image_err(path, msg))
}

/// Decodes P6/P5 bytes into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported format {other:?} (expected P6 or P5)")),
    };
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse::<usize>().map_err(|_| format!("invalid {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if !(1..=255).contains(&maxval) {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let needed = width * height * channels;
    if bytes.len() < start + needed {
        return Err(format!(
            "truncated raster: need {needed} bytes, found {}",
            bytes.len().saturating_sub(start)
        ));
    }
    let raster = &bytes[start..start + needed];
    let scale = maxval as f64;
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels == 3 { raster[i * 3 + c] } else { raster[i] };
            data[c * plane + i] = (src as f64 / scale).min(1.0);
        }
    }
    Tensor::new(vec![3, height, width], data).map_err(|e| e.to_string())
}

/// Encodes a `[3, H, W]` tensor as P6 (values clamped to `[0, 1]`, rounded to 8 bits).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
