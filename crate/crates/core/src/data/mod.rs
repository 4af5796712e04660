//! Dataset ingestion: VOC annotations, PPM images, manifests, splitting and
//! the synthetic microscopy generator.

pub mod manifest;
pub mod ppm;
pub mod synth;
pub mod voc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{Manifest, ManifestEntry};
pub use ppm::{encode_ppm, load_image};
pub use synth::{generate_synthetic, SyntheticConfig};
pub use voc::{parse_voc_xml, serialize_voc_xml};

/// Class name treated as foreground (compared case-insensitively).
pub const WBC_CLASS: &str = "WBC";

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub name: String,
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub filename: String,
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    /// Boxes of white-blood-cell objects; every other class is background.
    pub fn wbc_boxes(&self) -> Vec<BBox> {
        self.objects
            .iter()
            .filter(|o| o.name.eq_ignore_ascii_case(WBC_CLASS))
            .map(|o| o.bbox)
            .collect()
    }
}

/// An image (`[3, H, W]`, values in `[0, 1]`) with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub annotation: Annotation,
}

impl Sample {
    pub fn new(image: Tensor, annotation: Annotation) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || h != annotation.height || w != annotation.width {
            return Err(Error::Shape(format!(
                "image {w}x{h}x{c} does not match annotation {}x{}",
                annotation.width, annotation.height
            )));
        }
        Ok(Self { image, annotation })
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.annotation.wbc_boxes()
    }

    pub fn width(&self) -> usize {
        self.annotation.width
    }

    pub fn height(&self) -> usize {
        self.annotation.height
    }
}

/// Seeded shuffle of `0..n` split into `train_count` training indices and
/// the rest.
pub fn split_indices(n: usize, train_count: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if train_count > n {
        return Err(Error::InvalidArgument(format!(
            "train_count {train_count} exceeds the {n} available samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(train_count);
    Ok((idx, test))
}

pub fn split_dataset<T: Clone>(samples: &[T], train_count: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = split_indices(samples.len(), train_count, seed)?;
    Ok((
        train.iter().map(|&i| samples[i].clone()).collect(),
        test.iter().map(|&i| samples[i].clone()).collect(),
    ))
}
