//! Labeled images, palettes, the synthetic scene generator, dataset IO and
//! training augmentation.

mod augment;
mod dataset;
mod palette;
mod synth;

pub use augment::{augment, rescale, AugmentConfig};
pub use dataset::{load_dataset, load_split, write_dataset};
pub use palette::{decode_labels, encode_labels, Palette};
pub use synth::{generate_synthetic, ClassRecipe, Shape, SynthSpec, Texture};

use image::RgbImage;

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Row-major `height x width` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel count per class index (`n_class` bins) plus the ignored count.
    pub fn histogram(&self, n_class: usize) -> (Vec<usize>, usize) {
        let mut h = vec![0; n_class];
        let mut ignored = 0;
        for &v in &self.data {
            match h.get_mut(v as usize) {
                Some(c) => *c += 1,
                None => ignored += 1,
            }
        }
        (h, ignored)
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// `seqNN/frame` style identifier.
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: RgbImage, labels: LabelMap) -> Self {
        debug_assert_eq!(image.width() as usize, labels.width);
        debug_assert_eq!(image.height() as usize, labels.height);
        Self {
            id: id.into(),
            image,
            labels,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.labels.height, self.labels.width)
    }

    /// Every label is a valid class index or [`IGNORE_INDEX`].
    pub fn labels_valid(&self, n_class: usize) -> bool {
        self.labels
            .data
            .iter()
            .all(|&v| (v as usize) < n_class || v == IGNORE_INDEX)
    }
}
