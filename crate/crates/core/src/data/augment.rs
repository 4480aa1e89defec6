use image::RgbImage;
use rand::Rng;

use super::{LabelMap, LabeledImage, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::pyramid::{nearest_indices, resize_planar, scaled_len};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Multiplicative rescale range `(low, high)`.
    pub scale_range: (f64, f64),
    /// Output crop `(height, width)`.
    pub crop: (usize, usize),
}

impl Default for AugmentConfig {
    /// Desk-scale default: 224x224 crops.
    fn default() -> Self {
        Self {
            scale_range: (0.5, 2.0),
            crop: (224, 224),
        }
    }
}

impl AugmentConfig {
    /// The full-resolution setting used for 4K imagery: 896x896 crops.
    pub fn full_scale() -> Self {
        Self {
            crop: (896, 896),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("scale_range", format!("invalid range ({lo}, {hi})")));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::config("crop", "crop size must be positive"));
        }
        Ok(())
    }
}

/// Rescales by `factor`: bilinear for the image, nearest for labels.
pub fn rescale(sample: &LabeledImage, factor: f64) -> LabeledImage {
    let (h, w) = sample.size();
    let (oh, ow) = (scaled_len(h, factor), scaled_len(w, factor));
    if (oh, ow) == (h, w) {
        return sample.clone();
    }
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in sample.image.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px.0[c] as f32;
        }
    }
    let out = resize_planar(&planar, 3, (h, w), (oh, ow));
    let image = RgbImage::from_fn(ow as u32, oh as u32, |x, y| {
        let i = y as usize * ow + x as usize;
        image::Rgb([0, 1, 2].map(|c| out[c * oh * ow + i].round().clamp(0.0, 255.0) as u8))
    });
    let ys = nearest_indices(h, oh);
    let xs = nearest_indices(w, ow);
    let mut labels = LabelMap::filled(oh, ow, IGNORE_INDEX);
    for (oy, &sy) in ys.iter().enumerate() {
        for (ox, &sx) in xs.iter().enumerate() {
            labels.set(oy, ox, sample.labels.get(sy, sx));
        }
    }
    LabeledImage::new(sample.id.clone(), image, labels)
}

/// Random rescale followed by a random crop of exactly `cfg.crop`. Regions
/// the rescaled image does not cover are zero pixels with ignored labels.
pub fn augment<R: Rng + ?Sized>(
    sample: &LabeledImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<LabeledImage> {
    cfg.validate()?;
    let (lo, hi) = cfg.scale_range;
    let factor = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let scaled = rescale(sample, factor);
    let (h, w) = scaled.size();
    let (ch, cw) = cfg.crop;
    let oy = if h > ch { rng.gen_range(0..=h - ch) } else { 0 };
    let ox = if w > cw { rng.gen_range(0..=w - cw) } else { 0 };
    let mut image = RgbImage::new(cw as u32, ch as u32);
    let mut labels = LabelMap::filled(ch, cw, IGNORE_INDEX);
    for y in 0..ch.min(h - oy) {
        for x in 0..cw.min(w - ox) {
            image.put_pixel(x as u32, y as u32, *scaled.image.get_pixel((ox + x) as u32, (oy + y) as u32));
            labels.set(y, x, scaled.labels.get(oy + y, ox + x));
        }
    }
    Ok(LabeledImage::new(sample.id.clone(), image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sample(h: usize, w: usize, seed: u64) -> LabeledImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = RgbImage::from_fn(w as u32, h as u32, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let labels = LabelMap {
            width: w,
            height: h,
            data: (0..h * w).map(|_| rng.gen_range(0..5)).collect(),
        };
        LabeledImage::new("seq00/000000", image, labels)
    }

    #[test]
    fn unit_scale_full_crop_is_identity() {
        let s = sample(20, 30, 1);
        let cfg = AugmentConfig { scale_range: (1.0, 1.0), crop: (20, 30) };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.image, s.image);
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn half_scale_of_896_is_448() {
        let s = LabeledImage::new("x", RgbImage::new(896, 896), LabelMap::filled(896, 896, 0));
        assert_eq!(rescale(&s, 0.5).size(), (448, 448));
        let cfg = AugmentConfig { scale_range: (0.5, 0.5), crop: (896, 896) };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.size(), (896, 896));
        assert_eq!(out.labels.get(447, 447), 0);
        assert_eq!(out.labels.get(448, 0), IGNORE_INDEX);
        assert_eq!(out.image.get_pixel(0, 500).0, [0, 0, 0]);
    }

    #[test]
    fn labels_never_gain_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = AugmentConfig { scale_range: (0.5, 2.0), crop: (24, 24) };
        for i in 0..100 {
            let s = sample(rng.gen_range(8..40), rng.gen_range(8..40), i);
            let before: BTreeSet<u8> = s.labels.data.iter().copied().collect();
            let out = augment(&s, &cfg, &mut rng).unwrap();
            assert_eq!(out.size(), (24, 24));
            for v in out.labels.data {
                assert!(v == IGNORE_INDEX || before.contains(&v));
            }
        }
    }

    #[test]
    fn same_stream_same_output() {
        let s = sample(40, 40, 3);
        let cfg = AugmentConfig { scale_range: (0.5, 2.0), crop: (32, 32) };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn bad_config_rejected() {
        let s = sample(4, 4, 0);
        let cfg = AugmentConfig { scale_range: (2.0, 1.0), crop: (4, 4) };
        assert!(augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = AugmentConfig { scale_range: (1.0, 1.0), crop: (0, 4) };
        assert!(augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
