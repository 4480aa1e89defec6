//! Procedural scenes with controllable object scale.
//!
//! Each image is a textured background with objects painted largest first,
//! so small objects stay visible on top of large ones. Labels are written by
//! the same painter, so every label pixel is exactly the painted class.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, LabeledImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect,
    Disc,
}

/// Texture alternating between a recipe's two colors, in object coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Flat,
    Stripes { period: u32 },
    Checker { period: u32 },
    Speckle { density: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecipe {
    pub class: u8,
    /// Object extent range in pixels (inclusive).
    pub size: (u32, u32),
    pub shape: Shape,
    pub texture: Texture,
    pub colors: ([u8; 3], [u8; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// Largest canvas `(height, width)`.
    pub canvas: (usize, usize),
    /// Each image side is drawn from `[min_canvas_scale, 1] * canvas`.
    pub min_canvas_scale: f64,
    pub n_images: usize,
    /// Full-canvas class painted first.
    pub background: ClassRecipe,
    pub recipes: Vec<ClassRecipe>,
    /// Objects per image (inclusive range).
    pub objects: (usize, usize),
    /// Probability that an object beyond the first of each recipe comes from
    /// a small recipe (minimum size below 16 px); `None` draws recipes uniformly.
    pub small_share: Option<f64>,
    /// Uniform per-channel pixel noise amplitude.
    pub noise: u8,
}

impl SynthSpec {
    /// Scenes whose classes come in look-alike pairs separated only by object
    /// scale, with UAVid class indices.
    pub fn scale_confusable(seed: u64, n_images: usize) -> Self {
        let r = |class, size, shape, texture, a, b| ClassRecipe {
            class,
            size,
            shape,
            texture,
            colors: (a, b),
        };
        let brick = ([150, 70, 60], [90, 40, 35]);
        let foliage = ([40, 120, 40], [20, 70, 25]);
        let asphalt = ([110, 110, 120], [95, 95, 105]);
        SynthSpec {
            seed,
            canvas: (256, 256),
            min_canvas_scale: 0.5,
            n_images,
            background: r(0, (1, 1), Shape::Rect, Texture::Speckle { density: 0.3 }, [170, 160, 120], [150, 140, 105]),
            recipes: vec![
                // large vs small with identical appearance
                r(1, (90, 200), Shape::Rect, Texture::Stripes { period: 6 }, brick.0, brick.1),
                r(6, (6, 14), Shape::Rect, Texture::Stripes { period: 6 }, brick.0, brick.1),
                r(3, (60, 120), Shape::Disc, Texture::Speckle { density: 0.5 }, foliage.0, foliage.1),
                r(7, (4, 10), Shape::Disc, Texture::Speckle { density: 0.5 }, foliage.0, foliage.1),
                r(2, (70, 150), Shape::Rect, Texture::Flat, asphalt.0, asphalt.1),
                r(5, (8, 16), Shape::Rect, Texture::Flat, asphalt.0, asphalt.1),
                r(4, (24, 60), Shape::Disc, Texture::Checker { period: 4 }, [120, 140, 50], [90, 110, 40]),
            ],
            objects: (8, 16),
            small_share: None,
            noise: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 {
            return Err(Error::config("canvas", "canvas must be non-empty"));
        }
        if !(self.min_canvas_scale > 0.0 && self.min_canvas_scale <= 1.0) {
            return Err(Error::config("min_canvas_scale", "must lie in (0, 1]"));
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::config("objects", "range is not ordered"));
        }
        for r in &self.recipes {
            if r.size.0 == 0 || r.size.0 > r.size.1 {
                return Err(Error::config(
                    "recipes",
                    format!("class {}: size range {:?} must be positive and ordered", r.class, r.size),
                ));
            }
            let smallest_side =
                ((h.min(w) as f64) * self.min_canvas_scale).floor() as u32;
            if r.size.0 > smallest_side {
                return Err(Error::config(
                    "canvas",
                    format!(
                        "canvas side {smallest_side} too small for class {} objects of at least {} px",
                        r.class, r.size.0
                    ),
                ));
            }
            if let Texture::Stripes { period: 0 } | Texture::Checker { period: 0 } = r.texture {
                return Err(Error::config("recipes", "texture period must be positive"));
            }
        }
        if let Some(p) = self.small_share {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("small_share", "must lie in [0, 1]"));
            }
        }
        if !self.recipes.is_empty() {
            let has_small = self.recipes.iter().any(is_small);
            let has_large = self.recipes.iter().any(|r| r.size.1 as usize > h / 2);
            if !(has_small && has_large) {
                return Err(Error::config(
                    "recipes",
                    format!("need one recipe below 16 px and one above {} px", h / 2),
                ));
            }
        }
        Ok(())
    }
}

fn is_small(r: &ClassRecipe) -> bool {
    r.size.0 < 16
}

fn pick_recipe<'a>(spec: &'a SynthSpec, rng: &mut ChaCha8Rng) -> &'a ClassRecipe {
    let uniform = |pool: Vec<&'a ClassRecipe>, rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())];
    let Some(p) = spec.small_share else {
        return uniform(spec.recipes.iter().collect(), rng);
    };
    let want_small = rng.gen_bool(p);
    let pool: Vec<_> = spec.recipes.iter().filter(|r| is_small(r) == want_small).collect();
    if pool.is_empty() {
        uniform(spec.recipes.iter().collect(), rng)
    } else {
        uniform(pool, rng)
    }
}

fn texel(t: Texture, dy: i64, dx: i64, rng: &mut ChaCha8Rng) -> bool {
    match t {
        Texture::Flat => false,
        Texture::Stripes { period } => (dy.rem_euclid(2 * period as i64)) >= period as i64,
        Texture::Checker { period } => {
            let p = period as i64;
            (dy.div_euclid(p) + dx.div_euclid(p)) % 2 != 0
        }
        Texture::Speckle { density } => rng.gen_bool(density),
    }
}

struct Canvas<'a> {
    image: &'a mut RgbImage,
    labels: &'a mut LabelMap,
    noise: u8,
}

impl Canvas<'_> {
    fn paint(&mut self, y: usize, x: usize, class: u8, color: [u8; 3], rng: &mut ChaCha8Rng) {
        let n = self.noise as i16;
        let c = color.map(|v| {
            let jitter = if n > 0 { rng.gen_range(-n..=n) } else { 0 };
            (v as i16 + jitter).clamp(0, 255) as u8
        });
        self.image.put_pixel(x as u32, y as u32, Rgb(c));
        self.labels.set(y, x, class);
    }
}

/// Generates `spec.n_images` scenes. Deterministic for a fixed spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let side = |n: usize, rng: &mut ChaCha8Rng| {
            let lo = ((n as f64) * spec.min_canvas_scale).ceil() as usize;
            rng.gen_range(lo.max(1)..=n)
        };
        let h = side(spec.canvas.0, &mut rng);
        let w = side(spec.canvas.1, &mut rng);
        let mut image = RgbImage::new(w as u32, h as u32);
        let mut labels = LabelMap::filled(h, w, spec.background.class);
        let mut canvas = Canvas {
            image: &mut image,
            labels: &mut labels,
            noise: spec.noise,
        };
        let bg = &spec.background;
        for y in 0..h {
            for x in 0..w {
                let alt = texel(bg.texture, y as i64, x as i64, &mut rng);
                let c = if alt { bg.colors.1 } else { bg.colors.0 };
                canvas.paint(y, x, bg.class, c, &mut rng);
            }
        }

        if !spec.recipes.is_empty() {
            let count = rng.gen_range(spec.objects.0..=spec.objects.1);
            let mut objects: Vec<(&ClassRecipe, u32, u32, usize, usize)> = (0..count)
                .map(|k| {
                    let r = if k < spec.recipes.len() {
                        &spec.recipes[k]
                    } else {
                        pick_recipe(spec, &mut rng)
                    };
                    let oh = rng.gen_range(r.size.0..=r.size.1);
                    let ow = match r.shape {
                        Shape::Disc => oh,
                        Shape::Rect => rng.gen_range(r.size.0..=r.size.1),
                    };
                    // centre stays on the canvas
                    let cy = rng.gen_range(0..h);
                    let cx = rng.gen_range(0..w);
                    (r, oh, ow, cy, cx)
                })
                .collect();
            objects.sort_by_key(|o| std::cmp::Reverse(o.1 as u64 * o.2 as u64));
            for (r, oh, ow, cy, cx) in objects {
                let top = cy as i64 - oh as i64 / 2;
                let left = cx as i64 - ow as i64 / 2;
                for dy in 0..oh as i64 {
                    for dx in 0..ow as i64 {
                        let (y, x) = (top + dy, left + dx);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        if r.shape == Shape::Disc {
                            let rad = oh as f64 / 2.0;
                            let (fy, fx) = (dy as f64 + 0.5 - rad, dx as f64 + 0.5 - rad);
                            if fy * fy + fx * fx > rad * rad {
                                continue;
                            }
                        }
                        let alt = texel(r.texture, dy, dx, &mut rng);
                        let c = if alt { r.colors.1 } else { r.colors.0 };
                        canvas.paint(y as usize, x as usize, r.class, c, &mut rng);
                    }
                }
            }
        }
        out.push(LabeledImage::new(
            format!("seq{:02}/{:06}", i / 10, i % 10),
            image,
            labels,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        let mut s = SynthSpec::scale_confusable(seed, 4);
        s.canvas = (256, 256);
        s
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small_spec(7)).unwrap();
        let b = generate_synthetic(&small_spec(7)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.as_raw(), y.image.as_raw());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let hist = |seed| {
            let mut total = vec![0usize; 8];
            for s in generate_synthetic(&small_spec(seed)).unwrap() {
                for (t, c) in total.iter_mut().zip(s.labels.histogram(8).0) {
                    *t += c;
                }
            }
            total
        };
        assert_ne!(hist(7), hist(8));
    }

    #[test]
    fn background_only_is_constant() {
        let mut s = small_spec(1);
        s.recipes.clear();
        let out = generate_synthetic(&s).unwrap();
        for img in out {
            assert!(img.labels.data.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn every_recipe_class_appears() {
        let out = generate_synthetic(&small_spec(3)).unwrap();
        let mut seen = [false; 8];
        for s in &out {
            for &v in &s.labels.data {
                seen[v as usize] = true;
            }
        }
        assert!(seen.iter().all(|s| *s), "{seen:?}");
    }

    #[test]
    fn labels_match_painted_colors() {
        let mut s = small_spec(5);
        s.noise = 0;
        for r in &mut s.recipes {
            r.texture = Texture::Flat;
            r.colors.0 = [r.class * 20, 1, 2];
        }
        s.background.texture = Texture::Flat;
        s.background.colors.0 = [250, 250, 250];
        for img in generate_synthetic(&s).unwrap() {
            for (px, &v) in img.image.pixels().zip(&img.labels.data) {
                let expect = if v == 0 { [250, 250, 250] } else { [v * 20, 1, 2] };
                assert_eq!(px.0, expect);
            }
        }
    }

    #[test]
    fn canvas_too_small_is_config_error() {
        let mut s = small_spec(1);
        s.canvas = (100, 100);
        assert!(matches!(generate_synthetic(&s), Err(Error::Config { key, .. }) if key == "canvas"));
    }

    #[test]
    fn needs_small_and_large_objects() {
        let mut s = small_spec(1);
        s.recipes.retain(|r| r.size.0 >= 16);
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn small_share_biases_extra_objects() {
        let count = |share| {
            let mut s = small_spec(2);
            s.objects = (40, 40);
            s.small_share = share;
            let mut small = 0usize;
            for img in generate_synthetic(&s).unwrap() {
                let h = img.labels.histogram(8).0;
                small += h[5] + h[6] + h[7];
            }
            small
        };
        assert!(count(Some(0.9)) > 2 * count(Some(0.1)));
        let mut s = small_spec(2);
        s.small_share = Some(1.5);
        assert!(generate_synthetic(&s).is_err());
    }
}
