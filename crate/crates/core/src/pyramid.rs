//! Scale pyramids and the single resampling convention used everywhere.
//!
//! All resizes are bilinear with half-pixel centers (`align_corners = false`):
//! output index `i` samples source coordinate `(i + 0.5) * src / dst - 0.5`,
//! clamped to the valid range. The same taps drive image resizing in the
//! data pipeline, feature and attention resizing inside the fusion graph, and
//! final score upsampling, so every path agrees to the last bit.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// One output sample of a 1-D bilinear resize: `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Bilinear taps for resizing an axis of length `src` to length `dst`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    assert!(src > 0 && dst > 0, "resize axes must be non-empty");
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: x - lo as f64,
            }
        })
        .collect()
}

/// Nearest-neighbour source index for each output index (used for label maps).
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * ratio).floor() as usize).min(src - 1))
        .collect()
}

/// `round(n * s)` with halves rounded up, never below one pixel.
pub fn scaled_len(n: usize, scale: f64) -> usize {
    ((n as f64 * scale + 0.5).floor() as usize).max(1)
}

/// Spatial size of the trunk output for an input of `len` pixels: one
/// ceil-halving per stride-2 stage.
pub fn grid_len(len: usize, output_stride: usize) -> usize {
    let mut n = len;
    let mut s = 1;
    while s < output_stride {
        n = n.div_ceil(2);
        s *= 2;
    }
    n
}

/// Dense `dst x src` interpolation matrix built from [`bilinear_taps`].
fn interp_matrix(src: usize, dst: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    for (i, t) in bilinear_taps(src, dst).iter().enumerate() {
        m[i * src + t.lo] += 1.0 - t.frac;
        m[i * src + t.hi] += t.frac;
    }
    Ok(Tensor::from_vec(m, (dst, src), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of the two trailing (spatial) dimensions of `t`.
///
/// Works for any rank >= 2; leading dimensions (batch, channels) are kept.
/// Implemented as two dense matrix products so it is differentiable.
pub fn resize_to_grid(t: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(Error::Contract(format!(
            "resize_to_grid needs a spatial tensor, got shape {dims:?}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Contract(format!("empty target grid {h}x{w}")));
    }
    let (sh, sw) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let mut out = t.clone();
    if sh != h {
        let rh = interp_matrix(sh, h, t.dtype(), t.device())?;
        out = rh.broadcast_matmul(&out.contiguous()?)?;
    }
    if sw != w {
        let rw = interp_matrix(sw, w, t.dtype(), t.device())?.t()?;
        out = out.contiguous()?.broadcast_matmul(&rw.contiguous()?)?;
    }
    Ok(out)
}

/// Spatial size `(h, w)` of a tensor whose last two dims are spatial.
pub fn spatial(t: &Tensor) -> (usize, usize) {
    let d = t.dims();
    (d[d.len() - 2], d[d.len() - 1])
}

/// A pyramid level: the scale factor and the resampled `N x C x H x W` image.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: f64,
    pub image: Tensor,
}

#[derive(Clone, Debug)]
pub struct ScalePyramid {
    pub base_size: (usize, usize),
    /// Levels in strictly increasing scale order.
    pub levels: Vec<PyramidLevel>,
}

impl ScalePyramid {
    pub fn level(&self, scale: f64) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.scale == scale)
    }

    pub fn scales(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.scale).collect()
    }
}

/// Checks a scale list: non-empty, positive, containing 1.0. Returns it sorted.
pub fn validate_scales(scales: &[f64]) -> Result<Vec<f64>> {
    if scales.is_empty() {
        return Err(Error::config("scales", "scale list is empty"));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::config("scales", format!("scale {s} is not positive")));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("scales", "duplicate scale factor"));
    }
    if !sorted.contains(&1.0) {
        return Err(Error::config("scales", "scale list must contain 1.0"));
    }
    Ok(sorted)
}

/// Builds the image pyramid for an `N x C x H x W` (or `C x H x W`) tensor.
/// The 1.0 level is the input itself.
pub fn build_pyramid(image: &Tensor, scales: &[f64]) -> Result<ScalePyramid> {
    let scales = validate_scales(scales)?;
    let (h, w) = spatial(image);
    let levels = scales
        .into_iter()
        .map(|s| {
            let img = if s == 1.0 {
                image.clone()
            } else {
                resize_to_grid(image, (scaled_len(h, s), scaled_len(w, s)))?
            };
            Ok(PyramidLevel { scale: s, image: img })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalePyramid {
        base_size: (h, w),
        levels,
    })
}

/// Stacks equally sized levels along a new leading batch axis.
pub fn scale_to_batch(levels: &[Tensor]) -> Result<Tensor> {
    let first = levels
        .first()
        .ok_or_else(|| Error::Contract("scale_to_batch on zero levels".into()))?;
    if let Some(bad) = levels.iter().find(|l| l.dims() != first.dims()) {
        return Err(Error::Contract(format!(
            "scale_to_batch needs equally sized levels ({:?} vs {:?}); iterate per level instead",
            first.dims(),
            bad.dims()
        )));
    }
    Ok(Tensor::stack(levels, 0)?)
}

/// Inverse of [`scale_to_batch`].
pub fn batch_to_scale(batched: &Tensor) -> Result<Vec<Tensor>> {
    let n = batched.dim(0)?;
    (0..n).map(|i| Ok(batched.get(i)?)).collect()
}

/// Bilinear resize of a planar `f32` buffer (`channels x h x w`) using the shared taps.
pub fn resize_planar(
    src: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0f32; channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = (1.0 - b.frac) * p(a.lo, b.lo) + b.frac * p(a.lo, b.hi);
                let bot = (1.0 - b.frac) * p(a.hi, b.lo) + b.frac * p(a.hi, b.hi);
                out[c * oh * ow + oy * ow + ox] = ((1.0 - a.frac) * top + a.frac * bot) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn pyramid_sizes_follow_rounding() {
        let img = Tensor::zeros((1, 3, 896, 896), DType::F32, &Device::Cpu).unwrap();
        let p = build_pyramid(&img, &[2.0, 0.5, 1.0]).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| spatial(&l.image)).collect();
        assert_eq!(sizes, vec![(448, 448), (896, 896), (1792, 1792)]);
        assert_eq!(p.scales(), vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn scale_two_doubles_and_odd_sizes_round_up() {
        let img = Tensor::zeros((3, 7, 5), DType::F32, &Device::Cpu).unwrap();
        let p = build_pyramid(&img, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(spatial(&p.levels[2].image), (14, 10));
        // 3.5 -> 4, 2.5 -> 3
        assert_eq!(spatial(&p.levels[0].image), (4, 3));
    }

    #[test]
    fn unit_pyramid_is_bit_identical() {
        let img = rand_tensor((1, 3, 9, 11), 1);
        let p = build_pyramid(&img, &[1.0]).unwrap();
        assert_eq!(p.levels.len(), 1);
        let a: Vec<f32> = img.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = p.levels[0].image.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_scales_rejected() {
        let img = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(build_pyramid(&img, &[0.0, 1.0]), Err(Error::Config { .. })));
        assert!(matches!(build_pyramid(&img, &[-1.0, 1.0]), Err(Error::Config { .. })));
        assert!(build_pyramid(&img, &[0.5]).is_err());
        assert!(build_pyramid(&img, &[]).is_err());
    }

    #[test]
    fn resize_identity_and_constants() {
        let t = rand_tensor((2, 3, 5, 6), 2);
        let same = resize_to_grid(&t, (5, 6)).unwrap();
        let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = same.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);

        let c = (Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap() * 2.5).unwrap();
        for grid in [(1, 1), (3, 7), (8, 8), (13, 2)] {
            let r = resize_to_grid(&c, grid).unwrap();
            assert_eq!(r.dims(), &[1, 2, grid.0, grid.1]);
            let v: Vec<f32> = r.flatten_all().unwrap().to_vec1().unwrap();
            // interpolation weights sum to one up to f32 rounding
            assert!(v.iter().all(|x| (x - 2.5).abs() <= 1e-6), "{grid:?}: {v:?}");
        }
        let up = resize_to_grid(&c, (8, 8)).unwrap();
        let down = resize_to_grid(&up, (4, 4)).unwrap();
        let v: Vec<f32> = down.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (x - 2.5).abs() <= 1e-6));
    }

    #[test]
    fn tensor_and_planar_resize_agree() {
        let t = rand_tensor((1, 2, 5, 7), 3);
        let r = resize_to_grid(&t, (9, 4)).unwrap();
        let src: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let planar = resize_planar(&src, 2, (5, 7), (9, 4));
        let v: Vec<f32> = r.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in v.iter().zip(&planar) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_round_trip() {
        let levels: Vec<Tensor> = (0..3).map(|i| rand_tensor((1, 3, 64, 64), i)).collect();
        let b = scale_to_batch(&levels).unwrap();
        assert_eq!(b.dims(), &[3, 1, 3, 64, 64]);
        let back = batch_to_scale(&b).unwrap();
        for (x, y) in levels.iter().zip(&back) {
            let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
            let c: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, c);
        }
        let one = scale_to_batch(&levels[..1]).unwrap();
        assert_eq!(one.dim(0).unwrap(), 1);
        let mixed = [rand_tensor((1, 3, 64, 64), 0), rand_tensor((1, 3, 128, 128), 1)];
        assert!(matches!(scale_to_batch(&mixed), Err(Error::Contract(_))));
    }

    #[test]
    fn grid_len_halves_with_ceil() {
        assert_eq!(grid_len(64, 4), 16);
        assert_eq!(grid_len(65, 4), 17);
        assert_eq!(grid_len(10, 1), 10);
        assert_eq!(grid_len(1, 8), 1);
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_bounds(
            h in 1usize..8, w in 1usize..8, oh in 1usize..12, ow in 1usize..12, seed in 0u64..1000
        ) {
            let t = rand_tensor((1, 1, h, w), seed);
            let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let r: Vec<f32> = resize_to_grid(&t, (oh, ow)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for x in r {
                prop_assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
            }
        }
    }
}
