use candle_core::{DType, Tensor};
use image::RgbImage;

use super::tiling::{plan_tiles, TilingPlan};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{image_tensor, label_from_scores, Mode, Model};

/// Anything that maps a `1 x 3 x h x w` tile to `1 x C x h x w` scores.
pub trait ScorePredictor {
    fn n_class(&self) -> usize;
    fn predict_tile(&self, tile: &Tensor) -> Result<Tensor>;
}

impl ScorePredictor for Model {
    fn n_class(&self) -> usize {
        self.config().n_class
    }

    /// Fused scores over the inference pyramid.
    fn predict_tile(&self, tile: &Tensor) -> Result<Tensor> {
        self.forward(tile, &self.infer_scales(), Mode::Eval)
    }
}

/// Whole-image prediction: `scores` is `C x H x W` (channel-major).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub n_class: usize,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
    pub labels: LabelMap,
}

/// Runs every tile of `plan` and averages logits where tiles overlap.
///
/// Tiles are accumulated in plan (row-major) order into an f64 sum buffer,
/// so results are bit-reproducible.
pub fn predict_image(predictor: &dyn ScorePredictor, image: &Tensor, plan: &TilingPlan) -> Result<Prediction> {
    let (_, _, h, w) = image.dims4()?;
    if (h, w) != (plan.height, plan.width) {
        return Err(Error::Contract(format!(
            "plan for {}x{} applied to {h}x{w} image",
            plan.height, plan.width
        )));
    }
    let c = predictor.n_class();
    let plane = h * w;
    let mut sum = vec![0f64; c * plane];
    let mut count = vec![0u32; plane];
    for t in &plan.tiles {
        let crop = image.narrow(2, t.y, t.h)?.narrow(3, t.x, t.w)?;
        let scores = predictor.predict_tile(&crop)?;
        let dims = scores.dims();
        if dims != [1, c, t.h, t.w] {
            return Err(Error::Contract(format!("tile scores {dims:?}, expected [1, {c}, {}, {}]", t.h, t.w)));
        }
        let v = scores.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for y in 0..t.h {
            let row = (t.y + y) * w + t.x;
            for x in 0..t.w {
                count[row + x] += 1;
            }
            for ch in 0..c {
                let src = &v[(ch * t.h + y) * t.w..(ch * t.h + y + 1) * t.w];
                let dst = &mut sum[ch * plane + row..ch * plane + row + t.w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    if count.contains(&0) {
        return Err(Error::Contract("tiling plan leaves pixels uncovered".into()));
    }
    let scores: Vec<f32> = sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / count[i % plane] as f64) as f32)
        .collect();
    let labels = label_from_scores(&scores, c, (h, w));
    Ok(Prediction {
        n_class: c,
        height: h,
        width: w,
        scores,
        labels,
    })
}

/// Tiled prediction of an RGB image with `model`.
pub fn predict_rgb(model: &Model, img: &RgbImage, tile: usize, overlap: usize) -> Result<Prediction> {
    let x = image_tensor(img, model.dtype(), model.device())?;
    let plan = plan_tiles(img.height() as usize, img.width() as usize, tile, overlap)?;
    predict_image(model, &x, &plan)
}
