//! Tiled whole-image inference, confusion-matrix metrics, strategy
//! comparison and attention-map export.

mod attention;
mod compare;
mod metrics;
mod predict;
mod scores;
mod tiling;

pub use attention::{export_attention, pathway_name, write_dump, AttentionDump, AttentionMap};
pub use compare::{compare_strategies, Comparison, ComparisonRow};
pub use metrics::{accumulate_confusion, iou_report, render_table, report_csv, ConfusionMatrix, EvalReport};
pub use predict::{predict_image, predict_rgb, Prediction, ScorePredictor};
pub use scores::{read_scores, write_scores, SCORE_MAGIC};
pub use tiling::{plan_tiles, Rect, TilingPlan};

use crate::data::{LabeledImage, Palette};
use crate::error::Result;
use crate::model::Model;

/// UAVid class names for 8 classes, `class{i}` otherwise.
pub fn default_class_names(n_class: usize) -> Vec<String> {
    let p = Palette::uavid();
    if p.n_class() == n_class {
        p.names()
    } else {
        (0..n_class).map(|i| format!("class{i}")).collect()
    }
}

/// Tiled prediction over `samples`, accumulated into one confusion matrix.
pub fn evaluate(model: &Model, samples: &[&LabeledImage], tile: usize, overlap: usize) -> Result<EvalReport> {
    let n = model.config().n_class;
    let mut cm = ConfusionMatrix::new(n);
    for s in samples {
        let p = predict_rgb(model, &s.image, tile, overlap)?;
        cm.accumulate(&p.labels, &s.labels)?;
    }
    Ok(iou_report(&cm, &default_class_names(n)))
}
