use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{layout, EvalReport};
use super::evaluate;
use crate::data::LabeledImage;
use crate::error::Result;
use crate::fusion::StrategyId;
use crate::model::{Model, ModelConfig};
use crate::trainer::{split_indices, train, TrainConfig, TrainReport};

#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub strategy: StrategyId,
    pub report: EvalReport,
    /// mIoU difference to the previous row; `None` for the first row.
    pub gain: Option<f64>,
    pub training: TrainReport,
}

#[derive(Clone, Debug, Default)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn csv(&self) -> String {
        let mut s = String::new();
        if let Some(first) = self.rows.first() {
            let _ = writeln!(s, "strategy,miou,gain,{}", first.report.class_names.join(","));
        }
        for r in &self.rows {
            let gain = r.gain.map_or(String::new(), |g| format!("{g:.6}"));
            let iou: Vec<String> = r.report.iou.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))).collect();
            let _ = writeln!(s, "{},{:.6},{gain},{}", r.strategy, r.report.miou, iou.join(","));
        }
        s
    }

    /// `Methods | mIoU(%) | mIoU Gains(%) | per-class IoU(%)`.
    pub fn table(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let mut header = vec!["Methods".to_string(), "mIoU(%)".into(), "mIoU Gains(%)".into()];
        header.extend(first.report.class_names.iter().cloned());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![
                    r.strategy.to_string(),
                    format!("{:.2}", 100.0 * r.report.miou),
                    r.gain.map_or("-".into(), |g| format!("{:+.2}", 100.0 * g)),
                ];
                cells.extend(r.report.iou.iter().map(|v| v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x))));
                cells
            })
            .collect();
        layout(&header, &body)
    }
}

/// Trains and evaluates each strategy from the same seed, data and trunk
/// config. Evaluation uses `test` when given, otherwise the held-out
/// validation split of `data` (the same images the trainer validates on).
/// With `run_root`, each strategy's run goes to `run_root/<strategy>`.
pub fn compare_strategies(
    data: &[LabeledImage],
    test: Option<&[LabeledImage]>,
    strategies: &[StrategyId],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run_root: Option<&Path>,
) -> Result<Comparison> {
    let eval_set: Vec<&LabeledImage> = match test {
        Some(t) => t.iter().collect(),
        None => {
            let (_, val) = split_indices(data.len(), train_cfg.val_fraction, train_cfg.seed);
            val.iter().map(|&i| &data[i]).collect()
        }
    };
    let mut out = Comparison::default();
    for (k, &strategy) in strategies.iter().enumerate() {
        let model = Model::new(model_cfg, strategy, train_cfg.seed)?;
        let dir = run_root.map(|r| {
            if strategies[..k].contains(&strategy) {
                r.join(format!("{strategy}-{k}"))
            } else {
                r.join(strategy.name())
            }
        });
        let training = train(&model, data, train_cfg, dir.as_deref())?;
        let report = evaluate(&model, &eval_set, train_cfg.tile, train_cfg.overlap)?;
        let gain = out.rows.last().map(|p: &ComparisonRow| report.miou - p.report.miou);
        log::info!("{strategy}: mIoU {:.4}", report.miou);
        out.rows.push(ComparisonRow {
            strategy,
            report,
            gain,
            training,
        });
    }
    Ok(out)
}
