use std::fmt::Write as _;

use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};

/// `n_class x n_class` counts, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_class: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_class: usize) -> Self {
        Self {
            n_class,
            counts: vec![0; n_class * n_class],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_class + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair; ignored truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::Contract(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        let n = self.n_class;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= n {
                return Err(Error::LabelOutOfRange { index: t, n_class: n });
            }
            if p as usize >= n {
                return Err(Error::LabelOutOfRange { index: p, n_class: n });
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Functional form of [`ConfusionMatrix::accumulate`].
pub fn accumulate_confusion(pred: &LabelMap, truth: &LabelMap, mut cm: ConfusionMatrix) -> Result<ConfusionMatrix> {
    cm.accumulate(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `None` for classes absent from both truth and prediction.
    pub iou: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU; 0 when none is defined.
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

/// Per-class `tp / (tp + fp + fn)` and their mean. Classes that never occur
/// in truth or prediction are left out of the mean.
pub fn iou_report(cm: &ConfusionMatrix, class_names: &[String]) -> EvalReport {
    let n = cm.n_class;
    let iou: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let mut names: Vec<String> = class_names.iter().take(n).cloned().collect();
    names.extend((names.len()..n).map(|i| format!("class{i}")));
    EvalReport {
        class_names: names,
        iou,
        miou,
        confusion: cm.clone(),
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Plain-text table: `Methods | mIoU(%) | per-class IoU(%)`.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Methods".to_string(), "mIoU(%)".to_string()];
    header.extend(first.class_names.iter().cloned());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut cells = vec![name.clone(), pct(Some(r.miou))];
            cells.extend(r.iou.iter().map(|v| pct(*v)));
            cells
        })
        .collect();
    layout(&header, &body)
}

pub(crate) fn layout(header: &[String], body: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        format!("| {} |", parts.join(" | "))
    };
    let rule = format!("|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
    let mut s = String::new();
    let _ = writeln!(s, "{}", line(header));
    let _ = writeln!(s, "{rule}");
    for r in body {
        let _ = writeln!(s, "{}", line(r));
    }
    s
}

pub fn report_csv(rows: &[(String, &EvalReport)]) -> String {
    let mut s = String::new();
    if let Some((_, first)) = rows.first() {
        let _ = writeln!(s, "method,miou,{}", first.class_names.join(","));
    }
    for (name, r) in rows {
        let cells: Vec<String> = r.iou.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))).collect();
        let _ = writeln!(s, "{name},{:.6},{}", r.miou, cells.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_prediction() {
        let l = LabelMap { width: 3, height: 1, data: vec![0, 2, 2] };
        let cm = accumulate_confusion(&l, &l, ConfusionMatrix::new(4)).unwrap();
        let r = iou_report(&cm, &names(4));
        assert_eq!(r.iou, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn tp5_fp3_fn2_is_half() {
        // class 0: 5 hits, 3 false positives (truth 1), 2 misses (pred 1)
        let truth = LabelMap { width: 10, height: 1, data: vec![0, 0, 0, 0, 0, 1, 1, 1, 0, 0] };
        let pred = LabelMap { width: 10, height: 1, data: vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1] };
        let cm = accumulate_confusion(&pred, &truth, ConfusionMatrix::new(2)).unwrap();
        assert_eq!(iou_report(&cm, &names(2)).iou[0], Some(0.5));
    }

    #[test]
    fn ignore_is_excluded_and_bounds_checked() {
        let truth = LabelMap { width: 3, height: 1, data: vec![IGNORE_INDEX, 1, 0] };
        let pred = LabelMap { width: 3, height: 1, data: vec![1, 1, 1] };
        let cm = accumulate_confusion(&pred, &truth, ConfusionMatrix::new(2)).unwrap();
        assert_eq!(cm.total(), 2);
        let r = iou_report(&cm, &names(2));
        assert!((0.0..=1.0).contains(&r.miou));
        let bad = LabelMap { width: 3, height: 1, data: vec![0, 5, 0] };
        assert!(ConfusionMatrix::new(2).accumulate(&pred, &bad).is_err());
    }

    #[test]
    fn table_has_one_line_per_row() {
        let l = LabelMap { width: 2, height: 1, data: vec![0, 1] };
        let cm = accumulate_confusion(&l, &l, ConfusionMatrix::new(2)).unwrap();
        let r = iou_report(&cm, &names(2));
        let t = render_table(&[("single".into(), &r), ("bimsa".into(), &r)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("mIoU(%)") && t.contains("100.00"));
    }
}
