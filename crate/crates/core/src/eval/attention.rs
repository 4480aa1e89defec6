use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{GrayImage, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::fusion::{Pathway, StrategyId};
use crate::model::{image_tensor, Mode, Model};
use crate::pyramid::{resize_to_grid, spatial};

#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub pathway: Pathway,
    pub scale: f64,
    pub channel: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AttentionMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.values.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.values.len() as f64;
        var.sqrt()
    }

    pub fn file_name(&self) -> String {
        format!("{}-s{}-c{:02}.png", pathway_name(self.pathway), self.scale, self.channel)
    }

    /// 8-bit grayscale rendering (`round(255 v)`), brighter = larger gate.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

pub fn pathway_name(p: Pathway) -> &'static str {
    match p {
        Pathway::FineToCoarse => "fine-to-coarse",
        Pathway::CoarseToFine => "coarse-to-fine",
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionDump {
    pub maps: Vec<AttentionMap>,
}

impl AttentionDump {
    /// Mean activation per (pathway, scale) across channels and pixels.
    pub fn scale_means(&self) -> Vec<(Pathway, f64, f64)> {
        let mut out: Vec<(Pathway, f64, f64, usize)> = Vec::new();
        for m in &self.maps {
            let pos = out.iter().position(|e| e.0 == m.pathway && e.1 == m.scale);
            let i = pos.unwrap_or_else(|| {
                out.push((m.pathway, m.scale, 0.0, 0));
                out.len() - 1
            });
            out[i].2 += m.mean();
            out[i].3 += 1;
        }
        out.into_iter().map(|(p, s, sum, n)| (p, s, sum / n as f64)).collect()
    }

    pub fn stats_csv(&self) -> String {
        let mut s = String::from("pathway,scale,channel,mean,std,file\n");
        for m in &self.maps {
            let _ = writeln!(
                s,
                "{},{},{},{:.8},{:.8},{}",
                pathway_name(m.pathway),
                m.scale,
                m.channel,
                m.mean(),
                m.std(),
                m.file_name()
            );
        }
        s
    }

    pub fn scales_csv(&self) -> String {
        let mut s = String::from("pathway,scale,mean\n");
        for (p, scale, mean) in self.scale_means() {
            let _ = writeln!(s, "{},{scale},{mean:.8}", pathway_name(p));
        }
        s
    }

    /// Long-format raw values, lossless w.r.t. the PNGs.
    pub fn values_csv(&self) -> String {
        let mut s = String::from("pathway,scale,channel,y,x,value\n");
        for m in &self.maps {
            let p = pathway_name(m.pathway);
            for (i, v) in m.values.iter().enumerate() {
                let _ = writeln!(s, "{p},{},{},{},{},{v:e}", m.scale, m.channel, i / m.width, i % m.width);
            }
        }
        s
    }
}

/// Gate tensors of each branch, tagged with the pathway they drive.
fn gate_pathways(strategy: StrategyId) -> Result<&'static [Pathway]> {
    match strategy {
        StrategyId::Bimsa => Ok(&[Pathway::FineToCoarse, Pathway::CoarseToFine]),
        StrategyId::HmsaScore | StrategyId::FhmsaFeature => Ok(&[Pathway::CoarseToFine]),
        s => Err(Error::Contract(format!("strategy {s} has no attention heads"))),
    }
}

/// Computes every attention map over the inference pyramid, resampled to
/// the 1x feature grid. With `out_dir`, writes one PNG per map plus
/// `attention_stats.csv`, `attention_scales.csv` and `attention_values.csv`.
pub fn export_attention(model: &Model, img: &RgbImage, out_dir: Option<&Path>) -> Result<AttentionDump> {
    let pathways = gate_pathways(model.strategy())?;
    let x = image_tensor(img, model.dtype(), model.device())?;
    let grid = model.grid_for(spatial(&x));
    let branches = model.branches(&x, &model.infer_scales(), Mode::Eval, false)?;
    let mut dump = AttentionDump::default();
    for (k, &pathway) in pathways.iter().enumerate() {
        for b in &branches {
            let gate = if k == 0 { &b.alpha } else { &b.beta };
            let gate = gate
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("branch {} has no gate", b.scale)))?;
            let g = resize_to_grid(gate, grid)?.squeeze(0)?.to_dtype(DType::F32)?;
            for channel in 0..g.dim(0)? {
                let values = g.get(channel)?.flatten_all()?.to_vec1::<f32>()?;
                dump.maps.push(AttentionMap {
                    pathway,
                    scale: b.scale,
                    channel,
                    height: grid.0,
                    width: grid.1,
                    values,
                });
            }
        }
    }
    if let Some(dir) = out_dir {
        write_dump(&dump, dir)?;
    }
    Ok(dump)
}

pub fn write_dump(dump: &AttentionDump, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in &dump.maps {
        let path = dir.join(m.file_name());
        m.to_gray().save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
    }
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    write("attention_stats.csv", dump.stats_csv())?;
    write("attention_scales.csv", dump.scales_csv())?;
    write("attention_values.csv", dump.values_csv())?;
    Ok(())
}
