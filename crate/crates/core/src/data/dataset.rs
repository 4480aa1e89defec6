//! UAVid directory layout: `<root>/<split>/seq*/{Images,Labels}/*.png`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{decode_labels, encode_labels, LabeledImage, Palette};
use crate::error::{Error, Result};

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

/// Loads every `seq*` directory below `split_dir`, pairing images and labels
/// by file name.
pub fn load_dataset(split_dir: &Path, palette: &Palette) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    let mut orphans = Vec::new();
    for seq in read_dir_sorted(split_dir)? {
        let seq_name = match seq.file_name() {
            Some(n) if seq.is_dir() && n.to_string_lossy().starts_with("seq") => {
                n.to_string_lossy().into_owned()
            }
            _ => continue,
        };
        let (img_dir, lbl_dir) = (seq.join("Images"), seq.join("Labels"));
        let images = png_names(&img_dir)?;
        let labels = if lbl_dir.is_dir() {
            png_names(&lbl_dir)?
        } else {
            BTreeSet::new()
        };
        for n in images.symmetric_difference(&labels) {
            let side = if images.contains(n) { "Images" } else { "Labels" };
            orphans.push(format!("{seq_name}/{side}/{n}"));
        }
        for name in images.intersection(&labels) {
            let image = open_rgb(&img_dir.join(name))?;
            let lpath = lbl_dir.join(name);
            let labels = decode_labels(&open_rgb(&lpath)?, palette, &lpath)?;
            if (labels.width, labels.height) != (image.width() as usize, image.height() as usize) {
                return Err(Error::Contract(format!(
                    "{}: label size differs from image size",
                    lpath.display()
                )));
            }
            let stem = name.trim_end_matches(".png").trim_end_matches(".PNG");
            out.push(LabeledImage::new(format!("{seq_name}/{stem}"), image, labels));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Orphans(orphans));
    }
    Ok(out)
}

pub fn load_split(root: &Path, split: &str, palette: &Palette) -> Result<Vec<LabeledImage>> {
    load_dataset(&root.join(split), palette)
}

/// Writes samples in the same layout [`load_dataset`] reads. Ids of the form
/// `seqNN/frame` choose the directory; bare ids go to `seq00`.
pub fn write_dataset(split_dir: &Path, samples: &[LabeledImage], palette: &Palette) -> Result<()> {
    for s in samples {
        let (seq, frame) = s.id.split_once('/').unwrap_or(("seq00", s.id.as_str()));
        let base = split_dir.join(seq);
        for sub in ["Images", "Labels"] {
            let d = base.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let file = format!("{frame}.png");
        let ipath = base.join("Images").join(&file);
        s.image.save(&ipath).map_err(|source| Error::Image { path: ipath.clone(), source })?;
        let lpath = base.join("Labels").join(&file);
        encode_labels(&s.labels, palette)?
            .save(&lpath)
            .map_err(|source| Error::Image { path: lpath.clone(), source })?;
    }
    Ok(())
}
