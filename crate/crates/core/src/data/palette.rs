use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};

const UAVID: &str = include_str!("../../assets/uavid.palette");

/// Ordered class names and colors; index in the list is the class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    entries: Vec<(String, [u8; 3])>,
    ignore_color: [u8; 3],
    ignore_index: u8,
}

impl Palette {
    pub fn new(entries: Vec<(String, [u8; 3])>, ignore_color: [u8; 3]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("palette", "no classes"));
        }
        if entries.len() >= IGNORE_INDEX as usize {
            return Err(Error::config("palette", "too many classes"));
        }
        let mut seen = HashMap::new();
        for (name, rgb) in entries.iter().chain(std::iter::once(&("@ignore".into(), ignore_color))) {
            if let Some(prev) = seen.insert(*rgb, name.clone()) {
                return Err(Error::config(
                    "palette",
                    format!("color {rgb:?} used by both `{prev}` and `{name}`"),
                ));
            }
        }
        Ok(Self {
            entries,
            ignore_color,
            ignore_index: IGNORE_INDEX,
        })
    }

    /// The 8-class UAVid palette shipped in `assets/uavid.palette`.
    pub fn uavid() -> Self {
        Self::parse(UAVID).expect("bundled palette is valid")
    }

    /// Parses `name R G B` lines; `#` starts a comment, `@ignore R G B` sets
    /// the ignore color (white when absent). Names may contain spaces.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut ignore = [255, 255, 255];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::config("palette", format!("line {}: expected `name R G B`", lineno + 1));
            if tokens.len() < 4 {
                return Err(bad());
            }
            let (name, rgb) = tokens.split_at(tokens.len() - 3);
            let mut c = [0u8; 3];
            for (slot, t) in c.iter_mut().zip(rgb) {
                *slot = t.parse().map_err(|_| bad())?;
            }
            let name = name.join(" ");
            if name == "@ignore" {
                ignore = c;
            } else {
                entries.push((name, c));
            }
        }
        Self::new(entries, ignore)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, [r, g, b]) in &self.entries {
            s.push_str(&format!("{name} {r} {g} {b}\n"));
        }
        let [r, g, b] = self.ignore_color;
        s.push_str(&format!("@ignore {r} {g} {b}\n"));
        s
    }

    pub fn n_class(&self) -> usize {
        self.entries.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn color(&self, class: usize) -> Option<[u8; 3]> {
        self.entries.get(class).map(|e| e.1)
    }

    pub fn ignore_color(&self) -> [u8; 3] {
        self.ignore_color
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    fn lookup(&self) -> HashMap<[u8; 3], u8> {
        let mut m: HashMap<[u8; 3], u8> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (_, c))| (*c, i as u8))
            .collect();
        m.insert(self.ignore_color, self.ignore_index);
        m
    }
}

/// Maps class indices to palette colors; the ignore index becomes the ignore color.
pub fn encode_labels(labels: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    let mut img = RgbImage::new(labels.width as u32, labels.height as u32);
    for (px, &v) in img.pixels_mut().zip(&labels.data) {
        let c = if v == palette.ignore_index {
            palette.ignore_color
        } else {
            palette.color(v as usize).ok_or(Error::LabelOutOfRange {
                index: v,
                n_class: palette.n_class(),
            })?
        };
        *px = Rgb(c);
    }
    Ok(img)
}

/// Inverse of [`encode_labels`]. Any color outside the palette is a hard
/// error naming the first such color and how many pixels carry it.
pub fn decode_labels(img: &RgbImage, palette: &Palette, source: &Path) -> Result<LabelMap> {
    let lut = palette.lookup();
    let mut data = Vec::with_capacity((img.width() * img.height()) as usize);
    let mut unknown: Option<[u8; 3]> = None;
    for px in img.pixels() {
        match lut.get(&px.0) {
            Some(&v) => data.push(v),
            None => {
                unknown.get_or_insert(px.0);
                data.push(palette.ignore_index);
            }
        }
    }
    if let Some(c) = unknown {
        let count = img.pixels().filter(|p| p.0 == c).count();
        return Err(Error::UnknownColor {
            path: source.to_path_buf(),
            r: c[0],
            g: c[1],
            b: c[2],
            count,
        });
    }
    Ok(LabelMap {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    })
}
