use crate::error::{Error, Result};

/// Tile rectangle in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Overlapping tiles covering an image, in row-major order. Adjacent tiles
/// overlap by exactly `overlap` except the last row/column, which is pushed
/// flush against the border.
#[derive(Clone, Debug, PartialEq)]
pub struct TilingPlan {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub overlap: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub tiles: Vec<Rect>,
}

impl TilingPlan {
    pub fn stride(&self) -> usize {
        self.tile - self.overlap
    }
}

/// Start offsets along one axis plus the tile extent used on it.
fn axis(dim: usize, tile: usize, stride: usize) -> (Vec<usize>, usize) {
    if dim <= tile {
        return (vec![0], dim);
    }
    let n = (dim - tile).div_ceil(stride) + 1;
    let mut starts: Vec<usize> = (0..n - 1).map(|i| i * stride).collect();
    starts.push(dim - tile);
    (starts, tile)
}

pub fn plan_tiles(height: usize, width: usize, tile: usize, overlap: usize) -> Result<TilingPlan> {
    if height == 0 || width == 0 {
        return Err(Error::config("image", "empty image"));
    }
    if tile == 0 {
        return Err(Error::config("tile", "tile size must be positive"));
    }
    if overlap >= tile {
        return Err(Error::config("overlap", format!("overlap {overlap} must be smaller than tile {tile}")));
    }
    let stride = tile - overlap;
    let (rows, th) = axis(height, tile, stride);
    let (cols, tw) = axis(width, tile, stride);
    let tiles = rows
        .iter()
        .flat_map(|&y| cols.iter().map(move |&x| Rect { y, x, h: th, w: tw }))
        .collect();
    Ok(TilingPlan {
        height,
        width,
        tile,
        overlap,
        rows,
        cols,
        tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coverage(p: &TilingPlan) -> Vec<u32> {
        let mut c = vec![0u32; p.height * p.width];
        for t in &p.tiles {
            assert!(t.y + t.h <= p.height && t.x + t.w <= p.width);
            for y in t.y..t.y + t.h {
                for x in t.x..t.x + t.w {
                    c[y * p.width + x] += 1;
                }
            }
        }
        c
    }

    #[test]
    fn single_and_disjoint_cases() {
        let p = plan_tiles(896, 896, 896, 512).unwrap();
        assert_eq!(p.tiles, vec![Rect { y: 0, x: 0, h: 896, w: 896 }]);
        let p = plan_tiles(896, 1792, 896, 0).unwrap();
        assert_eq!(p.tiles.len(), 2);
        assert!(coverage(&p).iter().all(|&c| c == 1));
        let p = plan_tiles(100, 60, 896, 512).unwrap();
        assert_eq!(p.tiles, vec![Rect { y: 0, x: 0, h: 100, w: 60 }]);
    }

    #[test]
    fn overlap_must_be_below_tile() {
        assert!(plan_tiles(10, 10, 4, 4).is_err());
        assert!(plan_tiles(10, 10, 0, 0).is_err());
    }

    #[test]
    fn every_pixel_covered_for_odd_sizes() {
        for (h, w, t, o) in [(37, 53, 16, 5), (100, 17, 32, 31), (64, 64, 16, 8)] {
            let p = plan_tiles(h, w, t, o).unwrap();
            assert!(coverage(&p).iter().all(|&c| c >= 1));
        }
    }
}
