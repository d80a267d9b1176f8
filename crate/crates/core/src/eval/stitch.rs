use crate::error::{Error, Result};
use crate::raster::Raster;

/// Stitched probabilities over the rectangle the tiles cover, placed at
/// `(origin_y, origin_x)` in scene coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedMap {
    pub origin_y: usize,
    pub origin_x: usize,
    pub probs: Raster<f32>,
}

impl StitchedMap {
    /// The matching window of a full-scene raster.
    pub fn crop_like<T: Copy>(&self, full: &Raster<T>) -> Raster<T> {
        full.crop(self.origin_y, self.origin_x, self.probs.height, self.probs.width)
    }
}

/// Places `side×side` tiles (top-left `y, x`, row-major values) into one
/// raster. The tiles must cover their bounding rectangle exactly once and
/// lie inside a `height×width` scene.
pub fn stitch(tiles: &[(usize, usize, &[f32])], side: usize, height: usize, width: usize) -> Result<StitchedMap> {
    if tiles.is_empty() || side == 0 {
        return Err(Error::contract("stitch", "no tiles to place"));
    }
    for &(y, x, v) in tiles {
        if v.len() != side * side {
            return Err(Error::contract(
                "stitch",
                format!("tile at ({y}, {x}) has {} values, expected {}", v.len(), side * side),
            ));
        }
        if y + side > height || x + side > width {
            return Err(Error::contract(
                "stitch",
                format!("tile at ({y}, {x}) leaves the {height}×{width} scene"),
            ));
        }
    }
    let y0 = tiles.iter().map(|t| t.0).min().unwrap();
    let x0 = tiles.iter().map(|t| t.1).min().unwrap();
    let h = tiles.iter().map(|t| t.0 + side).max().unwrap() - y0;
    let w = tiles.iter().map(|t| t.1 + side).max().unwrap() - x0;
    let mut probs = Raster::filled(h, w, 0.0f32);
    let mut hits = Raster::filled(h, w, 0u8);
    for &(y, x, v) in tiles {
        for r in 0..side {
            for c in 0..side {
                let (py, px) = (y - y0 + r, x - x0 + c);
                if hits.get(py, px) > 0 {
                    return Err(Error::contract(
                        "stitch",
                        format!("pixel ({}, {}) is covered twice", py + y0, px + x0),
                    ));
                }
                hits.set(py, px, 1);
                probs.set(py, px, v[r * side + c]);
            }
        }
    }
    if let Some(i) = hits.data.iter().position(|&n| n == 0) {
        return Err(Error::contract(
            "stitch",
            format!("pixel ({}, {}) is not covered", i / w + y0, i % w + x0),
        ));
    }
    Ok(StitchedMap {
        origin_y: y0,
        origin_x: x0,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_is_identity() {
        let v: Vec<f32> = (0..576).map(|i| i as f32 / 576.0).collect();
        let m = stitch(&[(0, 0, &v)], 24, 24, 24).unwrap();
        assert_eq!(m.probs.data, v);
        assert_eq!((m.origin_y, m.origin_x), (0, 0));
    }

    #[test]
    fn gaps_and_overlaps_are_rejected() {
        let v = vec![0.5f32; 4];
        assert!(stitch(&[(0, 0, &v), (0, 4, &v)], 2, 8, 8).is_err());
        assert!(stitch(&[(0, 0, &v), (0, 1, &v)], 2, 8, 8).is_err());
        assert!(stitch(&[(7, 0, &v)], 2, 8, 8).is_err());
        assert!(stitch(&[(0, 0, &v[..3])], 2, 8, 8).is_err());
    }
}
