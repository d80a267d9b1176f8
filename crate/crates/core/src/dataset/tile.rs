//! Cutting scenes into centred input/target windows and normalizing them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::synth::RasterScene;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Patch geometry and normalization. The target window sits in the middle of
/// the input window, `(input_side - output_side) / 2` pixels from each edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tiling {
    pub input_side: usize,
    pub output_side: usize,
    pub stride: usize,
    /// Depth values are clamped to `[0, depth_clamp]` metres.
    pub depth_clamp: f32,
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling {
            input_side: 80,
            output_side: 24,
            stride: 24,
            depth_clamp: 30.0,
        }
    }
}

impl Tiling {
    pub fn margin(&self) -> usize {
        (self.input_side - self.output_side) / 2
    }

    pub fn input_len(&self) -> usize {
        4 * self.input_side * self.input_side
    }

    pub fn target_len(&self) -> usize {
        self.output_side * self.output_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_side == 0 || self.input_side < self.output_side {
            return Err(Error::Config("tiling: need 0 < output_side <= input_side".into()));
        }
        if (self.input_side - self.output_side) % 2 != 0 {
            return Err(Error::Config(
                "tiling: input_side - output_side must be even to centre the target".into(),
            ));
        }
        if self.stride == 0 || self.stride > self.output_side {
            return Err(Error::Config(format!(
                "tiling: stride {} must lie in 1..={}",
                self.stride, self.output_side
            )));
        }
        if !(self.depth_clamp > 0.0) {
            return Err(Error::Config("tiling: depth_clamp must be positive".into()));
        }
        Ok(())
    }

    /// Placement of output windows on a `height × width` scene: a regular grid
    /// centred on the scene.
    pub fn grid(&self, height: usize, width: usize) -> Result<TileGrid> {
        self.validate()?;
        if height < self.input_side || width < self.input_side {
            return Err(Error::contract(
                "tile_scene",
                format!(
                    "scene {height}×{width} is smaller than one {0}×{0} input window",
                    self.input_side
                ),
            ));
        }
        let count = |len: usize| (len - self.output_side) / self.stride + 1;
        let (rows, cols) = (count(height), count(width));
        let span = |n: usize| (n - 1) * self.stride + self.output_side;
        Ok(TileGrid {
            rows,
            cols,
            origin_y: (height - span(rows)) / 2,
            origin_x: (width - span(cols)) / 2,
            stride: self.stride,
            output_side: self.output_side,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub origin_y: usize,
    pub origin_x: usize,
    pub stride: usize,
    pub output_side: usize,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output-window top-left of grid cell `index` (row-major).
    pub fn position(&self, index: usize) -> (usize, usize) {
        let (r, c) = (index / self.cols, index % self.cols);
        (self.origin_y + r * self.stride, self.origin_x + c * self.stride)
    }

    /// The covered rectangle `(y, x, h, w)`. Exact tiling only when
    /// stride equals output side.
    pub fn region(&self) -> (usize, usize, usize, usize) {
        (
            self.origin_y,
            self.origin_x,
            (self.rows - 1) * self.stride + self.output_side,
            (self.cols - 1) * self.stride + self.output_side,
        )
    }
}

/// Globally unique sample id: scene id in the high half, grid index in the low half.
pub fn sample_id(scene_id: u32, local: usize) -> u64 {
    (u64::from(scene_id) << 32) | local as u64
}

pub fn split_sample_id(id: u64) -> (u32, usize) {
    ((id >> 32) as u32, (id & 0xFFFF_FFFF) as usize)
}

pub fn normalize_rgb(v: u8) -> f32 {
    f32::from(v) / 255.0 - 0.5
}

pub fn normalize_depth(metres: f32, clamp: f32) -> f32 {
    metres.clamp(0.0, clamp) / clamp - 0.5
}

/// Reflect-101 index: `-1 → 1`, `len → len - 2`.
fn mirror(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub id: u64,
    pub scene_id: u32,
    /// Output-window top-left in scene coordinates.
    pub y: usize,
    pub x: usize,
    /// Channel-major R, G, B, D planes of `input_side²` values each.
    pub input: Vec<f32>,
    pub target: Vec<u8>,
}

/// Writes the normalized input window whose target starts at `(y, x)`.
pub fn fill_input(scene: &RasterScene, tiling: &Tiling, y: usize, x: usize, out: &mut [f32]) {
    let s = tiling.input_side;
    let plane = s * s;
    let (h, w) = (scene.height(), scene.width());
    let y0 = y as isize - tiling.margin() as isize;
    let x0 = x as isize - tiling.margin() as isize;
    for dy in 0..s {
        let sy = mirror(y0 + dy as isize, h);
        for dx in 0..s {
            let sx = mirror(x0 + dx as isize, w);
            let i = dy * s + dx;
            let p = sy * w + sx;
            out[i] = normalize_rgb(scene.rgb[p * 3]);
            out[plane + i] = normalize_rgb(scene.rgb[p * 3 + 1]);
            out[2 * plane + i] = normalize_rgb(scene.rgb[p * 3 + 2]);
            out[3 * plane + i] = normalize_depth(scene.depth.data[p], tiling.depth_clamp);
        }
    }
}

pub fn fill_target<T: From<u8>>(gt: &Raster<u8>, tiling: &Tiling, y: usize, x: usize, out: &mut [T]) {
    let o = tiling.output_side;
    for dy in 0..o {
        for dx in 0..o {
            out[dy * o + dx] = T::from(gt.get(y + dy, x + dx));
        }
    }
}

/// Every patch of a scene, in grid order.
pub fn tile_scene(scene: &RasterScene, tiling: &Tiling) -> Result<Vec<PatchSample>> {
    let grid = tiling.grid(scene.height(), scene.width())?;
    Ok((0..grid.len())
        .map(|i| {
            let (y, x) = grid.position(i);
            let mut input = vec![0.0; tiling.input_len()];
            fill_input(scene, tiling, y, x, &mut input);
            let mut target = vec![0u8; tiling.target_len()];
            fill_target(&scene.gt, tiling, y, x, &mut target);
            PatchSample {
                id: sample_id(scene.id, i),
                scene_id: scene.id,
                y,
                x,
                input,
                target,
            }
        })
        .collect())
}

/// Anything that can materialize a sample's normalized input and target.
pub trait PatchSource: Sync {
    fn input_len(&self) -> usize;
    fn target_len(&self) -> usize;
    fn contains(&self, id: u64) -> bool;
    /// Fills `input` and `target` for `id`. Callers check `contains` first.
    fn fill(&self, id: u64, input: &mut [f32], target: &mut [f32]);

    /// Errors with every id the source cannot provide.
    fn require(&self, ids: &[u64]) -> Result<()> {
        let missing: Vec<u64> = ids.iter().copied().filter(|&id| !self.contains(id)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingSamples(missing))
        }
    }
}

/// Samples held fully in memory.
pub struct MemorySource {
    samples: BTreeMap<u64, PatchSample>,
    input_len: usize,
    target_len: usize,
}

impl MemorySource {
    pub fn new(samples: Vec<PatchSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("memory source", "no samples"))?;
        let (input_len, target_len) = (first.input.len(), first.target.len());
        if samples
            .iter()
            .any(|s| s.input.len() != input_len || s.target.len() != target_len)
        {
            return Err(Error::contract("memory source", "samples differ in size"));
        }
        Ok(MemorySource {
            samples: samples.into_iter().map(|s| (s.id, s)).collect(),
            input_len,
            target_len,
        })
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.keys().copied().collect()
    }
}

impl PatchSource for MemorySource {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn target_len(&self) -> usize {
        self.target_len
    }

    fn contains(&self, id: u64) -> bool {
        self.samples.contains_key(&id)
    }

    fn fill(&self, id: u64, input: &mut [f32], target: &mut [f32]) {
        let s = &self.samples[&id];
        input.copy_from_slice(&s.input);
        for (t, &v) in target.iter_mut().zip(&s.target) {
            *t = f32::from(v);
        }
    }
}

/// Scenes kept whole; patches are cut on demand.
pub struct SceneSource {
    scenes: BTreeMap<u32, (RasterScene, TileGrid)>,
    tiling: Tiling,
}

impl SceneSource {
    pub fn new(scenes: Vec<RasterScene>, tiling: Tiling) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in scenes {
            let grid = tiling.grid(s.height(), s.width())?;
            map.insert(s.id, (s, grid));
        }
        Ok(SceneSource { scenes: map, tiling })
    }

    pub fn tiling(&self) -> &Tiling {
        &self.tiling
    }

    pub fn scene(&self, id: u32) -> Option<&RasterScene> {
        self.scenes.get(&id).map(|(s, _)| s)
    }

    pub fn grid(&self, id: u32) -> Option<&TileGrid> {
        self.scenes.get(&id).map(|(_, g)| g)
    }

    pub fn scenes(&self) -> impl Iterator<Item = &RasterScene> {
        self.scenes.values().map(|(s, _)| s)
    }

    /// All sample ids of one scene, in grid order.
    pub fn scene_sample_ids(&self, id: u32) -> Vec<u64> {
        self.grid(id)
            .map(|g| (0..g.len()).map(|i| sample_id(id, i)).collect())
            .unwrap_or_default()
    }

    pub fn position(&self, id: u64) -> Option<(usize, usize)> {
        let (scene, local) = split_sample_id(id);
        let g = self.grid(scene)?;
        (local < g.len()).then(|| g.position(local))
    }
}

impl PatchSource for SceneSource {
    fn input_len(&self) -> usize {
        self.tiling.input_len()
    }

    fn target_len(&self) -> usize {
        self.tiling.target_len()
    }

    fn contains(&self, id: u64) -> bool {
        self.position(id).is_some()
    }

    fn fill(&self, id: u64, input: &mut [f32], target: &mut [f32]) {
        let (scene_id, _) = split_sample_id(id);
        let (y, x) = self.position(id).expect("caller checked contains");
        let scene = &self.scenes[&scene_id].0;
        fill_input(scene, &self.tiling, y, x, input);
        fill_target(&scene.gt, &self.tiling, y, x, target);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_reflects_without_repeating_edge() {
        assert_eq!(mirror(-1, 10), 1);
        assert_eq!(mirror(-3, 10), 3);
        assert_eq!(mirror(10, 10), 8);
        assert_eq!(mirror(0, 10), 0);
        assert_eq!(mirror(9, 10), 9);
        assert_eq!(mirror(-20, 10), 2);
    }

    #[test]
    fn normalization_fixed_points() {
        assert_eq!(normalize_rgb(255), 0.5);
        assert_eq!(normalize_rgb(0), -0.5);
        assert_eq!(normalize_depth(15.0, 30.0), 0.0);
        assert_eq!(normalize_depth(45.0, 30.0), 0.5);
        assert_eq!(normalize_depth(-2.0, 30.0), -0.5);
    }

    #[test]
    fn grid_is_centred() {
        let t = Tiling::default();
        let g = t.grid(240, 240).unwrap();
        assert_eq!((g.rows, g.cols, g.origin_y, g.origin_x), (10, 10, 0, 0));
        let g = t.grid(256, 256).unwrap();
        assert_eq!((g.rows, g.origin_y), (10, 8));
        assert_eq!(g.region(), (8, 8, 240, 240));
        assert!(t.grid(79, 200).is_err());
        let bad = Tiling {
            stride: 30,
            ..Tiling::default()
        };
        assert!(bad.grid(240, 240).is_err());
    }

    #[test]
    fn ids_round_trip() {
        let id = sample_id(7, 42);
        assert_eq!(split_sample_id(id), (7, 42));
    }
}
