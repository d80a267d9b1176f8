//! Procedural RGB-D aerial scenes with building masks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MIN_SCENE_SIDE: usize = 160;

/// Knobs of the scene generator. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Target fraction of pixels covered by building footprints.
    pub building_density: f64,
    pub side_range: (usize, usize),
    pub height_range: (f64, f64),
    /// Share of buildings drawn as L-shapes.
    pub l_shape_fraction: f64,
    /// Share of all structures (buildings plus trees) that are hard: low-contrast
    /// low roofs and tree occluders.
    pub hard_fraction: f64,
    pub low_roof_height: (f64, f64),
    pub tree_radius: (usize, usize),
    pub tree_height: (f64, f64),
    /// Multiplier applied to ground colour inside shadows is `1 - shadow_strength`.
    pub shadow_strength: f64,
    /// Shadow offset in pixels per metre of height.
    pub shadow_length: f64,
    pub rgb_noise: f64,
    pub depth_noise: f64,
    pub roads: usize,
    /// Minimum gap between building footprints.
    pub margin: usize,
    /// Consecutive failed placements tolerated before giving up.
    pub max_retries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            building_density: 0.2,
            side_range: (10, 40),
            height_range: (3.0, 20.0),
            l_shape_fraction: 0.3,
            hard_fraction: 0.2,
            low_roof_height: (2.0, 3.5),
            tree_radius: (4, 12),
            tree_height: (4.0, 12.0),
            shadow_strength: 0.45,
            shadow_length: 0.6,
            rgb_noise: 6.0,
            depth_noise: 0.1,
            roads: 2,
            margin: 3,
            max_retries: 2000,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("scene params: {what}")));
        if !(0.0..=0.6).contains(&self.building_density) {
            return bad("building_density must lie in [0, 0.6]");
        }
        if self.side_range.0 < 4 || self.side_range.0 > self.side_range.1 {
            return bad("side_range must satisfy 4 <= min <= max");
        }
        for (name, (lo, hi)) in [
            ("height_range", self.height_range),
            ("low_roof_height", self.low_roof_height),
            ("tree_height", self.tree_height),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(&format!("{name} must satisfy 0 < min <= max"));
            }
        }
        if self.tree_radius.0 == 0 || self.tree_radius.0 > self.tree_radius.1 {
            return bad("tree_radius must satisfy 1 <= min <= max");
        }
        for (name, v) in [
            ("l_shape_fraction", self.l_shape_fraction),
            ("hard_fraction", self.hard_fraction),
            ("shadow_strength", self.shadow_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.hard_fraction >= 1.0 {
            return bad("hard_fraction must be below 1");
        }
        if self.shadow_length < 0.0 || self.rgb_noise < 0.0 || self.depth_noise < 0.0 {
            return bad("shadow_length and noise levels must be nonnegative");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}

/// Structure counts of a generated scene.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneStats {
    pub buildings: usize,
    pub low_contrast: usize,
    pub trees: usize,
}

impl SceneStats {
    pub fn hard_share(&self) -> f64 {
        let total = self.buildings + self.trees;
        if total == 0 {
            0.0
        } else {
            (self.low_contrast + self.trees) as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterScene {
    pub id: u32,
    pub seed: u64,
    /// Interleaved RGB, `height * width * 3` bytes.
    pub rgb: Vec<u8>,
    /// Metres above ground.
    pub depth: Raster<f32>,
    /// 1 on building pixels, 0 elsewhere.
    pub gt: Raster<u8>,
    pub stats: SceneStats,
}

impl RasterScene {
    pub fn height(&self) -> usize {
        self.gt.height
    }

    pub fn width(&self) -> usize {
        self.gt.width
    }

    pub fn rgb_at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.rgb[(y * self.width() + x) * 3 + c]
    }

    pub fn building_fraction(&self) -> f64 {
        self.gt.data.iter().filter(|&&v| v == 1).count() as f64 / self.gt.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

struct Footprint {
    parts: Vec<Rect>,
    height: f64,
    roof: [f64; 3],
}

impl Footprint {
    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let bbox = self.bbox();
        (bbox.y..bbox.y + bbox.h)
            .flat_map(move |y| (bbox.x..bbox.x + bbox.w).map(move |x| (y, x)))
            .filter(|&(y, x)| self.parts.iter().any(|r| r.contains(y, x)))
    }

    fn bbox(&self) -> Rect {
        let y0 = self.parts.iter().map(|r| r.y).min().unwrap();
        let x0 = self.parts.iter().map(|r| r.x).min().unwrap();
        let y1 = self.parts.iter().map(|r| r.y + r.h).max().unwrap();
        let x1 = self.parts.iter().map(|r| r.x + r.w).max().unwrap();
        Rect {
            y: y0,
            x: x0,
            h: y1 - y0,
            w: x1 - x0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn uniform_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// Draws a rectangle or L-shape whose bounding box fits the scene.
fn draw_shape(rng: &mut ChaCha8Rng, p: &SceneParams, height: usize, width: usize) -> Vec<Rect> {
    let h = uniform_usize(rng, p.side_range).min(height - 2);
    let w = uniform_usize(rng, p.side_range).min(width - 2);
    let y = rng.gen_range(0..=height - h);
    let x = rng.gen_range(0..=width - w);
    if h < 8 || w < 8 || !rng.gen_bool(p.l_shape_fraction) {
        return vec![Rect { y, x, h, w }];
    }
    // Remove one corner quadrant of between a third and a half of each side.
    let ch = rng.gen_range(h / 3..=h / 2);
    let cw = rng.gen_range(w / 3..=w / 2);
    let top = rng.gen_bool(0.5);
    let left = rng.gen_bool(0.5);
    let band = if top {
        Rect { y: y + ch, x, h: h - ch, w }
    } else {
        Rect { y, x, h: h - ch, w }
    };
    let arm_y = if top { y } else { y + h - ch };
    let arm = if left {
        Rect { y: arm_y, x: x + cw, h: ch, w: w - cw }
    } else {
        Rect { y: arm_y, x, h: ch, w: w - cw }
    };
    vec![band, arm]
}

fn ground_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(95.0..125.0),
        rng.gen_range(110.0..140.0),
        rng.gen_range(80.0..105.0),
    ]
}

fn roof_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    match rng.gen_range(0..3) {
        0 => [rng.gen_range(150.0..190.0), rng.gen_range(70.0..100.0), rng.gen_range(60.0..85.0)],
        1 => {
            let v = rng.gen_range(170.0..215.0);
            [v, v, v + rng.gen_range(-8.0..8.0)]
        }
        _ => {
            let v = rng.gen_range(45.0..75.0);
            [v, v + 5.0, v + 10.0]
        }
    }
}

/// Builds one scene. Output is a pure function of `(seed, height, width, params)`.
pub fn generate_scene(id: u32, seed: u64, height: usize, width: usize, p: &SceneParams) -> Result<RasterScene> {
    if height < MIN_SCENE_SIDE || width < MIN_SCENE_SIDE {
        return Err(Error::Config(format!(
            "scene must be at least {MIN_SCENE_SIDE}×{MIN_SCENE_SIDE}, got {height}×{width}"
        )));
    }
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let ground = ground_colour(&mut rng);

    // Smooth ground variation from a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.01..0.06),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(4.0..10.0),
            )
        })
        .collect();
    let mut rgb = vec![[0.0f64; 3]; n];
    for y in 0..height {
        for x in 0..width {
            let mut shade = 0.0;
            for &(f, angle, phase, amp) in &waves {
                let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * f;
                shade += amp * (t * std::f64::consts::TAU + phase).sin();
            }
            rgb[y * width + x] = [ground[0] + shade, ground[1] + shade, ground[2] + shade * 0.7];
        }
    }

    for _ in 0..p.roads {
        let grey = rng.gen_range(95.0..140.0);
        let thick = rng.gen_range(6..=10);
        if rng.gen_bool(0.5) {
            let y0 = rng.gen_range(0..height - thick);
            for y in y0..y0 + thick {
                for x in 0..width {
                    rgb[y * width + x] = [grey, grey, grey];
                }
            }
        } else {
            let x0 = rng.gen_range(0..width - thick);
            for y in 0..height {
                for x in x0..x0 + thick {
                    rgb[y * width + x] = [grey, grey, grey];
                }
            }
        }
    }

    // Building placement: rejection sampling against a dilated occupancy grid.
    let target_pixels = (p.building_density * n as f64).round() as usize;
    let mut occupied = vec![false; n];
    let mut buildings: Vec<Footprint> = Vec::new();
    let mut placed = 0usize;
    let mut failures = 0usize;
    while placed < target_pixels {
        let parts = draw_shape(&mut rng, p, height, width);
        let fp = Footprint {
            parts,
            height: 0.0,
            roof: [0.0; 3],
        };
        let bb = fp.bbox();
        let m = p.margin;
        let clash = (bb.y.saturating_sub(m)..(bb.y + bb.h + m).min(height)).any(|y| {
            (bb.x.saturating_sub(m)..(bb.x + bb.w + m).min(width)).any(|x| occupied[y * width + x])
        });
        if clash {
            failures += 1;
            if failures >= p.max_retries {
                return Err(Error::Infeasible(format!(
                    "placed {placed} of {target_pixels} building pixels before {} consecutive failed placements",
                    p.max_retries
                )));
            }
            continue;
        }
        failures = 0;
        for (y, x) in fp.pixels() {
            occupied[y * width + x] = true;
            placed += 1;
        }
        buildings.push(fp);
    }

    let hard_count = |structures: usize| (p.hard_fraction * structures as f64).ceil() as usize;
    let low_contrast = hard_count(buildings.len()).min(buildings.len());
    let trees = if p.hard_fraction > 0.0 {
        hard_count(buildings.len())
    } else {
        0
    };
    for (i, b) in buildings.iter_mut().enumerate() {
        if i < low_contrast {
            b.height = uniform(&mut rng, p.low_roof_height);
            let delta = rng.gen_range(-10.0..10.0);
            b.roof = [ground[0] + delta, ground[1] + delta, ground[2] + delta];
        } else {
            b.height = uniform(&mut rng, p.height_range);
            b.roof = roof_colour(&mut rng);
        }
    }

    let mut tree_discs = Vec::with_capacity(trees);
    for _ in 0..trees {
        let r = uniform_usize(&mut rng, p.tree_radius);
        let cy = rng.gen_range(0..height);
        let cx = rng.gen_range(0..width);
        let h = uniform(&mut rng, p.tree_height);
        let tone = rng.gen_range(-12.0..12.0);
        tree_discs.push((cy, cx, r, h, tone));
    }

    // Shadows fall on the ground layer only; objects drawn afterwards cover them.
    let sun = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sy, sx) = (sun.sin(), sun.cos());
    let dim = 1.0 - p.shadow_strength;
    let mut shadow = vec![false; n];
    let mut cast = |y: usize, x: usize, h: f64| {
        let len = h * p.shadow_length;
        let steps = len.ceil() as usize;
        for s in 1..=steps {
            let d = (s as f64).min(len);
            let ty = y as f64 + sy * d;
            let tx = x as f64 + sx * d;
            if ty >= 0.0 && tx >= 0.0 && (ty as usize) < height && (tx as usize) < width {
                shadow[ty as usize * width + tx as usize] = true;
            }
        }
    };
    for b in &buildings {
        for (y, x) in b.pixels() {
            cast(y, x, b.height);
        }
    }
    for &(cy, cx, r, h, _) in &tree_discs {
        for_disc(cy, cx, r, height, width, |y, x, _| cast(y, x, h * 0.6));
    }
    for (px, &s) in rgb.iter_mut().zip(&shadow) {
        if s {
            for c in px.iter_mut() {
                *c *= dim;
            }
        }
    }

    let mut depth = vec![0.0f32; n];
    let mut gt = vec![0u8; n];
    for b in &buildings {
        for (y, x) in b.pixels() {
            let i = y * width + x;
            depth[i] = b.height as f32;
            gt[i] = 1;
            rgb[i] = b.roof;
        }
    }
    for &(cy, cx, r, h, tone) in &tree_discs {
        for_disc(cy, cx, r, height, width, |y, x, rho| {
            let i = y * width + x;
            let dome = (h * (1.0 - rho * rho).sqrt()) as f32;
            depth[i] = depth[i].max(dome);
            let leaf = 20.0 * ((y * 7 + x * 13) % 5) as f64 / 4.0;
            rgb[i] = [45.0 + tone + leaf * 0.5, 85.0 + tone + leaf, 40.0 + tone * 0.5];
        });
    }

    let rgb_noise = Normal::new(0.0, p.rgb_noise.max(1e-12)).expect("valid std");
    let depth_noise = Normal::new(0.0, p.depth_noise.max(1e-12)).expect("valid std");
    let mut bytes = Vec::with_capacity(n * 3);
    for px in &rgb {
        for &c in px {
            let v = if p.rgb_noise > 0.0 { c + rgb_noise.sample(&mut rng) } else { c };
            bytes.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    if p.depth_noise > 0.0 {
        for d in depth.iter_mut() {
            *d = (*d + depth_noise.sample(&mut rng) as f32).max(0.0);
        }
    }

    Ok(RasterScene {
        id,
        seed,
        rgb: bytes,
        depth: Raster::from_vec(height, width, depth).expect("sized"),
        gt: Raster::from_vec(height, width, gt).expect("sized"),
        stats: SceneStats {
            buildings: buildings.len(),
            low_contrast,
            trees,
        },
    })
}

/// Calls `f(y, x, rho)` for every in-bounds pixel of a disc, with `rho` the
/// normalised distance from its centre.
fn for_disc(cy: usize, cx: usize, r: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, f64)) {
    let (ry, rx) = (cy as isize, cx as isize);
    let r = r as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (ry + dy, rx + dx);
            if y < 0 || x < 0 || y as usize >= height || x as usize >= width {
                continue;
            }
            let d2 = (dy * dy + dx * dx) as f64;
            let r2 = (r * r) as f64;
            if d2 <= r2 {
                f(y as usize, x as usize, (d2 / r2).sqrt());
            }
        }
    }
}
