//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! into the library code it is used to check.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bootseg_core::config::ExperimentConfig;
use bootseg_core::dataset::{MemorySource, PatchSample};
use bootseg_core::eval::{PrCounts, PrPoint};
use bootseg_core::raster::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Raster<u8> {
    let data = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
    Raster::from_vec(h, w, data).unwrap()
}

/// Explicit-stack flood fill; returns each component as a sorted pixel list,
/// in order of first pixel.
pub fn flood_fill(mask: &Raster<u8>) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Rectangles of ground truth, with probabilities that loosely follow it.
pub fn random_scene(rng: &mut ChaCha8Rng) -> (Raster<f32>, Raster<u8>) {
    let (h, w) = (48, 48);
    let mut gt = Raster::filled(h, w, 0u8);
    for _ in 0..rng.gen_range(2..8) {
        let (y, x) = (rng.gen_range(0..h - 4), rng.gen_range(0..w - 4));
        let (bh, bw) = (rng.gen_range(2..12), rng.gen_range(2..12));
        for yy in y..(y + bh).min(h) {
            for xx in x..(x + bw).min(w) {
                gt.set(yy, xx, 1);
            }
        }
    }
    let probs = gt
        .data
        .iter()
        .map(|&g| {
            let base = if g == 1 { 0.7 } else { 0.25 };
            (base + rng.gen_range(-0.35f32..0.35)).clamp(0.0, 1.0)
        })
        .collect();
    (Raster::from_vec(h, w, probs).unwrap(), gt)
}

/// Per-component pixel intersection counting on flood-fill components.
pub fn brute_force(probs: &Raster<f32>, gt: &Raster<u8>, t: f64, theta: f64) -> PrCounts {
    let pred = Raster {
        height: probs.height,
        width: probs.width,
        data: probs.data.iter().map(|&p| u8::from(f64::from(p) >= t)).collect(),
    };
    let gt_comps = flood_fill(gt);
    let pred_comps = flood_fill(&pred);
    let enough = |hits: usize, size: usize| hits as f64 >= theta * size as f64 - 1e-9;
    PrCounts {
        detected: gt_comps
            .iter()
            .filter(|c| enough(c.iter().filter(|&&p| pred.data[p] == 1).count(), c.len()))
            .count(),
        total_gt: gt_comps.len(),
        correct: pred_comps
            .iter()
            .filter(|c| enough(c.iter().filter(|&&p| gt.data[p] == 1).count(), c.len()))
            .count(),
        total_pred: pred_comps.len(),
    }
}

/// Precision rises and recall falls along `grid`, in small random steps.
pub fn monotone_curve(rng: &mut ChaCha8Rng, grid: &[f64]) -> Vec<PrPoint> {
    let mut p = rng.gen_range(0.0..0.5);
    let mut r = rng.gen_range(0.5..1.0);
    grid.iter()
        .map(|&t| {
            p = (p + rng.gen_range(0.0..0.02f64)).min(1.0);
            r = (r - rng.gen_range(0.0..0.02f64)).max(0.0);
            PrPoint {
                threshold: t,
                overlap: 0.5,
                counts: PrCounts::default(),
                precision: p,
                recall: r,
            }
        })
        .collect()
}

pub fn lerp_at(curve: &[PrPoint], t: f64) -> (f64, f64) {
    let i = curve.windows(2).position(|w| t <= w[1].threshold).unwrap_or(curve.len() - 2);
    let (a, b) = (&curve[i], &curve[i + 1]);
    let f = (t - a.threshold) / (b.threshold - a.threshold);
    (
        a.precision + f * (b.precision - a.precision),
        a.recall + f * (b.recall - a.recall),
    )
}

/// Break-even from `n` evenly spaced thresholds over the curve's range.
pub fn dense_sweep_break_even(curve: &[PrPoint], n: usize) -> f64 {
    let (lo, hi) = (curve[0].threshold, curve[curve.len() - 1].threshold);
    let ts: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let d: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let (p, r) = lerp_at(curve, t);
            p - r
        })
        .collect();
    match d.windows(2).position(|w| w[0] * w[1] <= 0.0) {
        Some(i) => {
            let f = if d[i] == d[i + 1] { 0.0 } else { d[i] / (d[i] - d[i + 1]) };
            let t = ts[i] + f * (ts[i + 1] - ts[i]);
            lerp_at(curve, t).0
        }
        None => {
            let i = (0..n).min_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())).unwrap();
            let (p, r) = lerp_at(curve, ts[i]);
            0.5 * (p + r)
        }
    }
}

/// Eight noisy constant patches, half all-building and half empty.
pub fn separable_corpus() -> MemorySource {
    corpus_with(|_| {})
}

pub fn corpus_with(edit: impl Fn(&mut Vec<PatchSample>)) -> MemorySource {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut samples: Vec<PatchSample> = (0..8u64)
        .map(|i| {
            let building = i % 2 == 0;
            let level = if building { 0.3 } else { -0.3 };
            PatchSample {
                id: i,
                scene_id: 0,
                y: 0,
                x: 0,
                input: (0..4 * 80 * 80).map(|_| level + rng.gen_range(-0.1f32..0.1)).collect(),
                target: vec![u8::from(building); 576],
            }
        })
        .collect();
    edit(&mut samples);
    MemorySource::new(samples).unwrap()
}

/// A full pipeline that finishes in seconds.
pub fn smoke_pipeline_config(dir: &Path, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::with_output(dir);
    c.seed = 3;
    c.workers = Some(1);
    c.corpus.scenes = 5;
    c.corpus.height = 160;
    c.corpus.width = 160;
    c.model.stem_filters = 4;
    c.model.layers_per_block = 1;
    c.model.growth_rate = 4;
    c.model.hidden_width = 16;
    c.train.epochs = 2;
    c.train.learning_rate = 0.05;
    c.bootstrap.rounds = rounds;
    c.eval.threshold_count = 9;
    c
}

/// Every file under `root`, keyed by relative path.
pub fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
