use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::components::{connected_components, ComponentLabeling};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Building-level counts at one threshold and overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrCounts {
    pub detected: usize,
    pub total_gt: usize,
    pub correct: usize,
    pub total_pred: usize,
}

impl PrCounts {
    pub fn add(self, o: PrCounts) -> PrCounts {
        PrCounts {
            detected: self.detected + o.detected,
            total_gt: self.total_gt + o.total_gt,
            correct: self.correct + o.correct,
            total_pred: self.total_pred + o.total_pred,
        }
    }

    /// 1.0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.total_pred == 0 {
            1.0
        } else {
            self.correct as f64 / self.total_pred as f64
        }
    }

    /// 1.0 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        if self.total_gt == 0 {
            1.0
        } else {
            self.detected as f64 / self.total_gt as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub overlap: f64,
    #[serde(flatten)]
    pub counts: PrCounts,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn new(threshold: f64, overlap: f64, counts: PrCounts) -> Self {
        PrPoint {
            threshold,
            overlap,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
        }
    }
}

/// Whether `hits` of `size` pixels reach the overlap fraction. The small
/// slack keeps `θ = 1/size` from failing on rounding.
fn reaches(hits: usize, size: usize, overlap: f64) -> bool {
    hits as f64 >= overlap * size as f64 - 1e-9
}

fn check_overlap(overlap: f64) -> Result<()> {
    if overlap > 0.0 && overlap <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract("pr", format!("overlap {overlap} outside (0, 1]")))
    }
}

/// A scene prepared for repeated thresholding: ground truth labeled once.
pub struct SceneEval<'a> {
    probs: &'a Raster<f32>,
    gt: &'a Raster<u8>,
    gt_labels: ComponentLabeling,
}

impl<'a> SceneEval<'a> {
    pub fn new(probs: &'a Raster<f32>, gt: &'a Raster<u8>) -> Result<Self> {
        if !probs.same_shape(gt) {
            return Err(Error::contract(
                "pr",
                format!(
                    "prediction is {}×{} but ground truth is {}×{}",
                    probs.height, probs.width, gt.height, gt.width
                ),
            ));
        }
        Ok(SceneEval {
            probs,
            gt,
            gt_labels: connected_components(gt),
        })
    }

    /// Counts for every overlap in `overlaps` at threshold `t`. A pixel is
    /// predicted foreground when its probability is at least `t`; predicted
    /// components smaller than `min_pixels` are dropped.
    pub fn counts(&self, t: f64, overlaps: &[f64], min_pixels: usize) -> Vec<PrCounts> {
        let mask = Raster {
            height: self.probs.height,
            width: self.probs.width,
            data: self.probs.data.iter().map(|&p| u8::from(f64::from(p) >= t)).collect(),
        };
        let pred = connected_components(&mask);
        let keep: Vec<bool> = pred.sizes.iter().map(|&s| s >= min_pixels.max(1)).collect();

        // Predicted-foreground pixels per GT component and GT pixels per
        // predicted component.
        let mut gt_hits = vec![0usize; self.gt_labels.count];
        let mut pred_hits = vec![0usize; pred.count];
        for ((&gl, &pl), &g) in self.gt_labels.labels.data.iter().zip(&pred.labels.data).zip(&self.gt.data) {
            let kept = pl != 0 && keep[pl as usize - 1];
            if gl != 0 && kept {
                gt_hits[gl as usize - 1] += 1;
            }
            if kept && g != 0 {
                pred_hits[pl as usize - 1] += 1;
            }
        }
        let total_pred = keep.iter().filter(|&&k| k).count();
        overlaps
            .iter()
            .map(|&theta| PrCounts {
                detected: gt_hits
                    .iter()
                    .zip(&self.gt_labels.sizes)
                    .filter(|&(&h, &s)| reaches(h, s, theta))
                    .count(),
                total_gt: self.gt_labels.count,
                correct: pred_hits
                    .iter()
                    .zip(&pred.sizes)
                    .zip(&keep)
                    .filter(|&((&h, &s), &k)| k && reaches(h, s, theta))
                    .count(),
                total_pred,
            })
            .collect()
    }
}

pub fn pr_at_threshold(probs: &Raster<f32>, gt: &Raster<u8>, t: f64, overlap: f64) -> Result<PrPoint> {
    check_overlap(overlap)?;
    let scene = SceneEval::new(probs, gt)?;
    Ok(PrPoint::new(t, overlap, scene.counts(t, &[overlap], 0)[0]))
}

/// `count` evenly spaced thresholds strictly inside (0, 1).
pub fn threshold_grid(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::contract("pr_curve", "empty threshold grid"));
    }
    if grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(
            "pr_curve",
            "thresholds must lie in (0, 1) and increase strictly",
        ));
    }
    Ok(())
}

/// Micro-averaged curves: building counts are summed over all scenes before
/// precision and recall are taken. Returns one curve per overlap.
pub fn pr_curves(
    scenes: &[(Raster<f32>, Raster<u8>)],
    overlaps: &[f64],
    grid: &[f64],
    min_pixels: usize,
) -> Result<Vec<Vec<PrPoint>>> {
    check_grid(grid)?;
    for &o in overlaps {
        check_overlap(o)?;
    }
    let prepared: Vec<SceneEval> = scenes
        .iter()
        .map(|(p, g)| SceneEval::new(p, g))
        .collect::<Result<_>>()?;
    // [scene][threshold][overlap]
    let per_scene: Vec<Vec<Vec<PrCounts>>> = prepared
        .par_iter()
        .map(|s| grid.iter().map(|&t| s.counts(t, overlaps, min_pixels)).collect())
        .collect();
    Ok(overlaps
        .iter()
        .enumerate()
        .map(|(oi, &o)| {
            grid.iter()
                .enumerate()
                .map(|(ti, &t)| {
                    let total = per_scene
                        .iter()
                        .fold(PrCounts::default(), |acc, s| acc.add(s[ti][oi]));
                    PrPoint::new(t, o, total)
                })
                .collect()
        })
        .collect())
}

pub fn pr_curve(scenes: &[(Raster<f32>, Raster<u8>)], overlap: f64, grid: &[f64]) -> Result<Vec<PrPoint>> {
    Ok(pr_curves(scenes, &[overlap], grid, 0)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub overlap: f64,
    pub value: f64,
    /// Thresholds of the two grid points bracketing the crossing (equal when
    /// the value sits on a grid point).
    pub lower_threshold: f64,
    pub upper_threshold: f64,
    /// Threshold at which precision equals recall.
    pub threshold: f64,
    pub interpolated: bool,
}

/// Where precision meets recall. Uses the first sign change of P − R in
/// threshold order, interpolating P and R linearly in the threshold. A grid
/// point with P == R wins over any crossing after it. Without a sign change,
/// falls back to the point of smallest |P − R| and reports the mean of P and
/// R there.
pub fn break_even(curve: &[PrPoint]) -> Result<BreakEven> {
    let first = curve
        .first()
        .ok_or_else(|| Error::contract("break_even", "empty curve"))?;
    let on_grid = |p: &PrPoint, value: f64| BreakEven {
        overlap: p.overlap,
        value,
        lower_threshold: p.threshold,
        upper_threshold: p.threshold,
        threshold: p.threshold,
        interpolated: false,
    };
    for (i, p) in curve.iter().enumerate() {
        let d = p.precision - p.recall;
        if d == 0.0 {
            return Ok(on_grid(p, p.precision));
        }
        if let Some(q) = curve.get(i + 1) {
            let e = q.precision - q.recall;
            if d * e < 0.0 {
                let f = d / (d - e);
                let lerp = |a: f64, b: f64| a + f * (b - a);
                return Ok(BreakEven {
                    overlap: p.overlap,
                    value: lerp(p.precision, q.precision),
                    lower_threshold: p.threshold,
                    upper_threshold: q.threshold,
                    threshold: lerp(p.threshold, q.threshold),
                    interpolated: true,
                });
            }
        }
    }
    let best = curve.iter().fold(first, |b, p| {
        if (p.precision - p.recall).abs() < (b.precision - b.recall).abs() {
            p
        } else {
            b
        }
    });
    Ok(on_grid(best, 0.5 * (best.precision + best.recall)))
}
