use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pr::{break_even, pr_curves, threshold_grid, BreakEven, PrPoint};
use super::stitch::stitch;
use crate::dataset::SceneSource;
use crate::error::{Error, Result};
use crate::model::{predict_ids, ModelParams};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub overlaps: Vec<f64>,
    /// Number of evenly spaced thresholds inside (0, 1).
    pub threshold_count: usize,
    /// Predicted components smaller than this are ignored.
    pub min_component_pixels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            overlaps: vec![0.25, 0.5, 0.75, 0.9],
            threshold_count: 99,
            min_component_pixels: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlaps.is_empty() || self.overlaps.iter().any(|&o| !(o > 0.0 && o <= 1.0)) {
            return Err(Error::Config("eval: overlaps must be nonempty and within (0, 1]".into()));
        }
        if self.threshold_count == 0 {
            return Err(Error::Config("eval: threshold_count must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        threshold_grid(self.threshold_count)
    }
}

/// Predicts every patch of each scene and stitches the results. Returns the
/// stitched probabilities paired with the ground truth under them.
pub fn scene_maps(
    params: &ModelParams<f32>,
    source: &SceneSource,
    scene_ids: &[u32],
    chunk: usize,
) -> Result<Vec<(Raster<f32>, Raster<u8>)>> {
    let side = source.tiling().output_side;
    scene_ids
        .iter()
        .map(|&id| {
            let scene = source
                .scene(id)
                .ok_or_else(|| Error::contract("evaluate", format!("scene {id} not loaded")))?;
            let ids = source.scene_sample_ids(id);
            let preds = predict_ids(params, source, &ids, chunk)?;
            let tiles: Vec<(usize, usize, &[f32])> = ids
                .iter()
                .zip(&preds)
                .map(|(&sid, p)| {
                    let (y, x) = source.position(sid).expect("id from this source");
                    (y, x, p.as_slice())
                })
                .collect();
            let map = stitch(&tiles, side, scene.height(), scene.width())?;
            let gt = map.crop_like(&scene.gt);
            Ok((map.probs, gt))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub round: usize,
    pub config_hash: String,
    pub scenes: Vec<u32>,
    pub curves: Vec<Vec<PrPoint>>,
    pub break_even: Vec<BreakEven>,
}

impl EvaluationReport {
    pub fn build(
        maps: &[(Raster<f32>, Raster<u8>)],
        scenes: Vec<u32>,
        config: &EvalConfig,
        round: usize,
        config_hash: &str,
    ) -> Result<Self> {
        config.validate()?;
        let curves = pr_curves(maps, &config.overlaps, &config.grid(), config.min_component_pixels)?;
        let break_even = curves.iter().map(|c| break_even(c)).collect::<Result<_>>()?;
        Ok(EvaluationReport {
            round,
            config_hash: config_hash.to_string(),
            scenes,
            curves,
            break_even,
        })
    }

    pub fn break_even_at(&self, overlap: f64) -> Option<f64> {
        self.break_even.iter().find(|b| b.overlap == overlap).map(|b| b.value)
    }

    /// One row per (overlap, threshold).
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("overlap,threshold,precision,recall,detected,total_gt,correct,total_pred\n");
        for p in self.curves.iter().flatten() {
            let c = p.counts;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.overlap, p.threshold, p.precision, p.recall, c.detected, c.total_gt, c.correct, c.total_pred
            )
            .unwrap();
        }
        out
    }
}
