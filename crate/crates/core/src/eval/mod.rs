//! Building-level evaluation: stitching, component counting, precision and
//! recall per overlap, and the break-even point.

mod components;
mod pr;
mod report;
mod stitch;

pub use components::{connected_components, ComponentLabeling};
pub use pr::{
    break_even, pr_at_threshold, pr_curve, pr_curves, threshold_grid, BreakEven, PrCounts, PrPoint, SceneEval,
};
pub use report::{scene_maps, EvalConfig, EvaluationReport};
pub use stitch::{stitch, StitchedMap};
