use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// DenseNet with a max-pool after the stem and a max-pool head in place
    /// of global pooling, followed by two fully connected layers.
    DensenetBs,
    /// Plain sequential conv/pool stack with the same fully connected head.
    /// A reduced stand-in for the AlexNet comparison, not a replica.
    BaselineCnn,
}

/// Network geometry. Everything the parameter layout depends on lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub input_channels: usize,
    pub input_side: usize,
    pub output_side: usize,
    pub stem_filters: usize,
    pub stem_kernel: usize,
    pub dense_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    /// Transition output channels as a fraction of its input channels.
    pub compression: f64,
    pub hidden_width: usize,
    pub dropout: f64,
    /// Conv widths of the five baseline stages.
    pub baseline_filters: Vec<usize>,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            variant: Variant::DensenetBs,
            input_channels: 4,
            input_side: 80,
            output_side: 24,
            stem_filters: 16,
            stem_kernel: 3,
            dense_blocks: 3,
            layers_per_block: 4,
            growth_rate: 12,
            compression: 1.0,
            hidden_width: 512,
            dropout: 0.1,
            baseline_filters: vec![16, 32, 48, 48, 32],
        }
    }
}

/// Baseline stages followed by a 2×2 max-pool. Four pools take 80 to 5.
pub const BASELINE_POOLED_STAGES: [bool; 5] = [true, true, true, false, true];

/// Channel bookkeeping for one dense block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    /// Input channels of each layer: `in_channels + l * growth_rate`.
    pub layer_inputs: Vec<usize>,
    pub out_channels: usize,
    pub side: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub blocks: Vec<BlockPlan>,
    /// `(in, out)` channels of each transition.
    pub transitions: Vec<(usize, usize)>,
    /// Channels and side entering the fully connected head.
    pub head_channels: usize,
    pub head_side: usize,
    pub flat_features: usize,
}

fn halve(side: usize, stage: &str) -> Result<usize> {
    if side % 2 != 0 || side == 0 {
        return Err(Error::Config(format!(
            "shape plan: {stage} pools an odd spatial side {side}"
        )));
    }
    Ok(side / 2)
}

impl ArchitectureSpec {
    /// Tiny network for finite-difference checks of the full model.
    pub fn tiny() -> Self {
        ArchitectureSpec {
            stem_filters: 2,
            layers_per_block: 2,
            growth_rate: 2,
            hidden_width: 6,
            dropout: 0.0,
            baseline_filters: vec![2, 2, 2, 2, 2],
            ..ArchitectureSpec::default()
        }
    }

    pub fn output_pixels(&self) -> usize {
        self.output_side * self.output_side
    }

    /// Walks the network's stages and checks every pooling sees an even side.
    pub fn plan(&self) -> Result<ShapePlan> {
        if self.input_channels == 0 || self.input_side == 0 || self.output_side == 0 {
            return Err(Error::Config("shape plan: zero-sized input or output".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("shape plan: hidden_width must be positive".into()));
        }
        match self.variant {
            Variant::DensenetBs => self.dense_plan(),
            Variant::BaselineCnn => self.baseline_plan(),
        }
    }

    fn dense_plan(&self) -> Result<ShapePlan> {
        if self.dense_blocks != 3 {
            return Err(Error::Config(format!(
                "densenet_bs uses exactly 3 dense blocks, got {}",
                self.dense_blocks
            )));
        }
        if self.layers_per_block == 0 || self.growth_rate == 0 || self.stem_filters == 0 {
            return Err(Error::Config("shape plan: empty dense block or stem".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("shape plan: stem kernel must be odd".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!("compression {} outside (0, 1]", self.compression)));
        }
        let mut side = halve(self.input_side, "stem max-pool")?;
        let mut channels = self.stem_filters;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for b in 0..self.dense_blocks {
            let layer_inputs: Vec<usize> = (0..self.layers_per_block)
                .map(|l| channels + l * self.growth_rate)
                .collect();
            let out = channels + self.layers_per_block * self.growth_rate;
            blocks.push(BlockPlan {
                in_channels: channels,
                layer_inputs,
                out_channels: out,
                side,
            });
            channels = out;
            if b + 1 < self.dense_blocks {
                let t_out = ((out as f64) * self.compression).floor().max(1.0) as usize;
                transitions.push((out, t_out));
                channels = t_out;
                side = halve(side, &format!("transition {}", b + 1))?;
            }
        }
        let head_side = halve(side, "head max-pool")?;
        Ok(ShapePlan {
            blocks,
            transitions,
            head_channels: channels,
            head_side,
            flat_features: channels * head_side * head_side,
        })
    }

    fn baseline_plan(&self) -> Result<ShapePlan> {
        if self.baseline_filters.len() != BASELINE_POOLED_STAGES.len()
            || self.baseline_filters.contains(&0)
        {
            return Err(Error::Config(
                "baseline_cnn needs five positive stage widths".into(),
            ));
        }
        let mut side = self.input_side;
        for (i, &pooled) in BASELINE_POOLED_STAGES.iter().enumerate() {
            if pooled {
                side = halve(side, &format!("baseline stage {}", i + 1))?;
            }
        }
        let channels = *self.baseline_filters.last().unwrap();
        Ok(ShapePlan {
            blocks: vec![],
            transitions: vec![],
            head_channels: channels,
            head_side: side,
            flat_features: channels * side * side,
        })
    }
}
