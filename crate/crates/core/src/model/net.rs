use std::collections::BTreeMap;

use bootseg_autodiff::{Element, Graph, Mode, RunningStats, SplitMixRng, Tensor, Var};
use rand::RngCore;

use super::arch::{Variant, BASELINE_POOLED_STAGES};
use super::params::{bn_name, layer_prefix, stage_prefix, transition_prefix, ModelParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// When false, every concatenation inside a dense block keeps only its
    /// newest feature map and multiplies older ones by zero. Used to probe how
    /// much gradient arrives through the skip paths.
    pub dense_skips: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dense_skips: true,
        }
    }

    pub fn infer() -> Self {
        ForwardOptions {
            mode: Mode::Infer,
            dense_skips: true,
        }
    }
}

/// A recorded forward pass. `params` maps parameter names to their leaves.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub output: Var,
    pub params: BTreeMap<String, Var>,
}

struct Ctx<'a, T, R: RngCore> {
    g: &'a mut Graph<T>,
    model: &'a ModelParams<T>,
    buffers: &'a mut BTreeMap<String, RunningStats<T>>,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    rng: &'a mut R,
}

impl<T: Element, R: RngCore> Ctx<'_, T, R> {
    fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = self.g.param(self.model.get(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    fn bn_relu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let name = bn_name(prefix);
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        let stats = self
            .buffers
            .get_mut(&name)
            .ok_or_else(|| Error::contract("forward", format!("missing running stats {name}")))?;
        let y = self.g.batch_norm(x, gamma, beta, self.mode, stats)?;
        Ok(self.g.relu(y)?)
    }

    fn conv(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let k = self.param(&format!("{prefix}.conv"));
        let side = self.model.get(&format!("{prefix}.conv")).shape()[2];
        Ok(self.g.conv2d(x, k, 1, side / 2)?)
    }

    fn fc(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        Ok(self.g.fully_connected(x, w, b)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.spec.dropout;
        Ok(self.g.dropout(x, rate, self.mode, &mut *self.rng)?)
    }

    fn dense_trunk(&mut self, x: Var, dense_skips: bool) -> Result<Var> {
        let spec = &self.model.spec;
        let (blocks, layers) = (spec.dense_blocks, spec.layers_per_block);
        let stem = self.conv(x, "stem")?;
        let mut h = self.g.max_pool2x2(stem)?;
        for b in 0..blocks {
            let mut features = vec![h];
            for l in 0..layers {
                let input = self.concat(&features, dense_skips)?;
                let prefix = layer_prefix(b, l);
                let got = self.g.value(input).shape()[1];
                let want = self.model.get(&format!("{prefix}.conv")).shape()[1];
                if got != want {
                    return Err(Error::contract(
                        "dense block",
                        format!("{prefix} receives {got} channels but its kernel expects {want}"),
                    ));
                }
                let a = self.bn_relu(input, &prefix)?;
                let c = self.conv(a, &prefix)?;
                features.push(self.dropout(c)?);
            }
            h = self.concat(&features, dense_skips)?;
            if b + 1 < blocks {
                let prefix = transition_prefix(b);
                let a = self.bn_relu(h, &prefix)?;
                let c = self.conv(a, &prefix)?;
                h = self.g.avg_pool2x2(c)?;
            }
        }
        let a = self.bn_relu(h, "head")?;
        Ok(self.g.max_pool2x2(a)?)
    }

    fn concat(&mut self, features: &[Var], dense_skips: bool) -> Result<Var> {
        if features.len() == 1 {
            return Ok(features[0]);
        }
        if dense_skips {
            return Ok(self.g.concat_channels(features)?);
        }
        let last = features.len() - 1;
        let mut parts = Vec::with_capacity(features.len());
        for (i, &f) in features.iter().enumerate() {
            parts.push(if i == last {
                f
            } else {
                self.g.scale(f, T::zero())?
            });
        }
        Ok(self.g.concat_channels(&parts)?)
    }

    fn baseline_trunk(&mut self, x: Var) -> Result<Var> {
        let mut h = x;
        for (s, &pooled) in BASELINE_POOLED_STAGES.iter().enumerate() {
            let prefix = stage_prefix(s);
            let c = self.conv(h, &prefix)?;
            h = self.bn_relu(c, &prefix)?;
            if pooled {
                h = self.g.max_pool2x2(h)?;
            }
        }
        Ok(h)
    }
}

/// Appends a forward pass to `g` and returns the N×24×24 probability node
/// with the parameter leaves it used. Names already present in `bound` reuse
/// the given leaves instead of creating new ones. Train-mode batch norm
/// updates `buffers`.
#[allow(clippy::too_many_arguments)]
pub fn forward_on<T: Element, R: RngCore>(
    g: &mut Graph<T>,
    bound: BTreeMap<String, Var>,
    model: &ModelParams<T>,
    buffers: &mut BTreeMap<String, RunningStats<T>>,
    input: Var,
    options: ForwardOptions,
    rng: &mut R,
) -> Result<(Var, BTreeMap<String, Var>)> {
    let spec = &model.spec;
    let n = match *g.value(input).shape() {
        [n, c, h, w] if c == spec.input_channels && h == spec.input_side && w == spec.input_side => n,
        ref other => {
            return Err(Error::contract(
                "forward",
                format!(
                    "expected N×{}×{}×{} input, got {:?}",
                    spec.input_channels, spec.input_side, spec.input_side, other
                ),
            ))
        }
    };
    let mut ctx = Ctx {
        g,
        model,
        buffers,
        vars: bound,
        mode: options.mode,
        rng,
    };
    let trunk = match spec.variant {
        Variant::DensenetBs => ctx.dense_trunk(input, options.dense_skips)?,
        Variant::BaselineCnn => ctx.baseline_trunk(input)?,
    };
    let flat_len = ctx.g.value(trunk).numel() / n;
    let flat = ctx.g.reshape(trunk, &[n, flat_len])?;
    // The two head layers form a linear bottleneck with no activation between.
    let hidden = ctx.fc(flat, "head.fc1")?;
    let hidden = match spec.variant {
        Variant::BaselineCnn => ctx.dropout(hidden)?,
        Variant::DensenetBs => hidden,
    };
    let logits = ctx.fc(hidden, "head.fc2")?;
    let side = spec.output_side;
    let maps = ctx.g.reshape(logits, &[n, side, side])?;
    let output = ctx.g.sigmoid(maps)?;
    Ok((output, ctx.vars))
}

/// Records a forward pass of `input` (N×C×S×S) on a fresh graph.
pub fn forward_graph<T: Element, R: RngCore>(
    model: &ModelParams<T>,
    buffers: &mut BTreeMap<String, RunningStats<T>>,
    input: &Tensor<T>,
    options: ForwardOptions,
    rng: &mut R,
) -> Result<ForwardPass<T>> {
    let mut graph = Graph::new();
    let x = graph.constant(input.clone());
    let (output, params) = forward_on(&mut graph, BTreeMap::new(), model, buffers, x, options, rng)?;
    Ok(ForwardPass { graph, output, params })
}

impl<T: Element> ModelParams<T> {
    /// Infer-mode probabilities for a batch. Read-only, so it can run on many
    /// threads against shared parameters.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut buffers = self.buffers.clone();
        let mut rng = SplitMixRng(0);
        let pass = forward_graph(self, &mut buffers, input, ForwardOptions::infer(), &mut rng)?;
        Ok(pass.graph.value(pass.output).clone())
    }

    /// Records a forward pass, updating running moments in train mode.
    pub fn forward<R: RngCore>(
        &mut self,
        input: &Tensor<T>,
        options: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let mut buffers = std::mem::take(&mut self.buffers);
        let result = forward_graph(self, &mut buffers, input, options, rng);
        self.buffers = buffers;
        result
    }
}
