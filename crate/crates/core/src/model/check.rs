use std::collections::BTreeMap;

use bootseg_autodiff::{
    grad_check_inputs, GradCheckConfig, GradCheckReport, SplitMixRng, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::ArchitectureSpec;
use super::net::{forward_on, ForwardOptions};
use super::params::build_model;
use crate::error::{Error, Result};

/// Finite-difference check of the whole network plus cross-entropy in double
/// precision, at a random batch of `batch` samples drawn from `seed`.
///
/// Every parameter tensor is an input; `config.max_coords` bounds the
/// coordinates probed per tensor.
pub fn grad_check_model(
    spec: &ArchitectureSpec,
    seed: u64,
    batch: usize,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if spec.dropout != 0.0 {
        return Err(Error::contract("grad_check_model", "dropout must be 0 for a deterministic loss"));
    }
    let params = build_model::<f64>(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let s = spec.input_side;
    let input = Tensor::from_fn(&[batch, spec.input_channels, s, s], |_| rng.gen_range(-0.5..0.5));
    let o = spec.output_side;
    let target = Tensor::from_fn(&[batch, o, o], |_| f64::from(u8::from(rng.gen_bool(0.4))));
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let points: Vec<Tensor<f64>> = params.tensors.values().cloned().collect();
    let report = grad_check_inputs(
        |g, vars| {
            let bound: BTreeMap<String, _> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let mut buffers = params.buffers.clone();
            let x = g.constant(input.clone());
            let (out, _) = forward_on(
                g,
                bound,
                &params,
                &mut buffers,
                x,
                ForwardOptions::train(),
                &mut SplitMixRng(0),
            )
            .map_err(|e| match e {
                Error::Tensor(t) => t,
                other => TensorError::Contract {
                    op: "model",
                    msg: other.to_string(),
                },
            })?;
            g.bce(out, &target)
        },
        &points,
        config,
    )?;
    Ok(report)
}
