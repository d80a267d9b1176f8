use std::collections::BTreeMap;

use bootseg_autodiff::{Element, RunningStats, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchitectureSpec, Variant};
use crate::error::Result;
use crate::seed::derive_seed;

/// Scale applied to the He draw of the output layer so that fresh networks
/// start with logits near zero.
pub const OUTPUT_GAIN: f64 = 0.1;

/// Named network state: trainable tensors plus batch-norm running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, RunningStats<T>>,
}

pub(crate) fn bn_name(prefix: &str) -> String {
    format!("{prefix}.bn")
}

pub(crate) fn layer_prefix(block: usize, layer: usize) -> String {
    format!("block{}.layer{}", block + 1, layer + 1)
}

pub(crate) fn transition_prefix(t: usize) -> String {
    format!("trans{}", t + 1)
}

pub(crate) fn stage_prefix(s: usize) -> String {
    format!("stage{}", s + 1)
}

struct Builder<T> {
    seed: u64,
    tensors: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, RunningStats<T>>,
}

impl<T: Element> Builder<T> {
    /// He-normal draw with its own stream per tensor name, so the result does
    /// not depend on construction order.
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name, 0));
        let t = Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)));
        self.tensors.insert(name, t);
    }

    fn conv(&mut self, prefix: &str, out: usize, input: usize, kernel: usize) {
        self.he(
            format!("{prefix}.conv"),
            &[out, input, kernel, kernel],
            input * kernel * kernel,
            1.0,
        );
    }

    fn bn(&mut self, prefix: &str, channels: usize) {
        let name = bn_name(prefix);
        self.tensors
            .insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        self.tensors
            .insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.buffers.insert(name, RunningStats::new(channels));
    }

    fn fc(&mut self, prefix: &str, input: usize, out: usize, gain: f64) {
        self.he(format!("{prefix}.weight"), &[input, out], input, gain);
        self.tensors
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
    }
}

impl<T: Element> ModelParams<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }

    /// Number of trainable scalars (running moments excluded).
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec.clone(),
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, s)| {
                    let conv = |v: &[T]| {
                        v.iter()
                            .map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN)))
                            .collect()
                    };
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Initializes every tensor of `spec` deterministically from `seed`.
pub fn build_model<T: Element>(spec: &ArchitectureSpec, seed: u64) -> Result<ModelParams<T>> {
    let plan = spec.plan()?;
    let mut b = Builder {
        seed,
        tensors: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    match spec.variant {
        Variant::DensenetBs => {
            b.conv("stem", spec.stem_filters, spec.input_channels, spec.stem_kernel);
            for (bi, block) in plan.blocks.iter().enumerate() {
                for (l, &cin) in block.layer_inputs.iter().enumerate() {
                    let p = layer_prefix(bi, l);
                    b.bn(&p, cin);
                    b.conv(&p, spec.growth_rate, cin, 3);
                }
            }
            for (t, &(cin, cout)) in plan.transitions.iter().enumerate() {
                let p = transition_prefix(t);
                b.bn(&p, cin);
                b.conv(&p, cout, cin, 1);
            }
            b.bn("head", plan.head_channels);
        }
        Variant::BaselineCnn => {
            let mut cin = spec.input_channels;
            for (s, &f) in spec.baseline_filters.iter().enumerate() {
                let p = stage_prefix(s);
                b.conv(&p, f, cin, 3);
                b.bn(&p, f);
                cin = f;
            }
        }
    }
    b.fc("head.fc1", plan.flat_features, spec.hidden_width, 1.0);
    b.fc("head.fc2", spec.hidden_width, spec.output_pixels(), OUTPUT_GAIN);
    Ok(ModelParams {
        spec: spec.clone(),
        seed,
        tensors: b.tensors,
        buffers: b.buffers,
    })
}
