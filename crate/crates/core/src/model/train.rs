use std::collections::BTreeMap;
use std::time::Instant;

use bootseg_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::net::ForwardOptions;
use super::params::{build_model, ModelParams};
use crate::dataset::PatchSource;
use crate::error::{Error, Result};
use crate::loss::bce_loss;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate multiplier applied once `decay_at` of the budget has passed.
    pub lr_decay: f64,
    pub decay_at: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a new validation minimum.
    pub patience: Option<usize>,
    /// Samples per inference call when scoring.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_at: 2.0 / 3.0,
            batch_size: 16,
            epochs: 30,
            patience: None,
            eval_chunk: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be positive and lr_decay in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.decay_at > 0.0 && self.decay_at <= 1.0) {
            return bad(format!("decay_at {} outside (0, 1]", self.decay_at));
        }
        if self.eval_chunk == 0 || self.patience == Some(0) {
            return bad("eval_chunk and patience must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` of a run with `epochs` total.
    pub fn rate_at(&self, epoch: usize, epochs: usize) -> f64 {
        let decay_epoch = (epochs as f64 * self.decay_at).floor() as usize;
        if epoch >= decay_epoch.max(1) {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Not persisted so that artifacts stay byte-identical across runs.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss, whose parameters were kept.
    pub selected_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Gathers samples into an `N×C×S×S` input and `N×O×O` target.
pub fn assemble_batch(
    source: &dyn PatchSource,
    ids: &[u64],
    input_shape: [usize; 3],
    output_side: usize,
) -> (Tensor<f32>, Tensor<f32>) {
    let (il, tl) = (source.input_len(), source.target_len());
    let mut input = vec![0.0f32; ids.len() * il];
    let mut target = vec![0.0f32; ids.len() * tl];
    for (k, &id) in ids.iter().enumerate() {
        source.fill(id, &mut input[k * il..(k + 1) * il], &mut target[k * tl..(k + 1) * tl]);
    }
    let n = ids.len();
    let [c, h, w] = input_shape;
    (
        Tensor::new(&[n, c, h, w], input).expect("source sizes match spec"),
        Tensor::new(&[n, output_side, output_side], target).expect("source sizes match spec"),
    )
}

fn check_source(spec: &ArchitectureSpec, source: &dyn PatchSource) -> Result<()> {
    let want = (
        spec.input_channels * spec.input_side * spec.input_side,
        spec.output_pixels(),
    );
    if (source.input_len(), source.target_len()) != want {
        return Err(Error::contract(
            "model",
            format!(
                "samples carry {}+{} values, architecture expects {}+{}",
                source.input_len(),
                source.target_len(),
                want.0,
                want.1
            ),
        ));
    }
    Ok(())
}

/// Infer-mode probability maps for `ids`, in order. Chunks run on the
/// current rayon pool; results do not depend on the thread count.
pub fn predict_ids(
    params: &ModelParams<f32>,
    source: &dyn PatchSource,
    ids: &[u64],
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    check_source(&params.spec, source)?;
    source.require(ids)?;
    let spec = &params.spec;
    let shape = [spec.input_channels, spec.input_side, spec.input_side];
    let per = spec.output_pixels();
    let chunks: Vec<Result<Vec<Vec<f32>>>> = ids
        .par_chunks(chunk.max(1))
        .map(|part| {
            let (x, _) = assemble_batch(source, part, shape, spec.output_side);
            let y = params.predict(&x)?;
            Ok(y.data().chunks(per).map(<[f32]>::to_vec).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Raw per-sample cross-entropy of `ids` under `params`.
pub fn sample_losses(
    params: &ModelParams<f32>,
    source: &dyn PatchSource,
    ids: &[u64],
    chunk: usize,
) -> Result<Vec<f64>> {
    let preds = predict_ids(params, source, ids, chunk)?;
    let mut target = vec![0.0f32; source.target_len()];
    let mut scratch = vec![0.0f32; source.input_len()];
    preds
        .iter()
        .zip(ids)
        .map(|(p, &id)| {
            source.fill(id, &mut scratch, &mut target);
            bce_loss(p, &target)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains with SGD and momentum, keeping the parameters of the epoch with the
/// lowest validation loss. `init` defaults to a fresh build seeded by `seed`.
pub fn train(
    spec: &ArchitectureSpec,
    init: Option<ModelParams<f32>>,
    source: &dyn PatchSource,
    train_ids: &[u64],
    val_ids: &[u64],
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    config.validate()?;
    spec.plan()?;
    check_source(spec, source)?;
    if train_ids.len() < 2 || val_ids.is_empty() {
        return Err(Error::contract(
            "train",
            format!(
                "need at least 2 training and 1 validation sample, got {} and {}",
                train_ids.len(),
                val_ids.len()
            ),
        ));
    }
    source.require(train_ids)?;
    source.require(val_ids)?;
    let mut params = match init {
        Some(p) if &p.spec == spec => p,
        Some(_) => return Err(Error::contract("train", "initial parameters built for another architecture")),
        None => build_model(spec, derive_seed(seed, "init", 0))?,
    };
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }

    let shape = [spec.input_channels, spec.input_side, spec.input_side];
    let mut velocity: BTreeMap<String, Vec<f32>> = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
        .collect();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let momentum = config.momentum as f32;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.rate_at(epoch, config.epochs);
        let mut order = train_ids.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64)));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout", epoch as u64));
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let (x, t) = assemble_batch(source, batch, shape, spec.output_side);
            let mut pass = params.forward(&x, ForwardOptions::train(), &mut dropout_rng)?;
            let loss_var = pass.graph.bce(pass.output, &t)?;
            let loss = f64::from(pass.graph.value(loss_var).data()[0]);
            let diverged = || Error::Diverged { epoch, batch: b, loss };
            if !loss.is_finite() {
                return Err(diverged());
            }
            let grads = pass.graph.backward(loss_var)?;
            for (name, var) in &pass.params {
                let Some(g) = grads.get(*var) else { continue };
                if !g.is_finite() {
                    return Err(diverged());
                }
                let v = velocity.get_mut(name).expect("velocity per parameter");
                let p = params.tensors.get_mut(name).expect("parameter exists");
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vv = momentum * *vv + gv;
                    *pv -= lr as f32 * *vv;
                }
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_loss = mean(&sample_losses(&params, source, val_ids, config.eval_chunk)?);
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(v, _)| val_loss < *v) {
            best = Some((val_loss, params.clone()));
            history.selected_epoch = Some(epoch);
        }
        if let (Some(p), Some(sel)) = (config.patience, history.selected_epoch) {
            if epoch - sel >= p {
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch").1, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_at_two_thirds() {
        let c = TrainConfig::default();
        assert_eq!(c.rate_at(19, 30), 0.01);
        assert!((c.rate_at(20, 30) - 0.001).abs() < 1e-15);
        assert_eq!(c.rate_at(0, 1), 0.01);
    }

    #[test]
    fn batch_size_one_rejected() {
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
