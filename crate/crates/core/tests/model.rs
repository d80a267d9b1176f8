use std::time::Instant;

use bootseg_autodiff::{GradCheckConfig, Mode, SplitMixRng, Tensor};
use bootseg_core::model::{
    build_model, grad_check_model, train, ArchitectureSpec, Checkpoint, ForwardOptions, ModelParams,
    TrainConfig, Variant,
};
use bootseg_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{corpus_with, separable_corpus};

fn desk_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        stem_filters: 8,
        layers_per_block: 2,
        hidden_width: 64,
        ..ArchitectureSpec::default()
    }
}

/// Counts parameters by walking the layer list by hand.
fn shape_walk_count(s: &ArchitectureSpec) -> usize {
    let mut total = s.stem_filters * s.input_channels * s.stem_kernel * s.stem_kernel;
    let mut c = s.stem_filters;
    let mut side = s.input_side / 2;
    for b in 0..3 {
        for _ in 0..s.layers_per_block {
            total += 2 * c; // batch-norm scale and shift
            total += s.growth_rate * c * 9;
            c += s.growth_rate;
        }
        if b < 2 {
            total += 2 * c + c * c;
            side /= 2;
        }
    }
    total += 2 * c;
    side /= 2;
    let flat = c * side * side;
    total + flat * s.hidden_width + s.hidden_width + s.hidden_width * 576 + 576
}

fn random_batch(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 4, 80, 80], |_| rng.gen_range(-0.5f32..0.5))
}

#[test]
fn parameter_count_matches_shape_walk() {
    for spec in [ArchitectureSpec::default(), desk_spec(), ArchitectureSpec::tiny()] {
        let p = build_model::<f32>(&spec, 1).unwrap();
        assert_eq!(p.parameter_count(), shape_walk_count(&spec), "{spec:?}");
    }
}

#[test]
fn layer_inputs_grow_by_growth_rate() {
    let p = build_model::<f32>(&ArchitectureSpec::default(), 0).unwrap();
    for b in 1..=3 {
        let c0 = p.get(&format!("block{b}.layer1.conv")).shape()[1];
        for l in 1..=4 {
            let k = p.get(&format!("block{b}.layer{l}.conv"));
            assert_eq!(k.shape(), &[12, c0 + (l - 1) * 12, 3, 3]);
        }
    }
    assert_eq!(p.get("block1.layer4.conv").shape()[1], 16 + 3 * 12);
}

#[test]
fn same_seed_same_parameters() {
    let a = build_model::<f32>(&desk_spec(), 5).unwrap();
    let b = build_model::<f32>(&desk_spec(), 5).unwrap();
    let c = build_model::<f32>(&desk_spec(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.tensors, c.tensors);
}

#[test]
fn outputs_are_probabilities_and_infer_is_deterministic() {
    for variant in [Variant::DensenetBs, Variant::BaselineCnn] {
        let spec = ArchitectureSpec { variant, ..desk_spec() };
        let p = build_model::<f32>(&spec, 2).unwrap();
        let x = random_batch(3, 9);
        let y = p.predict(&x).unwrap();
        assert_eq!(y.shape(), &[3, 24, 24]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(y, p.predict(&x).unwrap());
    }
}

#[test]
fn wrong_input_shape_is_contract_error() {
    let p = build_model::<f32>(&desk_spec(), 2).unwrap();
    let err = p.predict(&Tensor::zeros(&[1, 3, 80, 80])).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "{err}");
    assert!(err.to_string().contains("[1, 3, 80, 80]"));
}

#[test]
fn fresh_network_mean_output_is_moderate() {
    let spec = desk_spec();
    let x = random_batch(2, 1);
    let mut outside = Vec::new();
    for seed in 0..100 {
        let p = build_model::<f32>(&spec, seed).unwrap();
        let y = p.predict(&x).unwrap();
        let mean = y.sum() / y.numel() as f32;
        if !(0.2..0.8).contains(&mean) {
            outside.push((seed, mean));
        }
    }
    assert!(outside.is_empty(), "{outside:?}");
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let config = GradCheckConfig {
        tolerance: 1e-3,
        max_coords: Some(6),
        skip_kinks: true,
        ..GradCheckConfig::default()
    };
    for seed in 0..3 {
        let r = grad_check_model(&ArchitectureSpec::tiny(), seed, 2, &config).unwrap();
        assert!(r.passed, "seed {seed}: {r:?}");
        assert!(r.skipped * 5 <= r.checked, "seed {seed}: too many kinks {r:?}");
    }
}

/// Gradient of the first block-1 kernel with and without the skip paths.
fn first_kernel_grad(params: &mut ModelParams<f32>, skips: bool) -> Vec<f32> {
    let x = random_batch(4, 3);
    let t = Tensor::from_fn(&[4, 24, 24], |i| (i % 3 == 0) as u8 as f32);
    let opts = ForwardOptions {
        mode: Mode::Train,
        dense_skips: skips,
    };
    let mut pass = params.forward(&x, opts, &mut SplitMixRng(1)).unwrap();
    let loss = pass.graph.bce(pass.output, &t).unwrap();
    let grads = pass.graph.backward(loss).unwrap();
    let var = pass.params["block1.layer1.conv"];
    grads.get(var).unwrap().data().to_vec()
}

#[test]
fn early_kernels_receive_gradient_through_skip_paths() {
    let spec = ArchitectureSpec {
        dropout: 0.0,
        ..desk_spec()
    };
    let mut p = build_model::<f32>(&spec, 4).unwrap();
    let with = first_kernel_grad(&mut p.clone(), true);
    let without = first_kernel_grad(&mut p, false);
    let norm = |v: &[f32]| v.iter().map(|a| a * a).sum::<f32>().sqrt();
    assert!(norm(&with) > 0.0);
    let diff: Vec<f32> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) > 1e-3 * norm(&with), "skip paths made no difference");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let p = build_model::<f32>(&desk_spec(), 11).unwrap();
    let ck = Checkpoint {
        params: p.clone(),
        history: Default::default(),
        config_hash: "abc".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, ck);
    let x = random_batch(2, 5);
    let (a, b) = (p.predict(&x).unwrap(), back.params.predict(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&path), Err(Error::Format { .. })));
}

/// Four all-building and four empty patches with distinct inputs.
fn smoke_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        batch_size: 4,
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_separable_corpus() {
    let source = separable_corpus();
    let ids = source.ids();
    let started = Instant::now();
    let (params, hist) = train(&desk_spec(), None, &source, &ids, &ids, &smoke_config(30), 1).unwrap();
    let losses = hist.train_losses();
    assert!(losses[0] >= losses[1] && losses[1] >= losses[2], "{losses:?}");
    let final_loss = *losses.last().unwrap();
    assert!(final_loss < 0.05, "final training loss {final_loss}");
    assert!(started.elapsed().as_secs() < 120);
    let sel = hist.selected_epoch.unwrap();
    let min = hist.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(hist.epochs[sel].val_loss, min);
    assert_eq!(params.spec, desk_spec());
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let source = separable_corpus();
    let ids = source.ids();
    let init = build_model::<f32>(&desk_spec(), 3).unwrap();
    let (p, h) = train(&desk_spec(), Some(init.clone()), &source, &ids, &ids, &smoke_config(0), 1).unwrap();
    assert_eq!(p, init);
    assert!(h.epochs.is_empty() && h.selected_epoch.is_none());
}

#[test]
fn training_is_deterministic() {
    let source = separable_corpus();
    let ids = source.ids();
    let run = || train(&desk_spec(), None, &source, &ids, &ids[..2], &smoke_config(2), 8).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha.train_losses(), hb.train_losses());
}

#[test]
fn non_finite_loss_reports_divergence() {
    let source = corpus_with(|s| s[5].input[100] = f32::NAN);
    let ids = source.ids();
    match train(&desk_spec(), None, &source, &ids, &ids, &smoke_config(5), 1) {
        Err(Error::Diverged { epoch, batch, .. }) => {
            let msg = format!("epoch {epoch}, batch {batch}");
            assert!(epoch < 5, "{msg}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h)),
    }
}

#[test]
fn missing_samples_are_listed() {
    let source = separable_corpus();
    let err = train(&desk_spec(), None, &source, &[0, 1, 99], &[2], &smoke_config(1), 1).unwrap_err();
    assert!(matches!(err, Error::MissingSamples(ref v) if v == &vec![99]), "{err}");
}
