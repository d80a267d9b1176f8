//! Reverse-mode vs central-difference gradient comparison.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`. The floor keeps
//! coordinates whose true gradient is (nearly) zero from being judged on
//! floating-point noise alone; they are effectively held to an absolute error
//! of `tolerance * floor`.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check at most this many coordinates per input, chosen deterministically
    /// from `sample_seed`. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub sample_seed: u64,
    /// Skip coordinates whose ±eps evaluations land on a different relu or
    /// max-pool branch than the unperturbed point.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords: None,
            sample_seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a kink.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>], pattern: bool) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let branches = if pattern { g.branch_pattern() } else { Vec::new() };
    Ok((scalar_of(&g, out)?, branches))
}

fn scalar_of(g: &Graph<f64>, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(TensorError::contract(
            "grad_check",
            format!("function must be scalar-valued, got shape {:?}", t.shape()),
        ));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check function".into()));
    }
    Ok(v)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn coords(len: usize, max: Option<usize>, seed: &mut u64) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut picked: Vec<usize> = Vec::with_capacity(m);
            while picked.len() < m {
                let c = (splitmix(seed) % len as u64) as usize;
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Compares the reverse-mode gradient of `f` with respect to each of
/// `points` against central differences.
pub fn grad_check_inputs<F>(f: F, points: &[Tensor<f64>], config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let base_pattern = if config.skip_kinks { g.branch_pattern() } else { Vec::new() };

    let mut skipped = 0;
    let mut seed = config.sample_seed;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[input].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for c in coords(points[input].numel(), config.max_coords, &mut seed) {
            let orig = points[input].data()[c];
            work[input].data_mut()[c] = orig + config.eps;
            let (plus, p_pat) = evaluate(&f, &work, config.skip_kinks)?;
            work[input].data_mut()[c] = orig - config.eps;
            let (minus, m_pat) = evaluate(&f, &work, config.skip_kinks)?;
            work[input].data_mut()[c] = orig;
            if config.skip_kinks && (p_pat != base_pattern || m_pat != base_pattern) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((input, c));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        skipped,
        tolerance: config.tolerance,
        passed: max_rel < config.tolerance,
    })
}

/// Single-input form of [`grad_check_inputs`].
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let config = GradCheckConfig {
        eps,
        tolerance,
        ..GradCheckConfig::default()
    };
    grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(point), &config)
}

struct Sampler(u64);

impl Sampler {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (splitmix(&mut self.0) >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    fn below(&mut self, n: usize) -> usize {
        (splitmix(&mut self.0) % n as u64) as usize
    }

    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    /// Values bounded away from zero, for kinked primitives.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.uniform(0.05, 1.0);
            if self.uniform(0.0, 1.0) < 0.5 {
                -m
            } else {
                m
            }
        })
    }

    /// Pairwise-distinct values (spacing ≥ 1e-2) so pooling has no ties.
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            order.swap(i, j);
        }
        Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - n as f64 * 0.005)
    }
}

/// `sum(weights ⊙ y)` with constant weights, so every output coordinate
/// contributes a distinct amount to the scalar being differentiated.
fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Finite-difference check of every primitive at inputs drawn from `seed`.
/// Shapes vary with the seed. Kinked primitives (relu, max-pool) are checked
/// at points perturbed away from their kinks.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use crate::graph::{Mode, RunningStats};

    let mut s = Sampler(seed ^ 0x5eed_0f_9a_d1);
    let cfg = GradCheckConfig {
        sample_seed: seed,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();

    let (n, c, h, w) = (1 + s.below(2), 1 + s.below(4), 5 + s.below(5), 5 + s.below(5));
    let o = 1 + s.below(6);
    let k = 1 + s.below(3);
    let stride = 1 + s.below(2);
    let pad = s.below(2);
    let x = s.tensor(&[n, c, h, w], -1.0, 1.0);
    let kern = s.tensor(&[o, c, k, k], -1.0, 1.0);
    let geom_out = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kern.clone());
        let y = g.conv2d(xv, kv, stride, pad)?;
        g.value(y).shape().to_vec()
    };
    let wts = s.tensor(&geom_out, -1.0, 1.0);
    out.push((
        "conv2d",
        grad_check_inputs(
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(g, y, &wts)
            },
            &[x, kern],
            &cfg,
        )?,
    ));

    let (n, c, h, w) = (1 + s.below(2), 1 + s.below(3), 2 * (1 + s.below(4)), 2 * (1 + s.below(4)));
    let x = s.distinct(&[n, c, h, w]);
    let wts = s.tensor(&[n, c, h / 2, w / 2], -1.0, 1.0);
    out.push((
        "max_pool2x2",
        grad_check_inputs(
            |g, v| {
                let y = g.max_pool2x2(v[0])?;
                weighted_sum(g, y, &wts)
            },
            &[x.clone()],
            &cfg,
        )?,
    ));
    out.push((
        "avg_pool2x2",
        grad_check_inputs(
            |g, v| {
                let y = g.avg_pool2x2(v[0])?;
                weighted_sum(g, y, &wts)
            },
            &[x],
            &cfg,
        )?,
    ));

    let (n, c, h, w) = (2 + s.below(3), 1 + s.below(3), 2 + s.below(5), 2 + s.below(5));
    let x = s.tensor(&[n, c, h, w], -2.0, 2.0);
    let gamma = s.tensor(&[c], 0.5, 1.5);
    let beta = s.tensor(&[c], -0.5, 0.5);
    let wts = s.tensor(&[n, c, h, w], -1.0, 1.0);
    let running = RunningStats {
        mean: s.tensor(&[c], -0.5, 0.5).into_data(),
        var: s.tensor(&[c], 0.5, 2.0).into_data(),
    };
    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_infer", Mode::Infer)] {
        out.push((
            name,
            grad_check_inputs(
                |g, v| {
                    let mut stats = running.clone();
                    let y = g.batch_norm(v[0], v[1], v[2], mode, &mut stats)?;
                    weighted_sum(g, y, &wts)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                &cfg,
            )?,
        ));
    }

    let shape = [1 + s.below(3), 1 + s.below(3), 1 + s.below(5), 1 + s.below(5)];
    let x = s.away_from_zero(&shape);
    let wts = s.tensor(&shape, -1.0, 1.0);
    out.push((
        "relu",
        grad_check_inputs(
            |g, v| {
                let y = g.relu(v[0])?;
                weighted_sum(g, y, &wts)
            },
            &[x],
            &cfg,
        )?,
    ));
    let x = s.tensor(&shape, -4.0, 4.0);
    out.push((
        "sigmoid",
        grad_check_inputs(
            |g, v| {
                let y = g.sigmoid(v[0])?;
                weighted_sum(g, y, &wts)
            },
            &[x.clone()],
            &cfg,
        )?,
    ));
    let mask_seed = s.below(1 << 30) as u64;
    out.push((
        "dropout",
        grad_check_inputs(
            |g, v| {
                let mut rng = SplitMixRng(mask_seed);
                let y = g.dropout(v[0], 0.3, Mode::Train, &mut rng)?;
                weighted_sum(g, y, &wts)
            },
            &[x.clone()],
            &cfg,
        )?,
    ));
    let new_shape = [shape.iter().product::<usize>()];
    let wflat = wts.reshape(&new_shape)?;
    out.push((
        "reshape",
        grad_check_inputs(
            |g, v| {
                let y = g.reshape(v[0], &new_shape)?;
                weighted_sum(g, y, &wflat)
            },
            &[x.clone()],
            &cfg,
        )?,
    ));
    let factor = s.uniform(-2.0, 2.0);
    out.push((
        "scale",
        grad_check_inputs(
            |g, v| {
                let y = g.scale(v[0], factor)?;
                weighted_sum(g, y, &wts)
            },
            &[x.clone()],
            &cfg,
        )?,
    ));
    let other = s.tensor(&shape, -1.0, 1.0);
    out.push((
        "mul",
        grad_check_inputs(|g, v| {
            let y = g.mul(v[0], v[1])?;
            g.sum(y)
        }, &[x, other], &cfg)?,
    ));

    let (n, h, w) = (1 + s.below(2), 1 + s.below(4), 1 + s.below(4));
    let (ca, cb) = (1 + s.below(4), 1 + s.below(4));
    let a = s.tensor(&[n, ca, h, w], -1.0, 1.0);
    let b = s.tensor(&[n, cb, h, w], -1.0, 1.0);
    let wts = s.tensor(&[n, ca + cb, h, w], -1.0, 1.0);
    out.push((
        "concat_channels",
        grad_check_inputs(
            |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                weighted_sum(g, y, &wts)
            },
            &[a, b],
            &cfg,
        )?,
    ));

    let (n, d, o) = (1 + s.below(3), 1 + s.below(12), 1 + s.below(8));
    let x = s.tensor(&[n, d], -1.0, 1.0);
    let wt = s.tensor(&[d, o], -1.0, 1.0);
    let bias = s.tensor(&[o], -1.0, 1.0);
    let wts = s.tensor(&[n, o], -1.0, 1.0);
    out.push((
        "fully_connected",
        grad_check_inputs(
            |g, v| {
                let y = g.fully_connected(v[0], v[1], v[2])?;
                weighted_sum(g, y, &wts)
            },
            &[x, wt, bias],
            &cfg,
        )?,
    ));

    let shape = [1 + s.below(3), 4 + s.below(8)];
    let pred = s.tensor(&shape, 0.05, 0.95);
    let target = Tensor::from_fn(&shape, |_| if s.uniform(0.0, 1.0) < 0.5 { 0.0 } else { 1.0 });
    out.push((
        "bce",
        grad_check_inputs(|g, v| g.bce(v[0], &target), &[pred], &cfg)?,
    ));

    Ok(out)
}

/// Tiny deterministic RNG so masks can be replayed inside a checked function.
pub struct SplitMixRng(pub u64);

impl rand::RngCore for SplitMixRng {
    fn next_u32(&mut self) -> u32 {
        (splitmix(&mut self.0) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        splitmix(&mut self.0)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let v = splitmix(&mut self.0).to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient_and_zero_error() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0);
        let report = grad_check(|g, v| g.sum(v), &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        let mut g = Graph::new();
        let v = g.param(x);
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_fn(&[2, 2], |i| i as f64);
        assert!(grad_check(|g, v| g.relu(v), &x, 1e-5, 1e-4).is_err());
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let x = Tensor::from_fn(&[2], |_| 1.0);
        let err = grad_check(|g, v| g.scale(v, f64::INFINITY).and_then(|s| g.sum(s)), &x, 1e-5, 1e-4);
        assert!(matches!(err, Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn coordinate_sampling_is_deterministic_and_distinct() {
        let mut a = 7;
        let mut b = 7;
        let ca = coords(1000, Some(20), &mut a);
        assert_eq!(ca, coords(1000, Some(20), &mut b));
        let mut dedup = ca.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 20);
    }

    #[test]
    fn kink_straddling_coordinates_are_skipped() {
        // The middle entry sits 1e-7 from the relu kink, well inside eps.
        let x = Tensor::new(&[3], vec![0.5, 1e-7, -0.4]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let r = g.relu(v[0])?;
            g.sum(r)
        };
        let plain = grad_check_inputs(f, std::slice::from_ref(&x), &GradCheckConfig::default()).unwrap();
        assert!(!plain.passed);
        let config = GradCheckConfig {
            skip_kinks: true,
            ..GradCheckConfig::default()
        };
        let r = grad_check_inputs(f, std::slice::from_ref(&x), &config).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.passed && r.max_rel_error < 1e-9);
    }
}
