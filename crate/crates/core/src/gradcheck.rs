//! Finite-difference verification of every differentiable op.
//!
//! [`grad_check`] compares the tape's analytic gradients against central
//! differences at double precision. [`registry`] lists one case per op and
//! loss; [`gradcheck_all`] runs each over several seeds.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::Result;
use crate::ops::{BatchNormConfig, BatchNormStats};
use crate::tensor::Tensor;

/// Maximum relative error accepted by [`gradcheck_all`].
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [11, 23, 37, 41, 59];

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every
/// entry of every input. `f` must map the inputs to a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("inputs require grad")).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// A deliberately broken backward rule, used to confirm the harness notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// ReLU passes the upstream gradient through unchanged, even for negative inputs.
    ReluBackward,
}

type CaseFn = Box<dyn Fn(u64) -> Result<f64>>;

/// One registered gradient check.
pub struct GradCheckCase {
    pub name: &'static str,
    run: CaseFn,
}

impl GradCheckCase {
    fn new(name: &'static str, run: impl Fn(u64) -> Result<f64> + 'static) -> Self {
        Self { name, run: Box::new(run) }
    }

    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Values bounded away from zero so a finite-difference step never crosses a kink.
fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Reduces a tensor-valued op to a scalar with fixed random weights, so every
/// output entry contributes a distinct sensitivity.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(&mut rng, g.value(out).shape(), 1.0);
    g.weighted_sum(out, w)
}

fn relu_pass_through(g: &mut Graph<f64>, x: Var) -> Var {
    let out = g.value(x).map(|v| v.max(0.0));
    g.custom(&[x], out, Box::new(|_, _, grad| vec![grad.to_vec()]))
}

/// Every differentiable op and loss, at shapes no larger than `[2, 4, 4, 3]`
/// (the 3×3 convolution uses `[1, 4, 4, 2]` into 3 channels).
pub fn registry(fault: Option<Fault>) -> Vec<GradCheckCase> {
    let bn = BatchNormConfig::default();
    vec![
        GradCheckCase::new("concat_channels", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 3, 3, 2], 1.0), random(&mut rng, &[2, 3, 3, 3], 1.0)];
            grad_check(
                |g, v| {
                    let y = g.concat_channels(v[0], v[1])?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("conv2d_3x3", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [
                random(&mut rng, &[1, 4, 4, 2], 1.0),
                random(&mut rng, &[3, 3, 2, 3], 0.5),
                random(&mut rng, &[3], 0.5),
            ];
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("conv2d_1x1", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [
                random(&mut rng, &[2, 3, 3, 4], 1.0),
                random(&mut rng, &[1, 1, 4, 3], 0.5),
                random(&mut rng, &[3], 0.5),
            ];
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("conv2d_3x3_stride2", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[1, 3, 3, 2], 1.0), random(&mut rng, &[3, 3, 2, 2], 0.5)];
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("batch_norm_train", move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [
                random(&mut rng, &[2, 3, 3, 4], 2.0),
                random(&mut rng, &[4], 1.5),
                random(&mut rng, &[4], 1.0),
            ];
            grad_check(
                |g, v| {
                    let mut stats = BatchNormStats::new(4);
                    let y = g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, bn)?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("batch_norm_eval", move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [
                random(&mut rng, &[2, 3, 3, 4], 2.0),
                random(&mut rng, &[4], 1.5),
                random(&mut rng, &[4], 1.0),
            ];
            let stats = BatchNormStats {
                mean: random(&mut rng, &[4], 1.0).into_vec(),
                var: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
                updates: 1,
            };
            grad_check(
                |g, v| {
                    let mut stats = stats.clone();
                    let y = g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval, bn)?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("relu", move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random_off_kink(&mut rng, &[2, 4, 4, 3])];
            grad_check(
                |g, v| {
                    let y = match fault {
                        Some(Fault::ReluBackward) => relu_pass_through(g, v[0]),
                        None => g.relu(v[0]),
                    };
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("avg_pool_2x2", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 4, 4, 3], 1.0)];
            grad_check(
                |g, v| {
                    let y = g.avg_pool_2x2(v[0])?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("global_avg_pool", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 4, 4, 3], 1.0)];
            grad_check(
                |g, v| {
                    let y = g.global_avg_pool(v[0])?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("fully_connected", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 5], 1.0), random(&mut rng, &[5, 4], 1.0), random(&mut rng, &[4], 1.0)];
            grad_check(
                |g, v| {
                    let y = g.fully_connected(v[0], v[1], v[2])?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("softmax", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[3, 4], 2.0)];
            grad_check(
                |g, v| {
                    let y = g.softmax(v[0])?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("dropout", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 4, 4, 3], 1.0)];
            grad_check(
                |g, v| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
                    let y = g.dropout(v[0], 0.5, Mode::Train, &mut mask_rng)?;
                    project(g, y, seed)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("cross_entropy", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[4, 4], 2.0)];
            let y = labels(&mut rng, 4, 4);
            grad_check(|g, v| g.softmax_cross_entropy(v[0], &y), &inputs, STEP)
        }),
        GradCheckCase::new("cross_entropy_on_probs", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[4, 4], 2.0)];
            let y = labels(&mut rng, 4, 4);
            grad_check(
                |g, v| {
                    let p = g.softmax(v[0])?;
                    g.cross_entropy(p, &y)
                },
                &inputs,
                STEP,
            )
        }),
        GradCheckCase::new("focal_multiclass", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[4, 4], 2.0)];
            let y = labels(&mut rng, 4, 4);
            grad_check(|g, v| g.softmax_focal(v[0], &y, 0.1, 15.0), &inputs, STEP)
        }),
        GradCheckCase::new("focal_multiclass_gamma2", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[4, 4], 2.0)];
            let y = labels(&mut rng, 4, 4);
            grad_check(|g, v| g.softmax_focal(v[0], &y, 1.0, 2.0), &inputs, STEP)
        }),
        GradCheckCase::new("focal_on_probs", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[4, 4], 2.0)];
            let y = labels(&mut rng, 4, 4);
            grad_check(
                |g, v| {
                    let p = g.softmax(v[0])?;
                    g.focal_multiclass(p, &y, 1.0, 2.0)
                },
                &inputs,
                STEP,
            )
        }),
    ]
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.max_relative_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<26} max_rel_err={:.3e}  {status}", e.name, e.max_relative_error)?;
        }
        write!(
            f,
            "{} ops, {} seeds, tolerance {:.0e}, {:.2}s",
            self.entries.len(),
            self.seeds.len(),
            self.tolerance,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Runs every registered case over `seeds`, keeping the worst error per op.
pub fn gradcheck_all(seeds: &[u64], fault: Option<Fault>) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut entries = Vec::new();
    for case in registry(fault) {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(case.run(seed)?);
        }
        entries.push(GradCheckEntry { name: case.name, max_relative_error: worst });
    }
    Ok(GradCheckReport { entries, seeds: seeds.to_vec(), tolerance: TOLERANCE, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_closure_is_exact() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let w = Tensor::new(&[3], vec![2.0, -0.5, 4.0]).unwrap();
        let err = grad_check(|g, v| g.weighted_sum(v[0], w.clone()), &[x], STEP).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let err = grad_check(
            |g, v| {
                let out = g.value(v[0]).map(|a| a * a);
                // correct rule is 2·x·grad; this one drops the factor of two
                let y = g.custom(&[v[0]], out, Box::new(|ins, _, grad| {
                    vec![ins[0].data().iter().zip(grad).map(|(&a, &d)| a * d).collect()]
                }));
                Ok(g.sum(y))
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn stock_registry_passes() {
        let report = gradcheck_all(&DEFAULT_SEEDS, None).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.entries.len(), registry(None).len());
    }

    #[test]
    fn injected_relu_fault_fails() {
        let report = gradcheck_all(&DEFAULT_SEEDS[..1], Some(Fault::ReluBackward)).unwrap();
        assert!(!report.passed());
        let relu = report.entries.iter().find(|e| e.name == "relu").unwrap();
        assert!(relu.max_relative_error > 1e-2);
    }
}
