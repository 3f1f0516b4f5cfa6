//! Finite-difference verification of the backward pass.
//!
//! Runs in f64 only: at `h = 1e-5` the truncation error of central
//! differences sits far below the acceptance threshold there, which is not
//! true in f32.

use super::Tensor;
use crate::error::Result;
use crate::rng::DeterministicRng;
use crate::Mode;

/// Default central-difference step.
pub const GRADCHECK_H: f64 = 1e-5;

/// Gradient checks pass when the worst resolvable relative error is below this.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Central differences in f64 carry an absolute noise floor of roughly
/// 1e-11 (machine epsilon times loss magnitude over the step). Coordinates
/// whose true gradient is smaller than this floor divided by the target
/// relative tolerance are not resolvable in relative terms, so they are
/// held to [`GRADCHECK_ATOL`] in absolute terms instead.
pub const GRADCHECK_MAG_FLOOR: f64 = 1e-4;

/// Absolute agreement required of coordinates below [`GRADCHECK_MAG_FLOOR`].
pub const GRADCHECK_ATOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    /// Max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over
    /// every coordinate, including unresolvable near-zero-gradient ones.
    pub max_rel_err: f64,
    /// Same ratio restricted to coordinates with gradient magnitude at
    /// least [`GRADCHECK_MAG_FLOOR`]; this is the pass/fail metric.
    pub resolved_rel_err: f64,
    /// Max |analytic - numeric| over the remaining near-zero coordinates.
    pub tiny_abs_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckOutcome {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.resolved_rel_err < rel_tol && self.tiny_abs_err < GRADCHECK_ATOL
    }
}

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` must be a pure function of its inputs: it is re-evaluated twice per
/// input coordinate with that coordinate shifted by ±h. The returned error
/// is `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all
/// coordinates of all inputs.
pub fn gradcheck<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], h: f64) -> Result<GradcheckOutcome>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    gradcheck_skewed(f, inputs, h, 1.0)
}

/// Like [`gradcheck`] but scales the analytic gradients by `skew` first.
/// A skew other than 1 deliberately falsifies the comparison; it exists so
/// the checker itself can be shown to catch wrong gradients.
pub fn gradcheck_skewed<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    skew: f64,
) -> Result<GradcheckOutcome>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::param(shape, data.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();

    let mut out = GradcheckOutcome {
        max_rel_err: 0.0,
        resolved_rel_err: 0.0,
        tiny_abs_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, (_, data)) in inputs.iter().enumerate() {
        for ci in 0..data.len() {
            let eval = |delta: f64| -> Result<f64> {
                let leaves: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(qi, (shape, d))| {
                        let mut shifted = d.clone();
                        if qi == pi {
                            shifted[ci] += delta;
                        }
                        Tensor::from_vec(shape, shifted)
                    })
                    .collect::<Result<_>>()?;
                f(&leaves)?.item()
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic[pi][ci] * skew;
            let mag = a.abs().max(numeric.abs());
            let rel = (a - numeric).abs() / mag.max(1e-8);
            out.max_rel_err = out.max_rel_err.max(rel);
            if mag >= GRADCHECK_MAG_FLOOR {
                if rel > out.resolved_rel_err {
                    out.resolved_rel_err = rel;
                    out.worst_input = pi;
                    out.worst_coord = ci;
                    out.analytic = a;
                    out.numeric = numeric;
                }
            } else {
                out.tiny_abs_err = out.tiny_abs_err.max((a - numeric).abs());
            }
        }
    }
    Ok(out)
}

/// A named gradient check over one op; `run(seed, skew)` returns the
/// finite-difference outcome for a random input set drawn from `seed`.
pub struct OpCheck {
    pub name: &'static str,
    runner: fn(u64, f64) -> Result<GradcheckOutcome>,
}

impl OpCheck {
    pub fn run(&self, seed: u64, skew: f64) -> Result<GradcheckOutcome> {
        (self.runner)(seed, skew)
    }
}

fn rand_vec(rng: &mut DeterministicRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect()
}

fn weights(rng: &mut DeterministicRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rand_vec(rng, n)).expect("weight shape")
}

macro_rules! op_check {
    ($name:literal, $inputs:expr, $body:expr) => {
        OpCheck {
            name: $name,
            runner: |seed: u64, skew: f64| {
                let mut rng = DeterministicRng::new(seed.wrapping_mul(0x9E37).wrapping_add(1));
                let inputs: Vec<(Vec<usize>, Vec<f64>)> = $inputs(&mut rng)
                    .into_iter()
                    .map(|shape: Vec<usize>| {
                        let n = shape.iter().product();
                        let data = rand_vec(&mut rng, n);
                        (shape, data)
                    })
                    .collect();
                let f = $body(&mut rng, seed);
                gradcheck_skewed(f, &inputs, GRADCHECK_H, skew)
            },
        }
    };
}

/// Every differentiable op, each wrapped into a scalar loss through a fixed
/// random weighting so no gradient component is trivially uniform.
pub fn op_checks() -> Vec<OpCheck> {
    vec![
        op_check!(
            "add",
            |_rng: &mut DeterministicRng| vec![vec![3, 4], vec![3, 4]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 4]);
                move |xs: &[Tensor<f64>]| xs[0].add(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "sub",
            |_rng: &mut DeterministicRng| vec![vec![3, 4], vec![3, 4]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 4]);
                move |xs: &[Tensor<f64>]| xs[0].sub(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "mul",
            |_rng: &mut DeterministicRng| vec![vec![2, 5], vec![2, 5]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[2, 5]);
                move |xs: &[Tensor<f64>]| xs[0].mul(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "scale",
            |_rng: &mut DeterministicRng| vec![vec![4, 3]],
            |rng: &mut DeterministicRng, _| {
                let c = rng.uniform_in(-2.0, 2.0);
                let w = weights(rng, &[4, 3]);
                move |xs: &[Tensor<f64>]| xs[0].scale(c).mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "add_bias",
            |_rng: &mut DeterministicRng| vec![vec![3, 5], vec![5]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 5]);
                move |xs: &[Tensor<f64>]| xs[0].add_bias(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "matmul",
            |_rng: &mut DeterministicRng| vec![vec![3, 4], vec![4, 2]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 2]);
                move |xs: &[Tensor<f64>]| xs[0].matmul(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "matmul_batched",
            |_rng: &mut DeterministicRng| vec![vec![2, 3, 4], vec![2, 4, 2]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[2, 3, 2]);
                move |xs: &[Tensor<f64>]| xs[0].matmul(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "matmul_shared_rhs",
            |_rng: &mut DeterministicRng| vec![vec![2, 3, 4], vec![4, 5]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[2, 3, 5]);
                move |xs: &[Tensor<f64>]| xs[0].matmul(&xs[1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "permute",
            |_rng: &mut DeterministicRng| vec![vec![2, 3, 4]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[4, 2, 3]);
                move |xs: &[Tensor<f64>]| xs[0].permute(&[2, 0, 1])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "reshape",
            |_rng: &mut DeterministicRng| vec![vec![3, 4]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[2, 6]);
                move |xs: &[Tensor<f64>]| xs[0].reshape(&[2, 6])?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "concat_last",
            |_rng: &mut DeterministicRng| vec![vec![3, 2], vec![3, 1], vec![3, 3]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 6]);
                move |xs: &[Tensor<f64>]| {
                    crate::tensor::concat_last(xs)?.mul(&w).map(|t| t.sum_all())
                }
            }
        ),
        op_check!(
            "stack",
            |_rng: &mut DeterministicRng| vec![vec![2, 3], vec![2, 3]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[2, 2, 3]);
                move |xs: &[Tensor<f64>]| crate::tensor::stack(xs)?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "select_axis",
            |_rng: &mut DeterministicRng| vec![vec![3, 4, 2]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 2]);
                move |xs: &[Tensor<f64>]| xs[0].select_axis(1, 2)?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "softmax_last",
            |_rng: &mut DeterministicRng| vec![vec![3, 5]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 5]);
                move |xs: &[Tensor<f64>]| xs[0].softmax_last()?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "log_softmax_last",
            |_rng: &mut DeterministicRng| vec![vec![3, 5]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[3, 5]);
                move |xs: &[Tensor<f64>]| xs[0].log_softmax_last()?.mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "layer_norm",
            |_rng: &mut DeterministicRng| vec![vec![4, 6], vec![6], vec![6]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[4, 6]);
                move |xs: &[Tensor<f64>]| {
                    xs[0]
                        .layer_norm(&xs[1], &xs[2], 1e-5)?
                        .mul(&w)
                        .map(|t| t.sum_all())
                }
            }
        ),
        op_check!(
            "gelu",
            |_rng: &mut DeterministicRng| vec![vec![4, 4]],
            |rng: &mut DeterministicRng, _| {
                let w = weights(rng, &[4, 4]);
                move |xs: &[Tensor<f64>]| xs[0].gelu().mul(&w).map(|t| t.sum_all())
            }
        ),
        op_check!(
            "sum_all",
            |_rng: &mut DeterministicRng| vec![vec![3, 3]],
            |_rng: &mut DeterministicRng, _| |xs: &[Tensor<f64>]| Ok(xs[0].sum_all())
        ),
        op_check!(
            "dropout",
            |_rng: &mut DeterministicRng| vec![vec![6, 6]],
            |rng: &mut DeterministicRng, seed: u64| {
                let w = weights(rng, &[6, 6]);
                // Reseeding per evaluation fixes the mask, keeping f pure.
                move |xs: &[Tensor<f64>]| {
                    let mut mask_rng = DeterministicRng::with_stream(seed, 0xD80);
                    crate::tensor::dropout(&xs[0], 0.3, Mode::Train, &mut mask_rng)?
                        .mul(&w)
                        .map(|t| t.sum_all())
                }
            }
        ),
    ]
}
