//! Finite-difference checks for every primitive on fixed random inputs.
//!
//! Each primitive output `y` is reduced to the real scalar
//! `Re(Σ conj(c)·y)` with fixed random complex weights `c`, so every output
//! entry contributes a generic, nonzero gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batchnorm::{BnMode, BnStats};
use crate::error::{AutodiffError, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::tape::{BnRunning, Tape, Var};
use crate::tensor::CTensor;
use crate::C64;

/// Step used by the primitive checks.
pub const PRIMITIVE_STEP: f64 = 1e-4;
/// Maximum relative error accepted for a primitive.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "neg",
    "scale",
    "conj",
    "cmul",
    "div",
    "matmul",
    "matmul_batched",
    "hermitian",
    "concat",
    "narrow",
    "reshape",
    "re",
    "exp_i",
    "leaky_relu_real",
    "crelu",
    "sigmoid_real",
    "softmax_real",
    "l2_norm",
    "hermitian_pd_inverse",
    "sum_axis",
    "reduce_sum",
    "reduce_mean",
    "reciprocal",
    "abs_sq",
    "sqrt_real",
    "ln_real",
    "clamp_min_real",
    "diagonal",
    "batch_norm",
    "batch_norm_split",
    "batch_norm_eval",
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    CTensor::new(shape.to_vec(), data).unwrap()
}

/// Entries with magnitude in [0.2, 1.2] and random sign on both parts, so
/// kinks at zero stay far from the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let draw = |rng: &mut ChaCha8Rng| {
        let m: f64 = rng.random_range(0.2..1.2);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    };
    let data = (0..n).map(|_| C64::new(draw(rng), draw(rng))).collect();
    CTensor::new(shape.to_vec(), data).unwrap()
}

fn positive_real(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| C64::new(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)))
        .collect();
    CTensor::new(shape.to_vec(), data).unwrap()
}

/// `Re(Σ conj(weights)·y)`.
fn project(tape: &mut Tape, y: Var, weights: &CTensor) -> Result<Var> {
    let w = tape.constant(weights.conj());
    let prod = tape.cmul(y, w)?;
    let s = tape.sum_all(prod)?;
    tape.re(s)
}

fn check<F>(
    name: &str,
    inputs: Vec<CTensor>,
    out_shape: &[usize],
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = random_tensor(&mut rng, out_shape);
    grad_check(
        name,
        |t, v| {
            let y = f(t, v)?;
            project(t, y, &weights)
        },
        &inputs,
        PRIMITIVE_STEP,
        PRIMITIVE_TOLERANCE,
        None,
    )
}

/// Runs the finite-difference check of one named primitive.
pub fn check_primitive(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match name {
        "add" => check(
            name,
            vec![random_tensor(r, &[2, 3]), random_tensor(r, &[3])],
            &[2, 3],
            seed,
            |t, v| t.add(v[0], v[1]),
        ),
        "sub" => check(
            name,
            vec![random_tensor(r, &[2, 1]), random_tensor(r, &[1, 3])],
            &[2, 3],
            seed,
            |t, v| t.sub(v[0], v[1]),
        ),
        "neg" => check(name, vec![random_tensor(r, &[4])], &[4], seed, |t, v| {
            t.neg(v[0])
        }),
        "scale" => check(name, vec![random_tensor(r, &[4])], &[4], seed, |t, v| {
            t.scale(v[0], C64::new(0.3, -1.7))
        }),
        "conj" => check(name, vec![random_tensor(r, &[4])], &[4], seed, |t, v| {
            t.conj(v[0])
        }),
        "cmul" => check(
            name,
            vec![random_tensor(r, &[3, 3]), random_tensor(r, &[3, 3])],
            &[3, 3],
            seed,
            |t, v| t.cmul(v[0], v[1]),
        ),
        "div" => check(
            name,
            vec![random_tensor(r, &[3]), positive_real(r, &[3])],
            &[3],
            seed,
            |t, v| t.div(v[0], v[1]),
        ),
        "matmul" => check(
            name,
            vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[4, 2])],
            &[2, 3, 2],
            seed,
            |t, v| t.matmul(v[0], v[1]),
        ),
        "matmul_batched" => check(
            name,
            vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[2, 4, 2])],
            &[2, 3, 2],
            seed,
            |t, v| t.matmul(v[0], v[1]),
        ),
        "hermitian" => check(
            name,
            vec![random_tensor(r, &[2, 3, 4])],
            &[2, 4, 3],
            seed,
            |t, v| t.hermitian(v[0]),
        ),
        "concat" => check(
            name,
            vec![random_tensor(r, &[2, 1, 3]), random_tensor(r, &[2, 2, 3])],
            &[2, 3, 3],
            seed,
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        "narrow" => check(
            name,
            vec![random_tensor(r, &[2, 4, 3])],
            &[2, 2, 3],
            seed,
            |t, v| t.narrow(v[0], 1, 1, 2),
        ),
        "reshape" => check(
            name,
            vec![random_tensor(r, &[2, 3])],
            &[3, 2],
            seed,
            |t, v| t.reshape(v[0], &[3, 2]),
        ),
        "re" => check(name, vec![random_tensor(r, &[5])], &[5], seed, |t, v| {
            t.re(v[0])
        }),
        "exp_i" => check(name, vec![random_tensor(r, &[5])], &[5], seed, |t, v| {
            t.exp_i(v[0])
        }),
        "leaky_relu_real" => check(name, vec![away_from_zero(r, &[6])], &[6], seed, |t, v| {
            t.leaky_relu_real(v[0], 0.01)
        }),
        "crelu" => check(name, vec![away_from_zero(r, &[6])], &[6], seed, |t, v| {
            t.crelu(v[0])
        }),
        "sigmoid_real" => check(name, vec![random_tensor(r, &[5])], &[5], seed, |t, v| {
            t.sigmoid_real(v[0])
        }),
        "softmax_real" => check(
            name,
            vec![random_tensor(r, &[2, 4])],
            &[2, 4],
            seed,
            |t, v| t.softmax_real(v[0]),
        ),
        "l2_norm" => check(
            name,
            vec![random_tensor(r, &[2, 3, 2])],
            &[2, 1, 2],
            seed,
            |t, v| t.l2_norm(v[0], 1),
        ),
        "hermitian_pd_inverse" => {
            let a = random_tensor(r, &[2, 3, 3]);
            check(name, vec![a], &[2, 3, 3], seed, |t, v| {
                // (A + A^H)/2 + 3I keeps the argument Hermitian positive definite
                let ah = t.hermitian(v[0])?;
                let s = t.add(v[0], ah)?;
                let s = t.scale_real(s, 0.5)?;
                let shift = t.constant(CTensor::identity(3).map(|z| z * 3.0));
                let s = t.add(s, shift)?;
                t.hermitian_pd_inverse(s)
            })
        }
        "sum_axis" => check(
            name,
            vec![random_tensor(r, &[2, 3, 2])],
            &[2, 1, 2],
            seed,
            |t, v| t.sum_axis(v[0], 1),
        ),
        "reduce_sum" => check(name, vec![random_tensor(r, &[2, 3])], &[], seed, |t, v| {
            t.sum_all(v[0])
        }),
        "reduce_mean" => check(name, vec![random_tensor(r, &[2, 3])], &[], seed, |t, v| {
            t.mean_all(v[0])
        }),
        "reciprocal" => check(name, vec![positive_real(r, &[4])], &[4], seed, |t, v| {
            t.reciprocal(v[0])
        }),
        "abs_sq" => check(name, vec![random_tensor(r, &[4])], &[4], seed, |t, v| {
            t.abs_sq(v[0])
        }),
        "sqrt_real" => check(name, vec![positive_real(r, &[4])], &[4], seed, |t, v| {
            t.sqrt_real(v[0])
        }),
        "ln_real" => check(name, vec![positive_real(r, &[4])], &[4], seed, |t, v| {
            t.ln_real(v[0])
        }),
        "clamp_min_real" => check(name, vec![away_from_zero(r, &[6])], &[6], seed, |t, v| {
            t.clamp_min_real(v[0], 0.0)
        }),
        "diagonal" => check(
            name,
            vec![random_tensor(r, &[2, 3, 3])],
            &[2, 3],
            seed,
            |t, v| t.diagonal(v[0]),
        ),
        "batch_norm" | "batch_norm_split" => {
            let mode = if name == "batch_norm" {
                BnMode::Complex
            } else {
                BnMode::Split
            };
            let inputs = vec![
                random_tensor(r, &[5, 3]),
                random_tensor(r, &[2, 3]),
                random_tensor(r, &[3]),
            ];
            check(name, inputs, &[5, 3], seed, move |t, v| {
                Ok(t.batch_norm(v[0], v[1], v[2], mode, 1e-5, None)?.0)
            })
        }
        "batch_norm_eval" => {
            let stats = BnStats::compute(random_tensor(r, &[6, 3]).data(), 6, 3);
            let inputs = vec![
                random_tensor(r, &[5, 3]),
                random_tensor(r, &[2, 3]),
                random_tensor(r, &[3]),
            ];
            check(name, inputs, &[5, 3], seed, move |t, v| {
                let running = BnRunning {
                    mean: &stats.mean,
                    cov: &stats.cov,
                };
                Ok(
                    t.batch_norm(v[0], v[1], v[2], BnMode::Complex, 1e-5, Some(running))?
                        .0,
                )
            })
        }
        other => Err(AutodiffError::Shape(format!("unknown primitive `{other}`"))),
    }
}

/// Checks every primitive in [`PRIMITIVES`].
pub fn check_all_primitives(seed: u64) -> Result<Vec<GradCheckReport>> {
    PRIMITIVES
        .iter()
        .map(|name| check_primitive(name, seed))
        .collect()
}
