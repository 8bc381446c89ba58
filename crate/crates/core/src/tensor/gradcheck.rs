//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step in double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient tolerance for double precision checks.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(eval_with_pattern(f, inputs)?.0)
}

fn eval_with_pattern<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<i8>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok((v.item(), tape.kink_pattern()))
}

/// Reverse-mode gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect())
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for coordinate `i` of input `which`.
pub fn central_difference<F>(f: &F, inputs: &[Tensor<f64>], which: usize, coord: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let x0 = probe[which].data()[coord];
    probe[which].data_mut()[coord] = x0 + h;
    let plus = eval_scalar(f, &probe)?;
    probe[which].data_mut()[coord] = x0 - h;
    let minus = eval_scalar(f, &probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, chosen by a seeded RNG.
    Sample { per_input: usize, seed: u64 },
}

/// Max relative error between reverse-mode and finite-difference gradients
/// over all inputs of a multi-input scalar function.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], h: f64, coverage: Coverage) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sample { per_input, .. }, Some(rng)) if per_input < input.numel() => {
                sample(rng, input.numel(), per_input).into_vec()
            }
            _ => (0..input.numel()).collect(),
        };
        for coord in coords {
            let numeric = central_difference(&f, inputs, which, coord, h)?;
            worst = worst.max(relative_error(analytic[which].data()[coord], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`grad_check_kink_aware`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinkAwareCheck {
    /// Worst relative error over probes that stayed on one linear piece.
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes whose `x ± h` evaluations switched the piece of some relu,
    /// leaky relu, clamp or absolute value, making the central difference
    /// invalid as an oracle.
    pub kink_crossings: usize,
}

/// Like [`grad_check_inputs`], but also reports probes that straddle a kink
/// of a piecewise-linear op. Such probes are excluded from the error.
pub fn grad_check_kink_aware<F>(f: F, inputs: &[Tensor<f64>], h: f64, coverage: Coverage) -> Result<KinkAwareCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let (_, base) = eval_with_pattern(&f, inputs)?;
    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut check = KinkAwareCheck {
        max_rel_error: 0.0,
        probes: 0,
        kink_crossings: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sample { per_input, .. }, Some(rng)) if per_input < input.numel() => {
                sample(rng, input.numel(), per_input).into_vec()
            }
            _ => (0..input.numel()).collect(),
        };
        for coord in coords {
            let x0 = input.data()[coord];
            probe[which].data_mut()[coord] = x0 + h;
            let (plus, p_plus) = eval_with_pattern(&f, &probe)?;
            probe[which].data_mut()[coord] = x0 - h;
            let (minus, p_minus) = eval_with_pattern(&f, &probe)?;
            probe[which].data_mut()[coord] = x0;
            check.probes += 1;
            if p_plus != base || p_minus != base {
                check.kink_crossings += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic[which].data()[coord], numeric));
        }
    }
    Ok(check)
}

/// Single-input convenience form of [`grad_check_inputs`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, Coverage::All)
}

/// Worst error seen for one operator across random configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
    /// Random configurations discarded because a probe crossed a kink.
    pub redrawn: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Uniform values in `±[gap, 1]`, kept away from a kink at zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output element contributes an O(1) gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn small_dims(rng: &mut impl Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(2..5),
        rng.random_range(2..5),
    ]
}

/// Builds `(inputs, function)` for configuration `idx` of operator `name`.
fn op_case(name: &str, rng: &mut ChaCha8Rng, idx: u64) -> (Vec<Tensor<f64>>, CheckFn) {
    let seed = idx;
    let unary = |op: fn(&mut Tape<f64>, Var) -> Var| -> CheckFn {
        Box::new(move |t, v| {
            let y = op(t, v[0]);
            weighted_sum(t, y, seed)
        })
    };
    let dims = small_dims(rng);
    match name {
        "add" | "sub" | "mul" => {
            let a = uniform(rng, &dims, -1.0, 1.0);
            let b = uniform(rng, &dims, -1.0, 1.0);
            let f: CheckFn = match name {
                "add" => Box::new(move |t, v| {
                    let y = t.add(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                }),
                "sub" => Box::new(move |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                }),
                _ => Box::new(move |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                }),
            };
            (vec![a, b], f)
        }
        "affine" => {
            let (s, c) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            let f: CheckFn = Box::new(move |t, v| {
                let y = t.affine(v[0], s, c);
                weighted_sum(t, y, seed)
            });
            (vec![uniform(rng, &dims, -1.0, 1.0)], f)
        }
        "relu" => (vec![away_from_zero(rng, &dims, 0.05)], unary(|t, v| t.relu(v))),
        "leaky_relu" => (vec![away_from_zero(rng, &dims, 0.05)], unary(|t, v| t.leaky_relu(v, 0.2))),
        "tanh" => (vec![uniform(rng, &dims, -2.0, 2.0)], unary(|t, v| t.tanh(v))),
        "sigmoid" => (vec![uniform(rng, &dims, -3.0, 3.0)], unary(|t, v| t.sigmoid(v))),
        "ln" => (vec![uniform(rng, &dims, 0.5, 2.0)], unary(|t, v| t.ln(v))),
        "clamp" => {
            // Values on both sides of the bounds, none within 0.05 of them.
            let x = away_from_zero(rng, &dims, 0.05).data().iter().map(|v| v * 2.0).collect();
            let x = Tensor::new(dims.clone(), x).expect("shape");
            let shifted = x.data().iter().map(|&v| if (v.abs() - 1.0).abs() < 0.05 { v * 0.8 } else { v }).collect();
            let x = Tensor::new(dims.clone(), shifted).expect("shape");
            (vec![x], unary(|t, v| t.clamp(v, -1.0, 1.0)))
        }
        "sum" => (vec![uniform(rng, &dims, -1.0, 1.0)], Box::new(|t, v| {
            let s = t.sum(v[0]);
            Ok(t.affine(s, 1.5, 0.0))
        })),
        "mean" => (vec![uniform(rng, &dims, -1.0, 1.0)], Box::new(|t, v| {
            let s = t.mean(v[0]);
            Ok(t.affine(s, 1.5, 0.0))
        })),
        "abs_mean" => {
            let a = uniform(rng, &dims, -1.0, 1.0);
            let offset = away_from_zero(rng, &dims, 0.1);
            let b_data = a.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect();
            let b = Tensor::new(dims.clone(), b_data).expect("shape");
            (vec![a, b], Box::new(|t, v| t.abs_mean(v[0], v[1])))
        }
        "concat_channels" => {
            let mut other = dims.clone();
            other[1] = rng.random_range(1..4);
            let a = uniform(rng, &dims, -1.0, 1.0);
            let b = uniform(rng, &other, -1.0, 1.0);
            (vec![a, b], Box::new(move |t, v| {
                let y = t.concat_channels(v)?;
                weighted_sum(t, y, seed)
            }))
        }
        "conv2d" | "conv_transpose2d" => {
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..k);
            let (n, c, f) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let lo = if name == "conv2d" { k.max(2) } else { 2 };
            let (h, w) = (rng.random_range(lo..lo + 4), rng.random_range(lo..lo + 4));
            let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let wt = if name == "conv2d" {
                uniform(rng, &[f, c, k, k], -1.0, 1.0)
            } else {
                uniform(rng, &[c, f, k, k], -1.0, 1.0)
            };
            let b = uniform(rng, &[f], -1.0, 1.0);
            let transpose = name == "conv_transpose2d";
            // Transposed outputs can be empty for large pads; shrink pad until valid.
            let pad = if transpose {
                (0..=pad).rev().find(|&p| (h - 1) * stride + k > 2 * p && (w - 1) * stride + k > 2 * p).unwrap_or(0)
            } else {
                pad
            };
            (vec![x, wt, b], Box::new(move |t, v| {
                let y = if transpose {
                    t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)?
                } else {
                    t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?
                };
                weighted_sum(t, y, seed)
            }))
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mut dims = dims;
            dims[0] = rng.random_range(2..4);
            let c = dims[1];
            let x = uniform(rng, &dims, -1.0, 1.0);
            let g = uniform(rng, &[c], 0.5, 1.5);
            let b = uniform(rng, &[c], -0.5, 0.5);
            let running = super::RunningStats {
                mean: uniform(rng, &[c], -0.2, 0.2),
                var: uniform(rng, &[c], 0.5, 1.5),
            };
            let train = name == "batch_norm_train";
            (vec![x, g, b], Box::new(move |t, v| {
                let y = if train {
                    t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
                } else {
                    t.batch_norm_eval(v[0], v[1], v[2], &running, 1e-5)?
                };
                weighted_sum(t, y, seed)
            }))
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Every differentiable tensor operator.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "affine",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "ln",
    "clamp",
    "sum",
    "mean",
    "abs_mean",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "batch_norm_train",
    "batch_norm_eval",
];

/// Checks every operator in [`OPS`] over `configs` random configurations.
pub fn op_suite(seed: u64, configs: usize) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OPS.len());
    for &name in OPS {
        let mut worst = 0.0f64;
        for i in 0..configs {
            let (inputs, f) = op_case(name, &mut rng, seed.wrapping_add(i as u64));
            worst = worst.max(grad_check_inputs(f, &inputs, DEFAULT_STEP, Coverage::All)?);
        }
        out.push(OpCheck {
            name,
            configs,
            max_rel_error: worst,
            redrawn: 0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = grad_check(|t, v| {
            let y = t.affine(v, 3.0, 1.0);
            Ok(t.sum(y))
        }, &x, DEFAULT_STEP)
        .unwrap();
        assert!(err < 1e-9, "linear error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let analytic = [2.0 * 1.01, -0.5 * 1.01];
        let numeric = [2.0, -0.5];
        assert!(max_relative_error(&analytic, &numeric) >= 0.009);
    }

    #[test]
    fn suite_passes_on_a_few_configs() {
        for check in op_suite(3, 5).unwrap() {
            assert!(check.passed(), "{} error {}", check.name, check.max_rel_error);
        }
    }

    #[test]
    fn kink_crossings_are_flagged_not_scored() {
        // 3e-6 sits inside the probe interval around the relu kink.
        let x = Tensor::new(vec![3], vec![3e-6, 0.7, -0.4]).unwrap();
        let check = grad_check_kink_aware(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            DEFAULT_STEP,
            Coverage::All,
        )
        .unwrap();
        assert_eq!(check.probes, 3);
        assert_eq!(check.kink_crossings, 1);
        assert!(check.max_rel_error < 1e-9);
    }
}
