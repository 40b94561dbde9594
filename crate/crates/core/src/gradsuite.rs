//! Finite-difference checks of every layer and loss over randomly drawn
//! shapes. Each case checks the gradient of a random projection of the
//! output with respect to each differentiable input in turn.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{center_loss, softmax_cross_entropy, CenterBank, CenterReduction};
use crate::nn::{
    avg_pool, batch_norm_eval, batch_norm_train, concat_channels, conv2d, global_avg_pool, linear, max_pool,
    ConvSpec, BN_EPSILON,
};
use crate::rng::stream_seed;
use crate::tensor::gradcheck::{finite_diff_check, random_projection, random_tensor};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const CASES: &[&str] = &[
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "concat",
    "relu",
    "linear",
    "matmul",
    "dense_layer",
    "softmax_xent",
    "center_loss",
];

/// Relative-error tolerance of the active precision.
pub const TOLERANCE: f64 = if cfg!(feature = "f64") { 1e-6 } else { 1e-3 };
/// Central-difference step of the active precision.
pub const STEP: f64 = if cfg!(feature = "f64") { 1e-5 } else { 1e-2 };

/// One gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub case: &'static str,
    pub input: &'static str,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Shared inputs of one drawn instance; `args[i]` is differentiated while
/// the others stay constant.
type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    args: Vec<(&'static str, Tensor)>,
    /// Output before projection.
    f: Forward,
    step: f64,
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn uniform(shape: &[usize], lo: Real, hi: Real, rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(shape, lo, hi, rng.random())
}

/// Distinct values at least 0.05 apart, so no max-pool window has a near tie.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<Real> = (0..n).map(|i| (i as Real) * 0.05 - n as Real * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("length matches shape")
}

/// Magnitudes in [lo, 1] with random signs.
fn off_zero(shape: &[usize], lo: Real, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: Real = rng.random_range(lo..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).expect("length matches shape")
}

fn draw(case: &str, rng: &mut ChaCha8Rng) -> Instance {
    let step = STEP;
    match case {
        "conv2d" => {
            let (n, c, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let k = *[1, 3].choose(rng).expect("non-empty");
            let spec = ConvSpec::new(dims(rng, 1, 2), dims(rng, 0, k / 2 + 1));
            let (h, w) = (dims(rng, k, 6), dims(rng, k, 6));
            Instance {
                args: vec![
                    ("x", uniform(&[n, c, h, w], -1.0, 1.0, rng)),
                    ("weight", uniform(&[co, c, k, k], -0.5, 0.5, rng)),
                ],
                f: Box::new(move |t, v| conv2d(t, v[0], v[1], spec)),
                step,
            }
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let (n, c, h, w) = (dims(rng, 2, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
            let mean = uniform(&[c], -0.2, 0.2, rng);
            let var = uniform(&[c], 0.5, 1.5, rng);
            let training = case == "batch_norm_train";
            Instance {
                args: vec![
                    ("x", uniform(&[n, c, h, w], -1.0, 1.0, rng)),
                    ("gamma", uniform(&[c], 0.5, 1.5, rng)),
                    ("beta", uniform(&[c], -0.5, 0.5, rng)),
                ],
                f: Box::new(move |t, v| {
                    if training {
                        Ok(batch_norm_train(t, v[0], v[1], v[2], BN_EPSILON)?.0)
                    } else {
                        batch_norm_eval(t, v[0], v[1], v[2], &mean, &var, BN_EPSILON)
                    }
                }),
                step,
            }
        }
        "max_pool" => {
            let (k, stride) = (dims(rng, 2, 3), dims(rng, 1, 2));
            let pad = dims(rng, 0, k / 2);
            let shape = [dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, k, 6), dims(rng, k, 6)];
            Instance {
                args: vec![("x", spaced(&shape, rng))],
                f: Box::new(move |t, v| max_pool(t, v[0], k, stride, pad)),
                step,
            }
        }
        "avg_pool" => {
            let shape = [dims(rng, 1, 2), dims(rng, 1, 3), 2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3)];
            Instance {
                args: vec![("x", uniform(&shape, -1.0, 1.0, rng))],
                f: Box::new(|t, v| avg_pool(t, v[0])),
                step,
            }
        }
        "global_avg_pool" => {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4)];
            Instance {
                args: vec![("x", uniform(&shape, -1.0, 1.0, rng))],
                f: Box::new(|t, v| global_avg_pool(t, v[0])),
                step,
            }
        }
        "concat" => {
            let (n, h, w) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            Instance {
                args: vec![
                    ("first", uniform(&[n, dims(rng, 1, 3), h, w], -1.0, 1.0, rng)),
                    ("second", uniform(&[n, dims(rng, 1, 3), h, w], -1.0, 1.0, rng)),
                    ("third", uniform(&[n, dims(rng, 1, 3), h, w], -1.0, 1.0, rng)),
                ],
                f: Box::new(concat_channels),
                step,
            }
        }
        "relu" => {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4)];
            Instance {
                args: vec![("x", off_zero(&shape, 0.1, rng))],
                f: Box::new(|t, v| t.relu(v[0])),
                step,
            }
        }
        "linear" => {
            let (n, d, c) = (dims(rng, 1, 4), dims(rng, 1, 6), dims(rng, 1, 5));
            Instance {
                args: vec![
                    ("x", uniform(&[n, d], -1.0, 1.0, rng)),
                    ("weight", uniform(&[c, d], -1.0, 1.0, rng)),
                    ("bias", uniform(&[c], -1.0, 1.0, rng)),
                ],
                f: Box::new(|t, v| linear(t, v[0], v[1], v[2])),
                step,
            }
        }
        "matmul" => {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            Instance {
                args: vec![("a", uniform(&[m, k], -1.0, 1.0, rng)), ("b", uniform(&[k, n], -1.0, 1.0, rng))],
                f: Box::new(|t, v| t.matmul(v[0], v[1])),
                step,
            }
        }
        "dense_layer" => {
            // BN-ReLU-1×1 conv to 4k, BN-ReLU-3×3 conv to k, concatenated
            // onto the input, with k = 4 on a 1×8×6×6 input. BN shifts of
            // ±4 keep every ReLU input clear of the kink: half the channels
            // pass through, half are cut off. Bottleneck weights of at least
            // 0.5 in magnitude keep the second normalization well scaled.
            let (c, k) = (8, 4);
            let shifts = |n: usize, rng: &mut ChaCha8Rng| {
                let mut v: Vec<Real> = (0..n).map(|i| if i % 2 == 0 { 4.0 } else { -4.0 }).collect();
                v.shuffle(rng);
                Tensor::new(&[n], v).expect("length matches shape")
            };
            let (b1, b2) = (shifts(c, rng), shifts(4 * k, rng));
            Instance {
                args: vec![
                    ("x", uniform(&[1, c, 6, 6], -1.0, 1.0, rng)),
                    ("bottleneck", off_zero(&[4 * k, c, 1, 1], 0.5, rng)),
                    ("spatial", uniform(&[k, 4 * k, 3, 3], -0.2, 0.2, rng)),
                ],
                f: Box::new(move |t, v| {
                    let (g1, b1) = (t.constant(Tensor::ones(&[c])), t.constant(b1.clone()));
                    let (g2, b2) = (t.constant(Tensor::ones(&[4 * k])), t.constant(b2.clone()));
                    let h = batch_norm_train(t, v[0], g1, b1, BN_EPSILON)?.0;
                    let h = t.relu(h)?;
                    let h = conv2d(t, h, v[1], ConvSpec::new(1, 0))?;
                    let h = batch_norm_train(t, h, g2, b2, BN_EPSILON)?.0;
                    let h = t.relu(h)?;
                    let h = conv2d(t, h, v[2], ConvSpec::new(1, 1))?;
                    concat_channels(t, &[v[0], h])
                }),
                // rounding through two normalizations dominates in 32-bit
                step: if cfg!(feature = "f64") { step } else { 4e-2 },
            }
        }
        "softmax_xent" => {
            let (n, c) = (dims(rng, 1, 5), dims(rng, 2, 7));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            Instance {
                args: vec![("logits", uniform(&[n, c], -2.0, 2.0, rng))],
                f: Box::new(move |t, v| softmax_cross_entropy(t, v[0], &labels)),
                step,
            }
        }
        "center_loss" => {
            let (n, c, d) = (dims(rng, 1, 5), dims(rng, 2, 7), dims(rng, 1, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let centers = uniform(&[c, d], -1.0, 1.0, rng);
            let reduction = if rng.random_bool(0.5) { CenterReduction::Sum } else { CenterReduction::Mean };
            let bank = CenterBank::from_centers(centers, 0.5).expect("valid center shape");
            Instance {
                args: vec![("features", uniform(&[n, d], -1.0, 1.0, rng))],
                f: Box::new(move |t, v| center_loss(t, v[0], &labels, &bank, reduction)),
                step,
            }
        }
        other => unreachable!("unknown case `{other}`"),
    }
}

fn check(case: &'static str, inst: &Instance, which: usize, seed: u64) -> Result<CheckRow> {
    let scalar_out = matches!(case, "softmax_xent" | "center_loss");
    let f = |t: &mut Tape, v: Var| -> Result<Var> {
        let vars: Vec<Var> = inst
            .args
            .iter()
            .enumerate()
            .map(|(i, (_, a))| if i == which { v } else { t.constant(a.clone()) })
            .collect();
        let y = (inst.f)(t, &vars)?;
        if scalar_out {
            Ok(y)
        } else {
            random_projection(t, y, seed)
        }
    };
    let (name, x) = &inst.args[which];
    let r = finite_diff_check(f, x, inst.step, TOLERANCE)?;
    Ok(CheckRow {
        case,
        input: name,
        shape: x.shape().to_vec(),
        max_rel_error: r.max_rel_error,
        tolerance: r.tolerance,
        passed: r.passed,
    })
}

/// Runs `shapes_per_case` random instances of every selected case.
/// `filter` of `None` or `"all"` selects every case.
pub fn run_suite(filter: Option<&str>, seed: u64, shapes_per_case: usize) -> Result<Vec<CheckRow>> {
    let selected: Vec<&'static str> = match filter {
        None | Some("all") => CASES.to_vec(),
        Some(name) => {
            let c = CASES
                .iter()
                .find(|c| **c == name)
                .ok_or_else(|| Error::Config(format!("unknown gradcheck case `{name}`; choose from all, {}", CASES.join(", "))))?;
            vec![*c]
        }
    };
    let mut rows = Vec::new();
    for case in selected {
        let index = CASES.iter().position(|c| *c == case).expect("selected from CASES") as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "gradcheck", index));
        for _ in 0..shapes_per_case {
            let inst = draw(case, &mut rng);
            for which in 0..inst.args.len() {
                rows.push(check(case, &inst, which, rng.random())?);
            }
        }
    }
    Ok(rows)
}

/// Number of distinct input shapes exercised.
pub fn distinct_shapes(rows: &[CheckRow]) -> usize {
    let mut seen: Vec<(&str, &[usize])> = rows.iter().map(|r| (r.case, r.shape.as_slice())).collect();
    seen.sort();
    seen.dedup();
    seen.len()
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<18} {:<10} {:<16} {:>12} {:>10}  result\n", "case", "input", "shape", "rel_error", "tol");
    for r in rows {
        let shape = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let _ = writeln!(
            s,
            "{:<18} {:<10} {:<16} {:>12.3e} {:>10.0e}  {}",
            r.case,
            r.input,
            shape,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            for case in CASES {
                let inst = draw(case, &mut rng);
                let mut t = Tape::new();
                let vars: Vec<Var> = inst.args.iter().map(|(_, a)| t.constant(a.clone())).collect();
                (inst.f)(&mut t, &vars).unwrap_or_else(|e| panic!("{case}: {e}"));
            }
        }
    }

    #[test]
    fn single_case_filter() {
        let rows = run_suite(Some("matmul"), 3, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.case == "matmul" && r.passed));
        assert!(run_suite(Some("softmax"), 3, 1).is_err());
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_suite(Some("conv2d"), 5, 2).unwrap();
        let b = run_suite(Some("conv2d"), 5, 2).unwrap();
        assert_eq!(a, b);
        assert!(format_table(&a).lines().count() == a.len() + 1);
    }
}
