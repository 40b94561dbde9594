//! Central finite-difference checks for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - n| / max(|a|, |n|, 1)` over all elements.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar function `f` at `x` with
/// fourth-order central differences of step `step`:
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// The relative error of each element is measured against
/// `max(|analytic|, |numeric|, 1)`, so gradients near zero are held to an
/// absolute bound.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || step.is_nan() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item()? as f64)
    };

    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; x.len()],
    };

    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = (orig as f64 + offset) as Real;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
        probe.data_mut()[i] = orig;
        numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tolerance: tol,
        passed: max_rel_error <= tol,
    })
}

/// Reduces `v` to the scalar `Σ wᵢ·vᵢ` with fixed pseudo-random weights in
/// [-1, 1]. Checking this projection exercises every output element.
pub fn random_projection(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<Real> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

/// Tensor of the given shape with entries uniform in [lo, hi).
pub fn random_tensor(shape: &[usize], lo: Real, hi: Real, seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares_passes_tightly() {
        let x = random_tensor(&[3, 4], -1.0, 1.0, 3);
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-2,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = random_tensor(&[5], -1.0, 1.0, 4);
        let r = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-3, 1e-6).unwrap();
        assert!(r.passed);
        assert!(r.analytic.iter().all(|&g| g == 0.0));
        assert!(r.numeric.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let x = Tensor::ones(&[2]);
        let err = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.sum(v)?;
                t.scale(s, calls.get() as Real)
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::ones(&[1]);
        assert!(finite_diff_check(|t, v| t.sum(v), &x, 0.0, 1e-3).is_err());
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let a = random_tensor(&[3, 4], -1.0, 1.0, 10);
        let b = random_tensor(&[4, 2], -1.0, 1.0, 11);
        let r = finite_diff_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let p = t.matmul(v, bv)?;
                t.sum(p)
            },
            &a,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }
}
