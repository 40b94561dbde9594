use crate::error::{Error, Result};
use crate::tensor::tape::{BackwardCtx, BackwardRule};
use crate::tensor::{dims4, Real, Tape, Tensor, Var};

use super::Mode;

pub const BN_EPSILON: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.9;

/// Per-channel batch normalization state.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: Real,
    /// Weight kept by the running statistics on each update.
    pub momentum: Real,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    /// Normalizes `x`, registering gamma and beta as tape leaves. In
    /// training mode the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Var, Var)> {
        let g = tape.leaf(self.gamma.clone());
        let b = tape.leaf(self.beta.clone());
        let y = match mode {
            Mode::Training => {
                let (y, stats) = batch_norm_train(tape, x, g, b, self.epsilon)?;
                stats.update_running(&mut self.running_mean, &mut self.running_var, self.momentum);
                y
            }
            Mode::Inference => {
                batch_norm_eval(tape, x, g, b, &self.running_mean, &self.running_var, self.epsilon)?
            }
        };
        Ok((y, g, b))
    }
}

/// Per-channel batch mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl BatchStats {
    /// `running ← momentum·running + (1 − momentum)·batch`
    pub fn update_running(&self, running_mean: &mut Tensor, running_var: &mut Tensor, momentum: Real) {
        for (r, &m) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

fn check_affine(tape: &Tape, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
    let d = dims4(tape.value(x), "batch_norm")?;
    for p in [gamma, beta] {
        if tape.value(p).shape() != [d[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: tape.value(x).shape().to_vec(),
                rhs: tape.value(p).shape().to_vec(),
            });
        }
    }
    Ok(d)
}

fn channel_values(x: &[Real], n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = &Real> {
    (0..n).flat_map(move |b| x[(b * c + ch) * plane..][..plane].iter())
}

/// Training-mode batch normalization using the statistics of this batch.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    epsilon: Real,
) -> Result<(Var, BatchStats)> {
    let [n, c, h, w] = check_affine(tape, x, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(Error::InvalidShape(format!(
            "batch_norm in training mode needs at least 2 values per channel, got {count}"
        )));
    }
    let xd = tape.value(x).data();
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let m = channel_values(xd, n, c, plane, ch).map(|&v| v as f64).sum::<f64>() / count as f64;
        let v = channel_values(xd, n, c, plane, ch)
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / count as f64;
        mean.push(m as Real);
        var.push(v as Real);
    }
    let stats = BatchStats { mean, var };
    let y = normalize(tape, x, gamma, beta, &stats, epsilon, true)?;
    Ok((y, stats))
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: Real,
) -> Result<Var> {
    check_affine(tape, x, gamma, beta)?;
    let stats = BatchStats {
        mean: running_mean.data().to_vec(),
        var: running_var.data().to_vec(),
    };
    normalize(tape, x, gamma, beta, &stats, epsilon, false)
}

fn normalize(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &BatchStats,
    epsilon: Real,
    batch_stats: bool,
) -> Result<Var> {
    let xt = tape.value(x);
    let [n, c, h, w] = dims4(xt, "batch_norm")?;
    let plane = h * w;
    let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
    let inv_std: Vec<Real> = stats.var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; xt.len()];
    let mut out = vec![0.0; xt.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, s, g, bb) = (stats.mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for i in off..off + plane {
                let xh = (xt.data()[i] - m) * s;
                xhat[i] = xh;
                out[i] = g * xh + bb;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, h, w], out);
    let rule = BatchNormRule {
        xhat,
        inv_std,
        dims: [n, c, plane],
        batch_stats,
    };
    tape.record("batch_norm", out, &[x, gamma, beta], Box::new(rule))
}

struct BatchNormRule {
    xhat: Vec<Real>,
    inv_std: Vec<Real>,
    dims: [usize; 3],
    batch_stats: bool,
}

impl BackwardRule for BatchNormRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let [n, c, plane] = self.dims;
        let count = (n * plane) as f64;
        let gamma = ctx.inputs[1].data();
        let dy = ctx.grad;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = ctx.needs[0].then(|| vec![0.0; dy.len()]);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy += dy[i] as f64;
                    sum_dy_xhat += (dy[i] * self.xhat[i]) as f64;
                }
            }
            dgamma[ch] = sum_dy_xhat as Real;
            dbeta[ch] = sum_dy as Real;
            let Some(dx) = dx.as_mut() else { continue };
            let scale = gamma[ch] * self.inv_std[ch];
            if self.batch_stats {
                let mean_dy = (sum_dy / count) as Real;
                let mean_dy_xhat = (sum_dy_xhat / count) as Real;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        dx[i] = scale * (dy[i] - mean_dy - self.xhat[i] * mean_dy_xhat);
                    }
                }
            } else {
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        dx[i] = scale * dy[i];
                    }
                }
            }
        }
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, random_projection, random_tensor};

    fn channel_moments(t: &Tensor, ch: usize) -> (f64, f64) {
        let [n, c, h, w] = dims4(t, "test").unwrap();
        let vals: Vec<f64> = channel_values(t.data(), n, c, h * w, ch).map(|&v| v as f64).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn training_output_is_standardized() {
        let x = random_tensor(&[4, 3, 5, 5], -3.0, 7.0, 5);
        let mut bn = BatchNormParams::new(3);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, _, _) = bn.forward(&mut tape, xv, Mode::Training).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(tape.value(y), ch);
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn affine_parameters_set_mean_and_std() {
        let x = random_tensor(&[2, 2, 4, 4], -1.0, 1.0, 6);
        let mut bn = BatchNormParams::new(2);
        bn.gamma = Tensor::full(&[2], 2.0);
        bn.beta = Tensor::full(&[2], 3.0);
        bn.epsilon = 0.0;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, _, _) = bn.forward(&mut tape, xv, Mode::Training).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(tape.value(y), ch);
            assert!((m - 3.0).abs() < 1e-5);
            assert!((v.sqrt() - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn inference_with_batch_statistics_matches_training() {
        let x = random_tensor(&[3, 2, 3, 3], -2.0, 2.0, 7);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::new(&[2], vec![0.7, 1.3]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![-0.2, 0.4]).unwrap());
        let (train, stats) = batch_norm_train(&mut tape, xv, g, b, BN_EPSILON).unwrap();
        let mean = Tensor::from_vec(stats.mean.clone());
        let var = Tensor::from_vec(stats.var.clone());
        let eval = batch_norm_eval(&mut tape, xv, g, b, &mean, &var, BN_EPSILON).unwrap();
        assert!(tape.value(train).max_abs_diff(tape.value(eval)) < 1e-5);
    }

    #[test]
    fn zero_variance_is_finite() {
        let mut bn = BatchNormParams::new(1);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full(&[2, 1, 2, 2], 4.0));
        let (y, _, _) = bn.forward(&mut tape, xv, Mode::Training).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_statistics_update() {
        let mut bn = BatchNormParams::new(1);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut tape, xv, Mode::Training).unwrap();
        // mean 2, var 1
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-6);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-6);
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_value_batch_is_rejected() {
        let mut bn = BatchNormParams::new(1);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(bn.forward(&mut tape, xv, Mode::Training).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, 8);
        let gamma = random_tensor(&[3], 0.5, 1.5, 9);
        let beta = random_tensor(&[3], -0.5, 0.5, 10);
        let mean = random_tensor(&[3], -0.1, 0.1, 11);
        let var = random_tensor(&[3], 0.5, 1.5, 12);
        for training in [true, false] {
            let run = |t: &mut Tape, xv: Var, gv: Var, bv: Var| -> Result<Var> {
                let y = if training {
                    batch_norm_train(t, xv, gv, bv, BN_EPSILON)?.0
                } else {
                    batch_norm_eval(t, xv, gv, bv, &mean, &var, BN_EPSILON)?
                };
                random_projection(t, y, 4)
            };
            let r = finite_diff_check(
                |t, v| {
                    let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                    run(t, v, g, b)
                },
                &x,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "dx training={training}: {}", r.max_rel_error);
            let r = finite_diff_check(
                |t, v| {
                    let (xv, b) = (t.constant(x.clone()), t.constant(beta.clone()));
                    run(t, xv, v, b)
                },
                &gamma,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "dgamma training={training}: {}", r.max_rel_error);
            let r = finite_diff_check(
                |t, v| {
                    let (xv, g) = (t.constant(x.clone()), t.constant(gamma.clone()));
                    run(t, xv, g, v)
                },
                &beta,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "dbeta training={training}: {}", r.max_rel_error);
        }
    }
}
