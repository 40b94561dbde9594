//! Layer primitives used by the DenseNet-BC composite function.

mod conv;
mod norm;
mod pool;

pub use conv::{conv2d, conv_output_size, ConvParams, ConvSpec};
pub use norm::{batch_norm_eval, batch_norm_train, BatchNormParams, BatchStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::{avg_pool, concat_channels, global_avg_pool, max_pool};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::gemm::{row_major, transposed};
use crate::tensor::tape::{BackwardCtx, BackwardRule};
use crate::tensor::{gemm, Real, Tape, Tensor, Var};

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.relu(x)
}

/// Fully connected layer: `x[N×d] · weightᵀ + bias`, with `weight` C×d.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xt, wt, bt) = (tape.value(x), tape.value(weight), tape.value(bias));
    let (n, d, c) = match (xt.shape(), wt.shape(), bt.shape()) {
        (&[n, d], &[c, d2], &[c2]) if d == d2 && c == c2 => (n, d, c),
        (xs, ws, _) => {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            })
        }
    };
    let mut out: Vec<Real> = bt.data().iter().copied().cycle().take(n * c).collect();
    gemm(n, d, c, xt.data(), row_major(d), wt.data(), transposed(d), 1.0, &mut out, row_major(c));
    let out = Tensor::from_parts(vec![n, c], out);
    tape.record("linear", out, &[x, weight, bias], Box::new(LinearRule { n, d, c }))
}

struct LinearRule {
    n: usize,
    d: usize,
    c: usize,
}

impl BackwardRule for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let LinearRule { n, d, c } = *self;
        let dy = ctx.grad;
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; n * d];
            gemm(n, c, d, dy, row_major(c), ctx.inputs[1].data(), row_major(d), 0.0, &mut dx, row_major(d));
            dx
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0; c * d];
            gemm(c, n, d, dy, transposed(c), ctx.inputs[0].data(), row_major(d), 0.0, &mut dw, row_major(d));
            dw
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![0.0; c];
            for row in dy.chunks_exact(c) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            db
        });
        vec![dx, dw, db]
    }
}

/// He-normal initialization: samples from N(0, sqrt(2 / fan_in)).
pub fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng) as Real).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, random_projection, random_tensor};

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = relu(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = random_tensor(&[3, 4], -1.0, 1.0, 1);
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::eye(4));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = linear(&mut tape, xv, w, b).unwrap();
        assert!(tape.value(y).bit_eq(&x));

        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::ones(&[2]));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 8.0]);

        let bad = tape.constant(Tensor::ones(&[2, 3]));
        assert!(linear(&mut tape, x, bad, b).is_err());
    }

    #[test]
    fn linear_gradients() {
        let x = random_tensor(&[3, 5], -1.0, 1.0, 2);
        let w = random_tensor(&[4, 5], -1.0, 1.0, 3);
        let b = random_tensor(&[4], -1.0, 1.0, 4);
        let check = |which: usize| {
            let target = [&x, &w, &b][which].clone();
            finite_diff_check(
                |t, v| {
                    let mut vars = [x.clone(), w.clone(), b.clone()].map(|p| t.constant(p));
                    vars[which] = v;
                    let y = linear(t, vars[0], vars[1], vars[2])?;
                    random_projection(t, y, 5)
                },
                &target,
                1e-2,
                1e-3,
            )
            .unwrap()
        };
        for which in 0..3 {
            let r = check(which);
            assert!(r.passed, "input {which}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn he_init_is_seeded_and_scaled() {
        assert!(he_init(&[8, 3, 3, 3], 27, 42).bit_eq(&he_init(&[8, 3, 3, 3], 27, 42)));
        assert!(!he_init(&[16], 4, 1).bit_eq(&he_init(&[16], 4, 2)));

        let t = he_init(&[100_000], 50, 7);
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 50.0).sqrt();
        assert!((std - expected).abs() / expected < 0.05, "std {std}");

        let wide = he_init(&[1000], 1 << 30, 7);
        assert!(wide.data().iter().all(|v| v.abs() < 1e-3));
    }
}
