use crate::error::{Error, Result};
use crate::tensor::tape::{BackwardCtx, BackwardRule};
use crate::tensor::{dims4, Real, Tape, Tensor, Var};

use super::conv::conv_output_size;

/// 2×2 average pooling with stride 2.
pub fn avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let xt = tape.value(x);
    let [n, c, h, w] = dims4(xt, "avg_pool")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "avg_pool needs even spatial dimensions, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = xt.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for (p, o) in out.chunks_exact_mut(oh * ow).enumerate() {
        let src = &xd[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                o[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    tape.record("avg_pool", out, &[x], Box::new(AvgPoolRule { h, w }))
}

struct AvgPoolRule {
    h: usize,
    w: usize,
}

impl BackwardRule for AvgPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = vec![0.0; ctx.inputs[0].len()];
        for (p, g) in ctx.grad.chunks_exact(oh * ow).enumerate() {
            let dst = &mut dx[p * h * w..][..h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let v = 0.25 * g[y * ow + x];
                    let i = 2 * y * w + 2 * x;
                    dst[i] = v;
                    dst[i + 1] = v;
                    dst[i + w] = v;
                    dst[i + w + 1] = v;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Square max pooling; padded positions never win.
pub fn max_pool(tape: &mut Tape, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
    let xt = tape.value(x);
    let [n, c, h, w] = dims4(xt, "max_pool")?;
    if pad >= kernel {
        return Err(Error::InvalidShape(format!("max_pool padding {pad} must be below kernel {kernel}")));
    }
    let too_small = || Error::InvalidShape(format!("max_pool: {h}×{w} input smaller than {kernel}×{kernel} window"));
    let oh = conv_output_size(h, kernel, stride, pad).ok_or_else(too_small)?;
    let ow = conv_output_size(w, kernel, stride, pad).ok_or_else(too_small)?;
    let xd = xt.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = Real::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    tape.record("max_pool", out, &[x], Box::new(MaxPoolRule { argmax }))
}

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl BackwardRule for MaxPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let mut dx = vec![0.0; ctx.inputs[0].len()];
        for (&i, &g) in self.argmax.iter().zip(ctx.grad) {
            dx[i] += g;
        }
        vec![Some(dx)]
    }
}

/// Mean over each H×W plane: N×C×H×W → N×C.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let xt = tape.value(x);
    let [n, c, h, w] = dims4(xt, "global_avg_pool")?;
    let plane = h * w;
    let out: Vec<Real> = xt
        .data()
        .chunks_exact(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as Real)
        .collect();
    let out = Tensor::from_parts(vec![n, c], out);
    tape.record("global_avg_pool", out, &[x], Box::new(GlobalPoolRule { plane }))
}

struct GlobalPoolRule {
    plane: usize,
}

impl BackwardRule for GlobalPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let scale = 1.0 / self.plane as Real;
        let dx = ctx
            .grad
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, self.plane))
            .collect();
        vec![Some(dx)]
    }
}

/// Concatenates N×Cᵢ×H×W tensors along the channel axis, in argument order.
pub fn concat_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidShape("concat_channels needs at least one input".into()))?;
    let [n, _, h, w] = dims4(tape.value(*first), "concat_channels")?;
    let mut channels = Vec::with_capacity(xs.len());
    for &x in xs {
        let t = tape.value(x);
        let [n2, c, h2, w2] = dims4(t, "concat_channels")?;
        if (n2, h2, w2) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: tape.value(*first).shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        channels.push(c);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (&x, &c) in xs.iter().zip(&channels) {
            out.extend_from_slice(&tape.value(x).data()[b * c * plane..][..c * plane]);
        }
    }
    let out = Tensor::from_parts(vec![n, total, h, w], out);
    tape.record("concat_channels", out, xs, Box::new(ConcatRule { channels, n, plane }))
}

struct ConcatRule {
    channels: Vec<usize>,
    n: usize,
    plane: usize,
}

impl BackwardRule for ConcatRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if ctx.needs[i] {
                let mut g = Vec::with_capacity(self.n * c * self.plane);
                for b in 0..self.n {
                    g.extend_from_slice(&ctx.grad[(b * total + offset) * self.plane..][..c * self.plane]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }
}
