use crate::error::{Error, Result};
use crate::tensor::gemm::{row_major, transposed};
use crate::tensor::tape::{BackwardCtx, BackwardRule};
use crate::tensor::{dims4, gemm, Real, Tape, Tensor, Var};

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }
}

/// Bias-free convolution parameters.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `out_ch × in_ch × kh × kw`
    pub weight: Tensor,
    pub spec: ConvSpec,
}

impl ConvParams {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(self.weight.clone());
        conv2d(tape, x, w, self.spec)
    }
}

/// Output extent of a convolution or pooling window along one axis.
///
/// Windows that would hang over the padded edge are dropped (floor), the
/// usual convention for strided layers.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds input patches into a `(C·kh·kw) × (N·oh·ow)` matrix.
fn im2col(x: &[Real], g: &Geometry) -> Vec<Real> {
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let plane = g.oh * g.ow;
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if sw == 1 && pw == 0 && kx == 0 && g.ow == g.w {
                            dst_line.copy_from_slice(src_row);
                            continue;
                        }
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[Real], g: &Geometry) -> Vec<Real> {
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let plane = g.oh * g.ow;
    let ncols = g.cols();
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation of an N×C×H×W input with an O×C×kh×kw kernel.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, spec: ConvSpec) -> Result<Var> {
    let xt = tape.value(x);
    let wt = tape.value(weight);
    let [n, c, h, w] = dims4(xt, "conv2d")?;
    let [co, ci, kh, kw] = dims4(wt, "conv2d weight")?;
    if c != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xt.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        });
    }
    let too_small = || {
        Error::InvalidShape(format!(
            "conv2d: {h}×{w} input too small for {kh}×{kw} kernel with padding {:?}",
            spec.padding
        ))
    };
    let oh = conv_output_size(h, kh, spec.stride.0, spec.padding.0).ok_or_else(too_small)?;
    let ow = conv_output_size(w, kw, spec.stride.1, spec.padding.1).ok_or_else(too_small)?;
    let g = Geometry { n, c, h, w, kh, kw, oh, ow, spec };

    let cols = im2col(xt.data(), &g);
    let (k, np, plane) = (g.rows(), g.cols(), oh * ow);
    let mut mat = vec![0.0; co * np];
    gemm(co, k, np, wt.data(), row_major(k), &cols, row_major(np), 0.0, &mut mat, row_major(np));

    let mut out = vec![0.0; n * co * plane];
    for o in 0..co {
        for b in 0..n {
            out[(b * co + o) * plane..][..plane].copy_from_slice(&mat[o * np + b * plane..][..plane]);
        }
    }
    let out = Tensor::from_parts(vec![n, co, oh, ow], out);
    tape.record("conv2d", out, &[x, weight], Box::new(ConvRule { g, co }))
}

struct ConvRule {
    g: Geometry,
    co: usize,
}

impl BackwardRule for ConvRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let g = &self.g;
        let co = self.co;
        let (k, np, plane) = (g.rows(), g.cols(), g.oh * g.ow);

        let mut dmat = vec![0.0; co * np];
        for o in 0..co {
            for b in 0..g.n {
                dmat[o * np + b * plane..][..plane]
                    .copy_from_slice(&ctx.grad[(b * co + o) * plane..][..plane]);
            }
        }

        let dw = ctx.needs[1].then(|| {
            let cols = im2col(ctx.inputs[0].data(), g);
            let mut dw = vec![0.0; co * k];
            gemm(co, np, k, &dmat, row_major(np), &cols, transposed(np), 0.0, &mut dw, row_major(k));
            dw
        });
        let dx = ctx.needs[0].then(|| {
            let mut dcols = vec![0.0; k * np];
            gemm(k, co, np, ctx.inputs[1].data(), transposed(k), &dmat, row_major(np), 0.0, &mut dcols, row_major(np));
            col2im(&dcols, g)
        });
        vec![dx, dw]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, random_projection, random_tensor};

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = conv2d(&mut tape, x, w, ConvSpec::new(1, 1)).unwrap();
        #[rustfmt::skip]
        let expected = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expected);
    }

    #[test]
    fn identity_pointwise_kernel_copies_input() {
        let x = random_tensor(&[2, 3, 5, 4], -1.0, 1.0, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap());
        let y = conv2d(&mut tape, xv, w, ConvSpec::new(1, 0)).unwrap();
        assert!(tape.value(y).bit_eq(&x));
    }

    #[test]
    fn rejects_channel_mismatch_and_underflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(conv2d(&mut tape, x, w, ConvSpec::new(1, 1)), Err(Error::ShapeMismatch { .. })));
        let w = tape.constant(Tensor::ones(&[1, 2, 7, 7]));
        assert!(conv2d(&mut tape, x, w, ConvSpec::new(1, 0)).is_err());
    }

    #[test]
    fn output_size_formula_over_architecture_settings() {
        // (input, kernel, stride, pad, expected)
        let cases = [
            (224, 7, 2, 3, 112),
            (64, 7, 2, 3, 32),
            (112, 3, 2, 1, 56),
            (56, 3, 1, 1, 56),
            (56, 1, 1, 0, 56),
            (14, 3, 1, 1, 14),
            (5, 3, 1, 0, 3),
        ];
        for (i, k, s, p, e) in cases {
            assert_eq!(conv_output_size(i, k, s, p), Some(e), "{i} {k} {s} {p}");
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 9, 7]));
        let w = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
        let y = conv2d(&mut tape, x, w, ConvSpec::new(2, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 5, 4]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_tensor(&[1, 2, 5, 5], -1.0, 1.0, 2);
        let w = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, 3);
        for spec in [ConvSpec::new(1, 1), ConvSpec::new(2, 1), ConvSpec::new(1, 0)] {
            let rx = finite_diff_check(
                |t, v| {
                    let wv = t.constant(w.clone());
                    let y = conv2d(t, v, wv, spec)?;
                    random_projection(t, y, 9)
                },
                &x,
                1e-2,
                1e-3,
            )
            .unwrap();
            assert!(rx.passed, "dx {spec:?}: {}", rx.max_rel_error);
            let rw = finite_diff_check(
                |t, v| {
                    let xv = t.constant(x.clone());
                    let y = conv2d(t, xv, v, spec)?;
                    random_projection(t, y, 9)
                },
                &w,
                1e-2,
                1e-3,
            )
            .unwrap();
            assert!(rw.passed, "dw {spec:?}: {}", rw.max_rel_error);
        }
    }
}
