use super::Real;

/// Strided matrix view: `(row_stride, col_stride)` in elements.
pub type Strides = (isize, isize);

/// `c ← a·b + beta·c` for an `m×k` by `k×n` product.
///
/// Operands are described by their strides so transposed views need no copy.
/// Results are bit-deterministic: the kernel is single-threaded.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    sa: Strides,
    b: &[Real],
    sb: Strides,
    beta: Real,
    c: &mut [Real],
    sc: Strides,
) {
    assert!(fits(a.len(), m, k, sa), "gemm: lhs view out of bounds");
    assert!(fits(b.len(), k, n, sb), "gemm: rhs view out of bounds");
    assert!(fits(c.len(), m, n, sc), "gemm: output view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the three views were bounds-checked above and `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
            c.as_mut_ptr(), sc.0, sc.1,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
            c.as_mut_ptr(), sc.0, sc.1,
        );
    }
}

fn fits(len: usize, rows: usize, cols: usize, s: Strides) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    if s.0 < 0 || s.1 < 0 {
        return false;
    }
    let last = (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize;
    last < len
}

/// Row-major strides of an `rows×cols` matrix.
pub(crate) fn row_major(cols: usize) -> Strides {
    (cols as isize, 1)
}

/// Strides that read a row-major `rows×cols` matrix as its transpose.
pub(crate) fn transposed(cols: usize) -> Strides {
    (1, cols as isize)
}
