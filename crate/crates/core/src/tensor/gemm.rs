//! Bounds-checked wrapper over `matrixmultiply`'s `sgemm` / `dgemm`.

use crate::Real;

#[cfg(feature = "f64")]
use matrixmultiply::dgemm as raw_gemm;
#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as raw_gemm;

/// Strided matrix view: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)`; `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    la: Layout,
    b: &[Real],
    lb: Layout,
    beta: Real,
    c: &mut [Real],
) {
    assert!(a.len() >= la.span(m, k), "gemm: lhs buffer too small");
    assert!(b.len() >= lb.span(k, n), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (it is `&mut`).
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
