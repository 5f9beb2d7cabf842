//! Strided matrix-multiply kernel shared by the autodiff ops.

/// A read-only strided view of an `rows × cols` matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "strided view exceeds buffer");
        }
    }
}

/// `out = alpha · a·b + beta · out` where `out` is a strided block of `dst`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    dst: &mut [f64],
    offset: usize,
    row_stride: usize,
    col_stride: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let last = offset + (m - 1) * row_stride + (n - 1) * col_stride;
    assert!(last < dst.len(), "gemm output exceeds buffer");
    // SAFETY: every index touched by the kernel was bounds-checked above and
    // `dst` is exclusively borrowed, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            dst.as_mut_ptr().add(offset),
            row_stride as isize,
            col_stride as isize,
        );
    }
}

/// Dense `(m×k)·(k×n)` product into a fresh buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        View::dense(a, m, k),
        View::dense(b, k, n),
        0.0,
        &mut out,
        0,
        n,
        1,
    );
    out
}
