//! Strided `f64` matrix products on top of `matrixmultiply`.

use super::Tensor;

/// Describes a (possibly transposed) view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> View<'a> {
    pub fn of(t: &'a Tensor) -> Self {
        View {
            data: t.data(),
            rows: t.rows(),
            cols: t.cols(),
            row_stride: t.cols() as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    /// Rows `[r0, r0 + rows)` and columns `[c0, c0 + cols)` of a row-major matrix.
    pub fn block(t: &'a Tensor, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        assert!(r0 + rows <= t.rows() && c0 + cols <= t.cols());
        View {
            data: &t.data()[(r0 * t.cols() + c0).min(t.data().len())..],
            rows,
            cols,
            row_stride: t.cols() as isize,
            col_stride: 1,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows as isize - 1) * self.row_stride + (self.cols as isize - 1) * self.col_stride;
        assert!(last >= 0 && (last as usize) < self.data.len(), "gemm view out of bounds");
    }
}

/// Mutable destination view.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
}

impl<'a> ViewMut<'a> {
    pub fn of(t: &'a mut Tensor) -> Self {
        let (rows, cols) = t.shape();
        ViewMut { data: t.data_mut(), rows, cols, row_stride: cols as isize }
    }

    pub fn reborrow(&mut self) -> ViewMut<'_> {
        ViewMut { data: &mut *self.data, rows: self.rows, cols: self.cols, row_stride: self.row_stride }
    }

    pub fn block(t: &'a mut Tensor, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        let stride = t.cols();
        assert!(r0 + rows <= t.rows() && c0 + cols <= stride);
        let len = t.data().len();
        ViewMut { data: &mut t.data_mut()[(r0 * stride + c0).min(len)..], rows, cols, row_stride: stride as isize }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let last = (c.rows as isize - 1) * c.row_stride + c.cols as isize - 1;
    assert!((last as usize) < c.data.len(), "gemm destination out of bounds");
    if a.cols == 0 {
        // matrixmultiply handles k = 0, but make beta semantics explicit
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = r * c.row_stride as usize + col;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    gemm(1.0, View::of(a), View::of(b), 0.0, ViewMut::of(&mut out));
    out
}

/// `a * b^T`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.rows());
    gemm(1.0, View::of(a), View::of(b).t(), 0.0, ViewMut::of(&mut out));
    out
}

/// `a^T * b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols(), b.cols());
    gemm(1.0, View::of(a).t(), View::of(b), 0.0, ViewMut::of(&mut out));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn strided_products_match_naive() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap();
        assert!(matmul(&a, &b).max_abs_diff(&naive(&a, &b)) < 1e-14);
        let bt = b.transpose();
        assert!(matmul_nt(&a, &bt).max_abs_diff(&naive(&a, &b)) < 1e-14);
        let at = a.transpose();
        assert!(matmul_tn(&at, &b).max_abs_diff(&naive(&a, &b)) < 1e-14);
    }

    #[test]
    fn column_block_views() {
        let a = Tensor::from_vec(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut out = Tensor::zeros(2, 2);
        gemm(1.0, View::block(&a, 0, 2, 2, 2), View::of(&eye), 0.0, ViewMut::of(&mut out));
        assert_eq!(out.data(), &[2.0, 3.0, 6.0, 7.0]);
    }
}
