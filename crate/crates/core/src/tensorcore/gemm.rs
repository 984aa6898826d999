//! Thin safe wrappers over `matrixmultiply::dgemm`.
//!
//! The kernel is single-threaded and its summation order for an output
//! element depends only on the shapes, so results are bitwise reproducible.

/// Strided view of a row-major 2-D operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of the same storage.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` row-major `(a.rows, b.cols)`
/// using row stride `ldc`.
pub(crate) fn gemm_into(alpha: f64, a: Mat, b: Mat, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.rs >= 0 && a.cs >= 0 && b.rs >= 0 && b.cs >= 0);
    if k > 0 {
        assert!(a.max_offset() < a.data.len());
        assert!(b.max_offset() < b.data.len());
    }
    assert!((m - 1) * ldc + n <= c.len());
    // SAFETY: every index touched is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Allocate and return `a @ b`.
pub(crate) fn gemm(a: Mat, b: Mat) -> Vec<f64> {
    let mut c = vec![0.0; a.rows * b.cols];
    gemm_into(1.0, a, b, 0.0, &mut c, b.cols);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let c = gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 2));
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);
        // a @ a^T
        let g = gemm(Mat::new(&a, 2, 3), Mat::new(&a, 2, 3).t());
        assert_eq!(g, vec![14.0, 32.0, 32.0, 77.0]);
    }
}
