use super::Scalar;

/// Read-only strided matrix view. Strides are in elements.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, rs: isize, cs: isize) -> Self {
        assert!(rs >= 0 && cs >= 0, "MatRef: negative strides are not supported");
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
            assert!(last < data.len(), "MatRef: view exceeds backing slice");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Sub-block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(
            r0 + rows <= self.rows && c0 + cols <= self.cols,
            "MatRef::block out of range"
        );
        if rows == 0 || cols == 0 {
            return Self::new(&[], rows, cols, self.rs, self.cs);
        }
        let offset = r0 * self.rs as usize + c0 * self.cs as usize;
        Self::new(&self.data[offset..], rows, cols, self.rs, self.cs)
    }

    pub fn t(&self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Mutable view whose rows are contiguous (`cs == 1`) with row stride `rs`.
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: isize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize, rs: isize) -> Self {
        assert!(rs >= cols as isize || rows <= 1, "MatMut: rows overlap");
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs as usize + cols - 1;
            assert!(last < data.len(), "MatMut: view exceeds backing slice");
        }
        Self { data, rows, cols, rs }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_mut(self, r0: usize, c0: usize, rows: usize, cols: usize) -> MatMut<'a, T> {
        assert!(
            r0 + rows <= self.rows && c0 + cols <= self.cols,
            "MatMut::block_mut out of range"
        );
        let rs = self.rs;
        if rows == 0 || cols == 0 {
            return MatMut::new(&mut [], rows, cols, rs.max(cols as isize));
        }
        let offset = r0 * rs as usize + c0;
        MatMut::new(&mut self.data[offset..], rows, cols, rs)
    }

    /// Splits into rows `0..r` and `r..`.
    #[cfg(feature = "parallel")]
    fn split_rows(self, r: usize) -> (MatMut<'a, T>, MatMut<'a, T>) {
        debug_assert!(r > 0 && r < self.rows);
        let (top, bottom) = self.data.split_at_mut(r * self.rs as usize);
        (
            MatMut {
                data: top,
                rows: r,
                cols: self.cols,
                rs: self.rs,
            },
            MatMut {
                data: bottom,
                rows: self.rows - r,
                cols: self.cols,
                rs: self.rs,
            },
        )
    }
}

/// Below this many multiply-adds a product stays on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1 << 21;

/// `C ← α·A·B + β·C`.
///
/// Panics on inconsistent shapes. With `β = 0` the previous contents of `C`
/// are never read, so uninitialised or non-finite values there are harmless.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm: inner dimensions differ");
    assert_eq!(a.rows, c.rows, "gemm: output rows differ");
    assert_eq!(b.cols, c.cols, "gemm: output cols differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }

    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        let work = a.rows * a.cols * b.cols;
        if threads > 1 && work >= PARALLEL_THRESHOLD && c.rows >= 2 * 16 {
            let chunk = c.rows.div_ceil(threads).max(16);
            gemm_parallel(alpha, a, b, beta, c, chunk);
            return;
        }
    }

    gemm_serial(alpha, a, b, beta, c);
}

#[cfg(feature = "parallel")]
fn gemm_parallel<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>, chunk: usize) {
    if c.rows <= chunk {
        gemm_serial(alpha, a, b, beta, c);
        return;
    }
    let mid = (c.rows / 2).div_ceil(chunk) * chunk;
    let mid = mid.clamp(1, c.rows - 1);
    let (top, bottom) = c.split_rows(mid);
    let a_top = a.block(0, 0, mid, a.cols);
    let a_bottom = a.block(mid, 0, a.rows - mid, a.cols);
    rayon::join(
        || gemm_parallel(alpha, a_top, b, beta, top, chunk),
        || gemm_parallel(alpha, a_bottom, b, beta, bottom, chunk),
    );
}

fn gemm_serial<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    // SAFETY: MatRef/MatMut constructors bounds-check every view, and `c`
    // is an exclusive borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            c.rows,
            a.cols,
            c.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::super::Matrix;
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|p| a[(i, p)] * b[(p, j)]).sum()
        })
    }

    #[test]
    fn matches_naive_triple_loop() {
        let a = Matrix::<f64>::from_fn(37, 19, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        let b = Matrix::<f64>::from_fn(19, 23, |r, c| ((r * 5 + c) % 13) as f64 * 0.25);
        assert_eq!(a.matmul(&b), naive(&a, &b));
    }

    #[test]
    fn block_views_update_in_place() {
        let a = Matrix::<f64>::identity(2);
        let b = Matrix::<f64>::filled(2, 2, 1.0);
        let mut c = Matrix::<f64>::zeros(4, 4);
        gemm(2.0, a.view(), b.view(), 0.0, c.view_mut().block_mut(1, 2, 2, 2));
        assert_eq!(c.row(0), &[0.0; 4]);
        assert_eq!(c.row(1), &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(c.row(2), &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(c.row(3), &[0.0; 4]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_split_is_bit_identical_to_serial() {
        let a = Matrix::<f32>::from_fn(301, 129, |r, c| ((r * 31 + c * 17) % 97) as f32 / 97.0 - 0.5);
        let b = Matrix::<f32>::from_fn(129, 67, |r, c| ((r * 13 + c * 7) % 89) as f32 / 89.0 - 0.5);
        let mut serial = Matrix::<f32>::zeros(301, 67);
        gemm_serial(1.0, a.view(), b.view(), 0.0, serial.view_mut());
        for chunk in [16, 50, 151] {
            let mut par = Matrix::<f32>::zeros(301, 67);
            gemm_parallel(1.0, a.view(), b.view(), 0.0, par.view_mut(), chunk);
            assert_eq!(par, serial, "chunk {chunk}");
        }
    }
}
