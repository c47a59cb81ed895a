//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Strided view of a row-major or transposed matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }
}

fn last_index(rows: usize, cols: usize, s: Strides) -> usize {
    (rows - 1) * s.row + (cols - 1) * s.col
}

/// `c ← alpha · a·b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(m, n, sc) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.row + j * sc.col] *= beta;
            }
        }
        return;
    }
    assert!(last_index(m, k, sa) < a.len(), "gemm: lhs out of bounds");
    assert!(last_index(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, Strides::row_major(2), &b, Strides::row_major(2), 0.0, &mut c, Strides::row_major(2));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, 1.0, &a, Strides::transposed(2), &b, Strides::row_major(2), 0.0, &mut c, Strides::row_major(2));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
