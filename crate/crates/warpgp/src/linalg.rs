//! Dense helpers: a blocked right-looking Cholesky built on GEMM (the plain
//! column algorithm is several times slower at simulation sizes) and small
//! conveniences shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BLOCK: usize = 192;

/// In-place lower Cholesky factorization. On success the lower triangle of
/// `a` holds `L` (upper triangle zeroed). On failure returns the failing
/// pivot, which bounds the smallest eigenvalue from above.
pub fn cholesky_in_place(a: &mut DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        unblocked_cholesky(a, k, kb)?;
        let n2 = n - k - kb;
        if n2 > 0 {
            // Panel solve: L21 L11' = A21  =>  L11 X = A21', L21 = X'.
            let mut x = a.view((k + kb, k), (n2, kb)).transpose();
            let l11 = a.view((k, k), (kb, kb));
            assert!(l11.solve_lower_triangular_mut(&mut x));
            a.view_mut((k + kb, k), (n2, kb)).copy_from(&x.transpose());
            // Trailing update: A22 -= X' X.
            let mut a22 = a.view_mut((k + kb, k + kb), (n2, n2));
            a22.gemm_tr(-1.0, &x, &x, 1.0);
        }
        k += kb;
    }
    a.fill_upper_triangle(0.0, 1);
    Ok(())
}

fn unblocked_cholesky(a: &mut DMatrix<f64>, offset: usize, size: usize) -> Result<()> {
    for j in offset..offset + size {
        let mut d = a[(j, j)];
        for k in offset..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..offset + size {
            let mut s = a[(i, j)];
            for k in offset..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
    }
    Ok(())
}

/// `L xi` for a lower-triangular factor, used when sampling `z = L xi`.
pub fn lower_triangular_mul(l: &DMatrix<f64>, xi: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut out = DVector::zeros(n);
    for j in 0..n {
        let x = xi[j];
        if x == 0.0 {
            continue;
        }
        for i in j..n {
            out[i] += l[(i, j)] * x;
        }
    }
    out
}

/// Log-determinant of `L L'` from the factor.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}
