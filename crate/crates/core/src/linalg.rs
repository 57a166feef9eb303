//! Small dense linear algebra helpers shared by the integrator and the
//! structured KKT solver. Systems here are tiny (state dimension of a model,
//! at most a handful), so an in-place partial-pivot LU beats allocating
//! nalgebra decompositions in the hot loop.

use nalgebra::DMatrix;

/// In-place LU factorization with partial pivoting. Returns `false` if the
/// matrix is numerically singular.
pub fn lu_factor(a: &mut DMatrix<f64>, piv: &mut Vec<usize>) -> bool {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    piv.clear();
    piv.extend(0..n);
    for col in 0..n {
        // pivot search
        let mut p = col;
        let mut pmax = a[(col, col)].abs();
        for r in col + 1..n {
            let v = a[(r, col)].abs();
            if v > pmax {
                pmax = v;
                p = r;
            }
        }
        if !(pmax > 0.0) || !pmax.is_finite() {
            return false;
        }
        if p != col {
            a.swap_rows(p, col);
            piv.swap(p, col);
        }
        let d = a[(col, col)];
        for r in col + 1..n {
            let l = a[(r, col)] / d;
            a[(r, col)] = l;
            for c in col + 1..n {
                let v = a[(col, c)];
                a[(r, c)] -= l * v;
            }
        }
    }
    true
}

/// Solve `LU x = b` in place, `b` is overwritten with the solution.
/// `piv` is the row permutation produced by [`lu_factor`].
pub fn lu_solve(a: &DMatrix<f64>, piv: &[usize], b: &mut [f64]) {
    let n = a.nrows();
    debug_assert_eq!(b.len(), n);
    // apply permutation: piv[i] holds the original index of row i
    let mut xs = vec![0.0; n];
    for i in 0..n {
        xs[i] = b[piv[i]];
    }
    // forward substitution (unit lower)
    for i in 0..n {
        let mut s = xs[i];
        for j in 0..i {
            s -= a[(i, j)] * xs[j];
        }
        xs[i] = s;
    }
    // back substitution
    for i in (0..n).rev() {
        let mut s = xs[i];
        for j in i + 1..n {
            s -= a[(i, j)] * xs[j];
        }
        xs[i] = s / a[(i, i)];
    }
    b.copy_from_slice(&xs);
}

/// Weighted RMS norm: `sqrt(mean((v_i / w_i)^2))`.
pub fn wrms(v: &[f64], w: &[f64]) -> f64 {
    debug_assert_eq!(v.len(), w.len());
    if v.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for (vi, wi) in v.iter().zip(w) {
        let r = vi / wi;
        s += r * r;
    }
    (s / v.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn lu_roundtrip() {
        let a = dmatrix![2.0, 1.0, 1.0; 4.0, -6.0, 0.0; -2.0, 7.0, 2.0];
        let mut f = a.clone();
        let mut piv = Vec::new();
        assert!(lu_factor(&mut f, &mut piv));
        let x_true = [1.0, -2.0, 3.0];
        let b = &a * nalgebra::DVector::from_column_slice(&x_true);
        let mut x = b.as_slice().to_vec();
        lu_solve(&f, &piv, &mut x);
        for (xi, ti) in x.iter().zip(&x_true) {
            assert!((xi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_singular_detected() {
        let mut a = dmatrix![1.0, 2.0; 2.0, 4.0];
        let mut piv = Vec::new();
        assert!(!lu_factor(&mut a, &mut piv));
    }
}
