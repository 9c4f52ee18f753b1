//! Row-major kernels for the small dense shapes the models produce, where
//! general-purpose GEMM packing costs more than the arithmetic.

use ndarray::Array2;

fn rows(x: &Array2<f64>) -> std::borrow::Cow<'_, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Shapes with both inner and output width at least this go to the
/// general GEMM.
const GEMM_MIN: usize = 8;

/// `a · b`.
pub(crate) fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    if k >= GEMM_MIN && n >= GEMM_MIN {
        return a.dot(b);
    }
    let (av, bv) = (rows(a), rows(b));
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            for (oj, bj) in o.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *oj += x * bj;
            }
        }
    }
    Array2::from_shape_vec((m, n), out).expect("product shape")
}

/// `g · bᵀ`.
pub(crate) fn matmul_nt(g: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, n, k) = (g.nrows(), g.ncols(), b.nrows());
    if k >= GEMM_MIN && n >= GEMM_MIN {
        return g.dot(&b.t());
    }
    let (gv, bv) = (rows(g), rows(b));
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gi = &gv[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gi.iter().zip(&bv[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    Array2::from_shape_vec((m, k), out).expect("product shape")
}

/// `aᵀ · g`.
pub(crate) fn matmul_tn(a: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let (m, k, n) = (a.nrows(), a.ncols(), g.ncols());
    if m >= GEMM_MIN && n >= GEMM_MIN {
        return a.t().dot(g);
    }
    let (av, gv) = (rows(a), rows(g));
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gi = &gv[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            for (oj, gj) in out[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *oj += x * gj;
            }
        }
    }
    Array2::from_shape_vec((k, n), out).expect("product shape")
}

/// Each row of `x` scaled by the matching entry of the column `c`.
pub(crate) fn mul_col(x: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    let n = x.ncols();
    let (xv, cv) = (rows(x), rows(c));
    let mut out = Vec::with_capacity(xv.len());
    for (i, &s) in cv.iter().enumerate() {
        out.extend(xv[i * n..(i + 1) * n].iter().map(|v| v * s));
    }
    Array2::from_shape_vec((x.nrows(), n), out).expect("same shape")
}

/// Per-row inner products of `a` and `b`, as a column.
pub(crate) fn row_dots(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.ncols();
    let (av, bv) = (rows(a), rows(b));
    let out: Vec<f64> = (0..a.nrows())
        .map(|i| av[i * n..(i + 1) * n].iter().zip(&bv[i * n..(i + 1) * n]).map(|(x, y)| x * y).sum())
        .collect();
    Array2::from_shape_vec((a.nrows(), 1), out).expect("column")
}
