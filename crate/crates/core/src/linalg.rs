//! Small dense helpers and ordered parallel reductions.

use rayon::prelude::*;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Relative l2 distance `|a - b| / |b|` (absolute when `b` is zero).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den = norm(b);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Map-reduce over `0..n` in fixed-size chunks.
///
/// Chunks are mapped in parallel and merged left to right, so the result
/// does not depend on how many worker threads run.
pub fn chunked_reduce<T, F, M>(n: usize, chunk: usize, map: F, mut merge: M) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    M: FnMut(&mut T, T),
{
    let chunk = chunk.max(1);
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect();
    let parts: Vec<T> = ranges.into_par_iter().map(map).collect();
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for p in it {
        merge(&mut acc, p);
    }
    Some(acc)
}

/// Element-wise sum of `b` into `a`.
pub fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Pearson correlation of two equally long slices.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Uncentered cosine similarity.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}


/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen(a: &faer::Mat<f64>) -> crate::error::Result<(Vec<f64>, faer::Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| crate::error::Error::EigNoConvergence(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let vals = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Solves `a x = b` for symmetric positive definite `a`; `None` if the
/// Cholesky factorization breaks down.
pub fn cholesky_solve(a: &faer::Mat<f64>, b: &[f64]) -> Option<Vec<f64>> {
    use faer::linalg::solvers::Solve;
    let llt = a.llt(faer::Side::Lower).ok()?;
    let mut rhs = faer::Mat::from_fn(b.len(), 1, |i, _| b[i]);
    llt.solve_in_place(rhs.as_mut());
    let x: Vec<f64> = (0..b.len()).map(|i| rhs[(i, 0)]).collect();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `dst = alpha * lhs * rhs`, or `dst += alpha * lhs * rhs` when `add` is set.
pub fn gemm(
    dst: faer::MatMut<'_, f64>,
    add: bool,
    lhs: faer::MatRef<'_, f64>,
    rhs: faer::MatRef<'_, f64>,
    alpha: f64,
) {
    let accum = if add {
        faer::Accum::Add
    } else {
        faer::Accum::Replace
    };
    faer::linalg::matmul::matmul(dst, accum, lhs, rhs, alpha, faer::Par::Seq);
}
