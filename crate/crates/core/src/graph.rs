//! Affinity graphs on principal coordinates and their Laplacian eigenvectors.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sym_eigen};

/// Weights below this are dropped from Gaussian graphs.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Largest size handled by the dense eigensolver.
pub const DENSE_LIMIT: usize = 2000;
/// Required eigenpair residual.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GraphKind {
    Gaussian { sigma: f64 },
    Knn { k: usize },
}

impl GraphKind {
    pub fn name(&self) -> &'static str {
        match self {
            GraphKind::Gaussian { .. } => "gaussian",
            GraphKind::Knn { .. } => "knn",
        }
    }
}

/// Symmetric non-negative weights in compressed rows, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub n: usize,
    pub kind: GraphKind,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AffinityGraph {
    fn from_rows(kind: GraphKind, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (j, w) in row {
                cols.push(j);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        AffinityGraph {
            n,
            kind,
            row_ptr,
            cols,
            weights,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.weights[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.row(i).map(|(_, w)| w).sum()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Number of connected components, counting edges of positive weight.
    pub fn components(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                for (j, w) in self.row(i) {
                    if w > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    fn check_connected(self) -> Result<Self> {
        let c = self.components();
        if c > 1 {
            return Err(Error::Disconnected { components: c });
        }
        Ok(self)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidSize("graph needs at least one point".into()));
    }
    let q = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != q) {
        return Err(Error::LengthMismatch {
            expected: q,
            actual: p.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graph coordinates"));
    }
    Ok(())
}

/// `W_ij = exp(-|b_i - b_j|^2 / (2 sigma^2))` for `i != j`.
pub fn gaussian_weights(points: &[Vec<f64>], sigma: f64) -> Result<AffinityGraph> {
    check_points(points)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "gaussian bandwidth must be positive, got {sigma}"
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let rows: Vec<Vec<(usize, f64)>> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            (0..points.len())
                .filter(|&j| j != i)
                .filter_map(|j| {
                    // Distances are symmetric bit for bit, so W is too.
                    let w = (-sq_dist(&points[i], &points[j]) / denom).exp();
                    (w >= WEIGHT_FLOOR).then_some((j, w))
                })
                .collect()
        })
        .collect();
    AffinityGraph::from_rows(GraphKind::Gaussian { sigma }, rows).check_connected()
}

/// Indices of the `k` nearest other points, ties going to the smaller index.
pub fn nearest_neighbors(points: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(&points[i], &points[j]), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Unit weight between `i` and `j` when either is among the other's `k`
/// nearest neighbors.
pub fn knn_weights(points: &[Vec<f64>], k: usize) -> Result<AffinityGraph> {
    knn_unchecked(points, k)?.check_connected()
}

fn knn_unchecked(points: &[Vec<f64>], k: usize) -> Result<AffinityGraph> {
    check_points(points)?;
    let n = points.len();
    if k < 1 || k >= n {
        return Err(Error::Config(format!(
            "k must satisfy 1 <= k < n = {n}, got {k}"
        )));
    }
    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| nearest_neighbors(points, i, k))
        .collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            rows[i].push((j, 1.0));
            rows[j].push((i, 1.0));
        }
    }
    for row in rows.iter_mut() {
        row.sort_by_key(|e| e.0);
        row.dedup_by_key(|e| e.0);
    }
    Ok(AffinityGraph::from_rows(GraphKind::Knn { k }, rows))
}

/// `L = I - D^{-1/2} W D^{-1/2}`, stored through the scaled off-diagonal part.
#[derive(Clone, Debug)]
pub struct Laplacian {
    pub n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    /// Entries of `D^{-1/2} W D^{-1/2}`.
    vals: Vec<f64>,
    /// `D^{1/2} 1`, normalized: the null vector.
    pub null_vector: Vec<f64>,
}

pub fn normalized_laplacian(g: &AffinityGraph) -> Result<Laplacian> {
    let deg: Vec<f64> = (0..g.n).map(|i| g.degree(i)).collect();
    if let Some(i) = deg.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::IsolatedNode(i));
    }
    let mut vals = Vec::with_capacity(g.nnz());
    for i in 0..g.n {
        for (j, w) in g.row(i) {
            // Written so that the (i, j) and (j, i) entries agree exactly.
            vals.push(w / (deg[i] * deg[j]).sqrt());
        }
    }
    let mut null_vector: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    let nv = norm(&null_vector);
    null_vector.iter_mut().for_each(|v| *v /= nv);
    Ok(Laplacian {
        n: g.n,
        row_ptr: g.row_ptr.clone(),
        cols: g.cols.clone(),
        vals,
        null_vector,
    })
}

impl Laplacian {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            let s: f64 = self.cols[r.clone()]
                .iter()
                .zip(&self.vals[r])
                .map(|(&j, &a)| a * x[j])
                .sum();
            *yi = x[i] - s;
        });
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        let off = match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        };
        if i == j {
            1.0 - off
        } else {
            -off
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::identity(self.n, self.n);
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[p])] -= self.vals[p];
            }
        }
        m
    }

    pub fn residual(&self, v: &[f64], lambda: f64) -> f64 {
        let mut lv = vec![0.0; self.n];
        self.apply(v, &mut lv);
        lv.iter()
            .zip(v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// The `r` smallest Laplacian eigenpairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBasis {
    /// Ascending.
    pub eigvals: Vec<f64>,
    /// Unit-norm eigenvectors of length `n`.
    pub eigvecs: Vec<Vec<f64>>,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.eigvecs.first().map_or(0, |v| v.len())
    }

    pub fn r(&self) -> usize {
        self.eigvecs.len()
    }

    /// `phi_s^(l)`.
    pub fn phi(&self, s: usize, l: usize) -> f64 {
        self.eigvecs[l][s]
    }

    /// The first `r` eigenpairs.
    pub fn truncated(&self, r: usize) -> SpectralBasis {
        let r = r.min(self.r());
        SpectralBasis {
            eigvals: self.eigvals[..r].to_vec(),
            eigvecs: self.eigvecs[..r].to_vec(),
        }
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.r() {
            for b in a..self.r() {
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot(&self.eigvecs[a], &self.eigvecs[b]) - want).abs());
            }
        }
        worst
    }
}

/// Flips `v` so that its first entry above `1e-9` in magnitude is positive.
pub fn apply_sign_convention(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-9) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn finish(mut pairs: Vec<(f64, Vec<f64>)>, lap: &Laplacian, r: usize) -> Result<SpectralBasis> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.truncate(r);
    let mut out = SpectralBasis {
        eigvals: Vec::with_capacity(r),
        eigvecs: Vec::with_capacity(r),
    };
    for (lambda, mut v) in pairs {
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let res = lap.residual(&v, lambda);
        if !(res <= RESIDUAL_TOL) {
            return Err(Error::EigNoConvergence(format!(
                "eigenpair {} has residual {res:.2e}",
                out.r()
            )));
        }
        apply_sign_convention(&mut v);
        out.eigvals.push(lambda);
        out.eigvecs.push(v);
    }
    Ok(out)
}

fn dense_eigenpairs(lap: &Laplacian, r: usize) -> Result<SpectralBasis> {
    let (vals, vecs) = sym_eigen(&lap.to_dense())?;
    let pairs = (0..r)
        .map(|k| (vals[k], (0..lap.n).map(|i| vecs[(i, k)]).collect()))
        .collect();
    finish(pairs, lap, r)
}

/// Lanczos on `2I - L` with full reorthogonalization and locking.
///
/// Each run works in the complement of the locked vectors and locks its
/// converged leading Ritz pairs. A single Krylov space holds only one copy
/// of a repeated eigenvalue, so runs continue until the best remaining
/// eigenvalue is no smaller than the `r`-th locked one.
fn lanczos_eigenpairs(lap: &Laplacian, r: usize) -> Result<SpectralBasis> {
    let n = lap.n;
    let mut locked: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut run = 0u64;
    while locked.len() < n {
        run += 1;
        let mut start: Vec<f64> = (0..n)
            .map(|i| {
                ((i as f64 + 1.0) * 0.618_033_988_749_895 + run as f64 * 0.414_213_562_373_095)
                    .fract()
                    - 0.5
            })
            .collect();
        let free = n - locked.len();
        let mut dim = (4 * r + 40).min(free);
        let fresh = loop {
            let pairs = lanczos_ritz(lap, &mut start, dim, &locked);
            let converged: Vec<(f64, Vec<f64>)> = pairs
                .iter()
                .take(r)
                .take_while(|(l, v)| lap.residual(v, *l) <= 0.25 * RESIDUAL_TOL)
                .cloned()
                .collect();
            if !converged.is_empty() {
                break converged;
            }
            if dim >= free || pairs.len() < dim {
                // The Krylov space is invariant, so its Ritz pairs are exact.
                break pairs.into_iter().take(r).collect();
            }
            log::debug!("Lanczos with {dim} vectors not converged; growing");
            dim = (dim * 2).min(free);
        };
        if fresh.is_empty() {
            break;
        }
        if locked.len() >= r {
            let mut vals: Vec<f64> = locked.iter().map(|p| p.0).collect();
            vals.sort_by(f64::total_cmp);
            if fresh[0].0 >= vals[r - 1] - 1e-12 {
                break;
            }
        }
        locked.extend(fresh);
    }
    finish(locked, lap, r)
}

/// Ritz pairs of one Lanczos run, smallest Laplacian eigenvalue first.
fn lanczos_ritz(
    lap: &Laplacian,
    start: &mut [f64],
    dim: usize,
    locked: &[(f64, Vec<f64>)],
) -> Vec<(f64, Vec<f64>)> {
    let n = lap.n;
    for _ in 0..2 {
        for (_, v) in locked {
            let c = dot(start, v);
            start.iter_mut().zip(v).for_each(|(s, vi)| *s -= c * vi);
        }
    }
    let (basis, alpha, beta) = lanczos_run(lap, start, dim, locked);
    let m = alpha.len();
    let t = Mat::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let (theta, y) = match sym_eigen(&t) {
        Ok(e) => e,
        Err(_) => return Vec::new(),
    };
    // Largest eigenvalues of 2I - L are the smallest of L.
    (0..m)
        .rev()
        .map(|col| {
            let mut v = vec![0.0; n];
            for (q, b) in basis.iter().enumerate() {
                let c = y[(q, col)];
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi += c * bi);
            }
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            (2.0 - theta[col], v)
        })
        .collect()
}

fn lanczos_run(
    lap: &Laplacian,
    start: &[f64],
    dim: usize,
    locked: &[(f64, Vec<f64>)],
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = lap.n;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut alpha = Vec::with_capacity(dim);
    let mut beta = Vec::with_capacity(dim);
    let nq = norm(start);
    if nq == 0.0 {
        return (basis, alpha, beta);
    }
    let mut q: Vec<f64> = start.iter().map(|v| v / nq).collect();
    let mut w = vec![0.0; n];
    for it in 0..dim {
        lap.apply(&q, &mut w);
        // w = (2I - L) q
        w.iter_mut()
            .zip(&q)
            .for_each(|(wi, qi)| *wi = 2.0 * qi - *wi);
        basis.push(q.clone());
        alpha.push(dot(&w, &q));
        // Two passes of classical Gram-Schmidt against everything kept.
        for _ in 0..2 {
            let against: Vec<&Vec<f64>> = basis.iter().chain(locked.iter().map(|p| &p.1)).collect();
            let coeffs: Vec<f64> = against.par_iter().map(|b| dot(&w, b)).collect();
            for (c, b) in coeffs.iter().zip(&against) {
                w.iter_mut()
                    .zip(b.iter())
                    .for_each(|(wi, bi)| *wi -= c * bi);
            }
        }
        let b = norm(&w);
        if it + 1 == dim || b < 1e-10 {
            break;
        }
        beta.push(b);
        q = w.iter().map(|v| v / b).collect();
    }
    beta.truncate(alpha.len().saturating_sub(1));
    (basis, alpha, beta)
}

/// The `r` smallest eigenpairs, densely for small graphs.
pub fn smallest_eigenpairs(lap: &Laplacian, r: usize) -> Result<SpectralBasis> {
    if r == 0 || r > lap.n {
        return Err(Error::InvalidSize(format!(
            "cannot take {r} eigenpairs of a {}-node graph",
            lap.n
        )));
    }
    if lap.n <= DENSE_LIMIT {
        dense_eigenpairs(lap, r)
    } else {
        lanczos_eigenpairs(lap, r)
    }
}

/// Forces the iterative solver regardless of size.
pub fn smallest_eigenpairs_lanczos(lap: &Laplacian, r: usize) -> Result<SpectralBasis> {
    if r == 0 || r > lap.n {
        return Err(Error::InvalidSize(format!(
            "cannot take {r} eigenpairs of a {}-node graph",
            lap.n
        )));
    }
    lanczos_eigenpairs(lap, r)
}

/// Graph, Laplacian and eigenpairs in one step.
pub fn spectral_embedding(
    points: &[Vec<f64>],
    kind: GraphKind,
    r: usize,
) -> Result<(AffinityGraph, SpectralBasis)> {
    let g = match kind {
        GraphKind::Gaussian { sigma } => gaussian_weights(points, sigma)?,
        GraphKind::Knn { k } => knn_weights(points, k)?,
    };
    let lap = normalized_laplacian(&g)?;
    let basis = smallest_eigenpairs(&lap, r)?;
    Ok((g, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn circle(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect()
    }

    #[test]
    fn gaussian_formula() {
        let s = 0.7;
        let pts = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![s * 2f64.sqrt(), 0.0]];
        let g = gaussian_weights(&pts, s).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
        assert!((g.weight(0, 2) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(g.weight(0, 0), 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.weight(i, j), g.weight(j, i));
            }
        }
    }

    #[test]
    fn gaussian_weights_decay_along_a_circle() {
        let n = 100;
        let g = gaussian_weights(&circle(n), 0.1).unwrap();
        for i in 0..n {
            let near = g.weight(i, (i + 1) % n);
            let next = g.weight(i, (i + 2) % n);
            assert!(near > next);
        }
    }

    #[test]
    fn far_apart_clusters_are_disconnected() {
        let pts = vec![vec![0.0], vec![0.1], vec![100.0], vec![100.1]];
        assert!(matches!(
            gaussian_weights(&pts, 0.1),
            Err(Error::Disconnected { components: 2 })
        ));
        assert!(matches!(
            knn_weights(&pts, 1),
            Err(Error::Disconnected { components: 2 })
        ));
    }

    #[test]
    fn knn_on_collinear_points() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let g = knn_weights(&pts, 1).unwrap();
        let edges: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| g.row(i).map(move |(j, _)| (i, j)))
            .filter(|(i, j)| i < j)
            .collect();
        // Node 1 ties between 0 and 2 and keeps the smaller index.
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_with_all_neighbors_is_complete() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| vec![r.random(), r.random()]).collect();
        let g = knn_weights(&pts, 11).unwrap();
        assert_eq!(g.nnz(), 12 * 11);
    }

    #[test]
    fn knn_on_a_circle_is_cycle_like() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let t: f64 = r.random_range(0.0..2.0 * PI);
                vec![t.cos(), t.sin()]
            })
            .collect();
        // Random points may leave gaps, so connectivity is not required here.
        let g = knn_unchecked(&pts, 2).unwrap();
        for i in 0..200 {
            let deg = g.row(i).count();
            assert!((2..=4).contains(&deg), "node {i} has degree {deg}");
            // Brute-force check of the neighbor lists.
            let mut d: Vec<(f64, usize)> = (0..200)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&pts[i], &pts[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (_, j) in &d[..2] {
                assert_eq!(g.weight(i, *j), 1.0);
            }
        }
    }

    #[test]
    fn complete_graph_spectrum() {
        let pts = vec![vec![0.0], vec![0.0], vec![0.0]];
        let g = gaussian_weights(&pts, 1.0).unwrap();
        let lap = normalized_laplacian(&g).unwrap();
        let b = smallest_eigenpairs(&lap, 3).unwrap();
        let want = [0.0, 1.5, 1.5];
        for k in 0..3 {
            assert!((b.eigvals[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn null_vector_is_sqrt_degree() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![r.random(), r.random(), r.random()])
            .collect();
        let g = knn_weights(&pts, 5).unwrap();
        let lap = normalized_laplacian(&g).unwrap();
        let b = smallest_eigenpairs(&lap, 1).unwrap();
        assert!(b.eigvals[0].abs() <= 1e-10);
        assert!((dot(&b.eigvecs[0], &lap.null_vector).abs() - 1.0).abs() < 1e-10);
        assert!(b.eigvecs[0][0] > 0.0);
    }

    #[test]
    fn isolated_nodes_are_rejected() {
        let g = AffinityGraph::from_rows(
            GraphKind::Knn { k: 1 },
            vec![vec![(1, 1.0)], vec![(0, 1.0)], vec![]],
        );
        assert!(matches!(
            normalized_laplacian(&g),
            Err(Error::IsolatedNode(2))
        ));
    }

    fn cycle_graph(n: usize) -> AffinityGraph {
        let rows = (0..n)
            .map(|i| vec![((i + n - 1) % n, 1.0), ((i + 1) % n, 1.0)])
            .collect();
        AffinityGraph::from_rows(GraphKind::Knn { k: 1 }, rows)
    }

    #[test]
    fn cycle_spectrum_pairs_up() {
        let n = 64;
        let lap = normalized_laplacian(&cycle_graph(n)).unwrap();
        for b in [
            smallest_eigenpairs(&lap, 5).unwrap(),
            smallest_eigenpairs_lanczos(&lap, 5).unwrap(),
        ] {
            assert!((b.eigvals[1] - b.eigvals[2]).abs() < 1e-6);
            assert!((b.eigvals[3] - b.eigvals[4]).abs() < 1e-6);
            for (k, m) in [(1, 1.0), (3, 2.0)] {
                let want = 1.0 - (2.0 * PI * m / n as f64).cos();
                assert!((b.eigvals[k] - want).abs() < 1e-10);
            }
            assert!(b.orthonormality_defect() < 1e-8);
        }
    }

    fn random_graph(n: usize, seed: u64) -> AffinityGraph {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random(), r.random()]).collect();
        gaussian_weights(&pts, 0.15).unwrap()
    }

    /// Eigenvalues by bisection on Sturm sequences of a Householder
    /// tridiagonalization; independent of the library solver.
    fn oracle_eigenvalues(a: &Mat<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)]).collect())
            .collect();
        for k in 0..n.saturating_sub(2) {
            let x: Vec<f64> = (k + 1..n).map(|i| m[i][k]).collect();
            let alpha = -x[0].signum() * norm(&x);
            if alpha == 0.0 {
                continue;
            }
            let mut v = x.clone();
            v[0] -= alpha;
            let vn = norm(&v);
            if vn == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|t| *t /= vn);
            // m <- H m H with H = I - 2 v v^T acting on rows/cols k+1..
            for j in 0..n {
                let s: f64 = (0..v.len()).map(|t| v[t] * m[k + 1 + t][j]).sum();
                for t in 0..v.len() {
                    m[k + 1 + t][j] -= 2.0 * v[t] * s;
                }
            }
            for i in 0..n {
                let s: f64 = (0..v.len()).map(|t| v[t] * m[i][k + 1 + t]).sum();
                for t in 0..v.len() {
                    m[i][k + 1 + t] -= 2.0 * v[t] * s;
                }
            }
        }
        let d: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
        let e: Vec<f64> = (0..n - 1).map(|i| m[i + 1][i]).collect();
        let count_below = |x: f64| {
            let mut c = 0;
            let mut q = d[0] - x;
            if q < 0.0 {
                c += 1;
            }
            for i in 1..n {
                let qq = if q == 0.0 { 1e-300 } else { q };
                q = d[i] - x - e[i - 1] * e[i - 1] / qq;
                if q < 0.0 {
                    c += 1;
                }
            }
            c
        };
        (0..n)
            .map(|k| {
                let (mut lo, mut hi) = (-1.0, 3.0);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if count_below(mid) > k {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect()
    }

    #[test]
    fn eigenvalues_match_a_bisection_oracle() {
        let g = random_graph(200, 4);
        let lap = normalized_laplacian(&g).unwrap();
        let oracle = oracle_eigenvalues(&lap.to_dense());
        assert!(oracle[199] <= 2.0 + 1e-8);
        for b in [
            smallest_eigenpairs(&lap, 8).unwrap(),
            smallest_eigenpairs_lanczos(&lap, 8).unwrap(),
        ] {
            for k in 0..8 {
                assert!(
                    (b.eigvals[k] - oracle[k]).abs() < 1e-7,
                    "{k}: {} vs {}",
                    b.eigvals[k],
                    oracle[k]
                );
            }
            assert!(b.orthonormality_defect() < 1e-8);
            for v in &b.eigvecs {
                let first = v.iter().find(|x| x.abs() > 1e-9).unwrap();
                assert!(*first > 0.0);
            }
        }
    }

    #[test]
    fn laplacian_is_symmetric_with_bounded_spectrum() {
        let g = random_graph(80, 5);
        let lap = normalized_laplacian(&g).unwrap();
        for i in 0..80 {
            for j in 0..80 {
                assert_eq!(lap.entry(i, j), lap.entry(j, i));
            }
        }
        let all = smallest_eigenpairs(&lap, 80).unwrap();
        assert!(all.eigvals[0] >= -1e-12);
        assert!(*all.eigvals.last().unwrap() <= 2.0 + 1e-8);
    }
}
