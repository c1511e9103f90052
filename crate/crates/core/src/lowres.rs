//! Covariance estimation on downsampled data and principal coordinates.
//!
//! On an `m`-voxel grid `P_s^T P_s = B_s B_s^T`, where the columns of `B_s`
//! are the real and imaginary parts of the Fourier exponentials sampled by
//! image `s`, weighted by the filter. Everything below works with these
//! explicit factors; at desk scale a dense `d x d` covariance fits in memory.

use faer::{Mat, MatMut, MatRef};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::cg::{self, CgOptions, CgReport};
use crate::error::{Error, Result};
use crate::fourier::{dft_forward, dft_inverse_real, FourierGrid};
use crate::grid::{Field, Grid, Image, Volume};
use crate::imaging::{ImagingOperator, SliceLayout};
use crate::linalg::{self, cholesky_solve, chunked_reduce, gemm, sym_eigen};
use crate::simulate::Dataset;

/// Relative ridge added to the mean normal equations.
pub const MEAN_RIDGE: f64 = 1e-6;
/// Relative ridge added to the covariance normal equations.
pub const COV_RIDGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LowResDataset {
    /// Grid size after downsampling.
    pub n: usize,
    /// Grid size of the source dataset.
    pub source_n: usize,
    pub images: Vec<Field>,
    pub operators: Vec<ImagingOperator>,
    pub use_projections: bool,
    pub sigma2: f64,
    pub noise_var: Vec<f64>,
}

impl LowResDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn volume_grid(&self) -> Grid {
        if self.use_projections {
            Grid::volume(self.n)
        } else {
            self.images
                .first()
                .map(|y| y.grid)
                .unwrap_or(Grid::volume(self.n))
        }
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidSize("dataset has no images".into()));
        }
        if self.operators.len() != self.len() || self.noise_var.len() != self.len() {
            return Err(Error::SizeMismatch(format!(
                "{} images, {} operators, {} noise variances",
                self.len(),
                self.operators.len(),
                self.noise_var.len()
            )));
        }
        let g = if self.use_projections {
            Grid::image(self.n)
        } else {
            self.volume_grid()
        };
        for y in &self.images {
            y.grid.check_same(&g)?;
        }
        Ok(())
    }
}

/// Keeps the central `m^d` frequencies, scaled so constants are preserved.
pub fn fourier_crop(f: &Field, m: usize) -> Result<Field> {
    let src_grid = f.grid;
    if m == 0 || m > src_grid.n {
        return Err(Error::InvalidSize(format!(
            "cannot crop {} samples to {m}",
            src_grid.n
        )));
    }
    if m == src_grid.n {
        return Ok(f.clone());
    }
    let dim = src_grid.dim;
    let g = Grid::new(m, dim)?;
    let src = dft_forward(f);
    let scale = (m as f64 / src_grid.n as f64).powi(dim as i32);
    let mut dst = FourierGrid::zeros(g);
    for lin in 0..g.len() {
        let j = g.freq_at(lin);
        let mut idx = [0usize; 3];
        for a in 0..dim {
            idx[a] = src_grid
                .freq_pos(j[a])
                .expect("cropped frequency inside source grid");
        }
        dst.data[lin] = src.data[src_grid.index(&idx[..dim])] * scale;
    }
    // The real part splits the unpaired -m/2 line evenly between +-m/2.
    Ok(dft_inverse_real(&dst).0)
}

/// Zero-pads the spectrum up to `n` samples per axis; inverse of the crop on
/// fields band-limited to the smaller grid.
pub fn fourier_pad(f: &Field, n: usize) -> Result<Field> {
    let src_grid = f.grid;
    if n < src_grid.n {
        return Err(Error::InvalidSize(format!(
            "cannot pad {} samples to {n}",
            src_grid.n
        )));
    }
    if n == src_grid.n {
        return Ok(f.clone());
    }
    let dim = src_grid.dim;
    let g = Grid::new(n, dim)?;
    let src = dft_forward(f);
    let scale = (n as f64 / src_grid.n as f64).powi(dim as i32);
    let mut dst = FourierGrid::zeros(g);
    for lin in 0..src_grid.len() {
        let j = src_grid.freq_at(lin);
        let mut idx = [0usize; 3];
        for a in 0..dim {
            idx[a] = g
                .freq_pos(j[a])
                .expect("padded frequency inside target grid");
        }
        dst.data[g.index(&idx[..dim])] = src.data[lin] * scale;
    }
    Ok(dft_inverse_real(&dst).0)
}

/// Fourier-crops every observation to `m` samples per axis.
///
/// The noise variance shrinks by the retained fraction of frequencies and
/// CTFs keep their physical frequency scale.
pub fn downsample(ds: &Dataset, m: usize) -> Result<LowResDataset> {
    if m == 0 || m > ds.n || m % 2 != 0 {
        return Err(Error::InvalidSize(format!(
            "downsampled size {m} must be even and at most {}",
            ds.n
        )));
    }
    let images = ds
        .images
        .par_iter()
        .map(|y| fourier_crop(y, m))
        .collect::<Result<Vec<_>>>()?;
    let dim = ds.image_grid().dim;
    let frac = (m as f64 / ds.n as f64).powi(dim as i32);
    let operators = ds
        .operators
        .iter()
        .map(|op| ImagingOperator::new(op.rotation, op.ctf.rescaled(ds.n, m)))
        .collect();
    Ok(LowResDataset {
        n: m,
        source_n: ds.n,
        images,
        operators,
        use_projections: ds.use_projections,
        sigma2: ds.sigma2 * frac,
        noise_var: ds.noise_var.iter().map(|v| v * frac).collect(),
    })
}

/// Orthonormal coordinates for volumes: the voxels themselves, or the real
/// Fourier modes strictly inside the ball that image slices can sample.
///
/// Components outside that ball never reach an image, so solving for them
/// only amplifies interpolation leakage.
#[derive(Clone, Debug)]
pub struct Basis {
    pub grid: Grid,
    band: Option<Band>,
}

#[derive(Clone, Debug)]
struct Band {
    /// Half-ball frequency indices, DC first; each non-DC mode owns a cosine
    /// and a sine column.
    modes: Vec<[i64; 3]>,
    /// `d x r` with orthonormal columns.
    matrix: Mat<f64>,
}

impl Basis {
    pub fn voxels(grid: Grid) -> Self {
        Basis { grid, band: None }
    }

    pub fn band_limited(grid: Grid) -> Self {
        let d = grid.len();
        let h = grid.n as f64 / 2.0;
        let mut modes: Vec<[i64; 3]> = vec![[0; 3]];
        for lin in 0..d {
            let j = grid.freq_at(lin);
            let r2: i64 = j.iter().map(|v| v * v).sum();
            if let Some(a) = j.iter().rposition(|&v| v != 0) {
                if j[a] > 0 && (r2 as f64) < h * h {
                    modes.push(j);
                }
            }
        }
        let mut matrix = Mat::zeros(d, 2 * modes.len() - 1);
        let tau = 2.0 * std::f64::consts::PI;
        let c0 = (1.0 / d as f64).sqrt();
        let c1 = (2.0 / d as f64).sqrt();
        for lin in 0..d {
            let idx = grid.unravel(lin);
            matrix[(lin, 0)] = c0;
            for (k, j) in modes.iter().enumerate().skip(1) {
                let phase: f64 = (0..grid.dim)
                    .map(|a| tau * 0.5 * j[a] as f64 * grid.coord(idx[a]))
                    .sum();
                matrix[(lin, 2 * k - 1)] = c1 * phase.cos();
                matrix[(lin, 2 * k)] = c1 * phase.sin();
            }
        }
        Basis {
            grid,
            band: Some(Band { modes, matrix }),
        }
    }

    pub fn dim(&self) -> usize {
        self.band
            .as_ref()
            .map_or(self.grid.len(), |b| b.matrix.ncols())
    }

    pub fn is_voxels(&self) -> bool {
        self.band.is_none()
    }

    /// `U^T v`.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        match &self.band {
            None => v.to_vec(),
            Some(b) => (0..b.matrix.ncols())
                .map(|k| linalg::dot(b.matrix.col_as_slice(k), v))
                .collect(),
        }
    }

    /// `U c` as a volume.
    pub fn synthesize(&self, c: &[f64]) -> Volume {
        match &self.band {
            None => Field {
                grid: self.grid,
                data: c.to_vec(),
            },
            Some(b) => {
                let mut data = vec![0.0; self.grid.len()];
                for (k, &ck) in c.iter().enumerate() {
                    linalg::axpy(&mut data, ck, b.matrix.col_as_slice(k));
                }
                Field {
                    grid: self.grid,
                    data,
                }
            }
        }
    }
}

/// `(m/N) sum_i exp(2 pi i t u_i)` over the `N` source-grid coordinates.
fn dirichlet(t: f64, source_n: usize, m: usize) -> Complex64 {
    let nn = source_n as f64;
    let theta = 2.0 * std::f64::consts::PI * t;
    let scale = m as f64 / nn;
    let half = theta / nn;
    if half.sin().abs() < 1e-9 {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..source_n {
            acc += Complex64::from_polar(1.0, theta * (-1.0 + 2.0 * i as f64 / nn));
        }
        return acc * scale;
    }
    // Geometric series: e^{-i theta} (1 - e^{2 i theta}) / (1 - e^{2 i theta / N}).
    let num = Complex64::from_polar(1.0, -theta)
        * (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, 2.0 * theta));
    let den = Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, 2.0 * half);
    num / den * scale
}

/// Per-image factors of the normal operators.
///
/// Image `s` has real coordinates `z_s` (cosine and sine parts of its disk
/// Fourier coefficients, orthonormally scaled) and `P_s v = B_s^T v` in
/// those coordinates. In the band basis the factors are built from
/// source-grid sums, so the model is "pad to the source grid, project,
/// crop", which band-limited volumes satisfy exactly.
struct Factors {
    n: usize,
    source_n: usize,
    layout: SliceLayout,
    ops: Vec<ImagingOperator>,
}

impl Factors {
    fn new(lds: &LowResDataset) -> Self {
        Factors {
            n: lds.n,
            source_n: lds.source_n.max(lds.n),
            layout: SliceLayout::new(lds.n),
            ops: lds.operators.clone(),
        }
    }

    fn ncols(&self) -> usize {
        2 * self.layout.len() - 1
    }

    fn weights(&self, s: usize) -> (Vec<f64>, Vec<f64>) {
        let h = self.layout.filter(&self.ops[s]);
        let w = h
            .iter()
            .zip(&self.layout.mult)
            .map(|(hk, mk)| hk.abs() * mk.sqrt() / self.n as f64)
            .collect();
        (h, w)
    }

    /// Coordinates `z` of an image, so that `P^T y = B z`.
    fn image_coords(&self, s: usize, y: &Image) -> Vec<f64> {
        let f = dft_forward(y);
        let (h, _) = self.weights(s);
        let mut z = vec![0.0; self.ncols()];
        let inv = 1.0 / self.n as f64;
        for k in 0..self.layout.len() {
            let sgn = if h[k] > 0.0 {
                1.0
            } else if h[k] < 0.0 {
                -1.0
            } else {
                0.0
            };
            let c = sgn * self.layout.mult[k].sqrt() * inv;
            let v = f.data[self.layout.pos[k]];
            if k == 0 {
                z[0] = c * v.re;
            } else {
                z[2 * k - 1] = c * v.re;
                z[2 * k] = -c * v.im;
            }
        }
        z
    }

    /// Voxel-basis `B_s` on the downsampled grid (`d x ncols`).
    fn fill_voxels(&self, s: usize, mut dst: MatMut<'_, f64>) {
        let n = self.n;
        let grid = Grid::volume(n);
        let pts = self.layout.points(&self.ops[s].rotation);
        let (_, w) = self.weights(s);
        let coords: Vec<f64> = (0..n).map(|i| grid.coord(i)).collect();
        let tau = 2.0 * std::f64::consts::PI;
        for (k, xi) in pts.iter().enumerate() {
            if k == 0 {
                for r in 0..grid.len() {
                    dst[(r, 0)] = w[0];
                }
                continue;
            }
            let ph: Vec<Vec<Complex64>> = xi
                .iter()
                .map(|&x| {
                    coords
                        .iter()
                        .map(|&u| Complex64::from_polar(1.0, tau * x * u))
                        .collect()
                })
                .collect();
            let mut r = 0;
            for i2 in 0..n {
                for i1 in 0..n {
                    let z12 = ph[1][i1] * ph[2][i2];
                    for z0 in &ph[0] {
                        let z = z0 * z12;
                        dst[(r, 2 * k - 1)] = w[k] * z.re;
                        dst[(r, 2 * k)] = w[k] * z.im;
                        r += 1;
                    }
                }
            }
        }
    }

    /// Band-basis `U^T B_s` (`r x ncols`) from separable source-grid sums.
    fn fill_band(&self, s: usize, band: &Band, d: usize, mut dst: MatMut<'_, f64>) {
        let m = self.n;
        let pts = self.layout.points(&self.ops[s].rotation);
        let (_, w) = self.weights(s);
        let c0 = (1.0 / d as f64).sqrt();
        let c1 = (2.0 / d as f64).sqrt();
        let off = (m / 2) as i64;
        let span = 2 * off as usize + 1;
        for (col, xi) in pts.iter().enumerate() {
            // plus[a][j + off] = D(xi_a + j/2), minus likewise with xi_a - j/2.
            let mut plus = [
                vec![Complex64::new(0.0, 0.0); span],
                vec![Complex64::new(0.0, 0.0); span],
                vec![Complex64::new(0.0, 0.0); span],
            ];
            let mut minus = plus.clone();
            for a in 0..3 {
                for jj in 0..span {
                    let kappa = (jj as i64 - off) as f64 / 2.0;
                    plus[a][jj] = dirichlet(xi[a] + kappa, self.source_n, m);
                    minus[a][jj] = dirichlet(xi[a] - kappa, self.source_n, m);
                }
            }
            for (row, j) in band.modes.iter().enumerate() {
                let ix = [
                    (j[0] + off) as usize,
                    (j[1] + off) as usize,
                    (j[2] + off) as usize,
                ];
                let sp = plus[0][ix[0]] * plus[1][ix[1]] * plus[2][ix[2]];
                let sm = minus[0][ix[0]] * minus[1][ix[1]] * minus[2][ix[2]];
                if row == 0 {
                    // cos(0) = 1: both sums coincide.
                    if col == 0 {
                        dst[(0, 0)] = c0 * w[0] * sp.re;
                    } else {
                        dst[(0, 2 * col - 1)] = c0 * w[col] * sp.re;
                        dst[(0, 2 * col)] = c0 * w[col] * sp.im;
                    }
                    continue;
                }
                let (rc, rs) = (2 * row - 1, 2 * row);
                if col == 0 {
                    dst[(rc, 0)] = c1 * w[0] * 0.5 * (sp.re + sm.re);
                    dst[(rs, 0)] = c1 * w[0] * 0.5 * (sp.im - sm.im);
                } else {
                    let (cc, cs) = (2 * col - 1, 2 * col);
                    let wk = c1 * w[col] * 0.5;
                    dst[(rc, cc)] = wk * (sp.re + sm.re);
                    dst[(rc, cs)] = wk * (sp.im + sm.im);
                    dst[(rs, cc)] = wk * (sp.im - sm.im);
                    dst[(rs, cs)] = wk * (sm.re - sp.re);
                }
            }
        }
    }

    fn fill(&self, s: usize, basis: &Basis, dst: MatMut<'_, f64>) {
        match &basis.band {
            None => self.fill_voxels(s, dst),
            Some(b) => self.fill_band(s, b, basis.grid.len(), dst),
        }
    }

    fn build(&self, s: usize, basis: &Basis) -> Mat<f64> {
        let mut b = Mat::zeros(basis.dim(), self.ncols());
        self.fill(s, basis, b.as_mut());
        b
    }

    /// Factors of several images side by side.
    fn build_chunk(&self, range: std::ops::Range<usize>, basis: &Basis) -> Mat<f64> {
        let c = self.ncols();
        let mut b = Mat::zeros(basis.dim(), c * range.len());
        for (i, s) in range.enumerate() {
            self.fill(s, basis, b.as_mut().subcols_mut(i * c, c));
        }
        b
    }
}

fn images_per_chunk(ncols: usize) -> usize {
    (2048 / ncols.max(1)).max(1)
}

fn identity_report() -> CgReport {
    CgReport {
        iterations: 0,
        rel_residual: 0.0,
        history: vec![0.0],
        converged: true,
    }
}

fn all_image_coords(f: &Factors, lds: &LowResDataset) -> Vec<Vec<f64>> {
    (0..lds.len())
        .into_par_iter()
        .map(|s| f.image_coords(s, &lds.images[s]))
        .collect()
}

/// `B^T v` for one image block of a chunk.
fn block_t_mul(b: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    (0..b.ncols())
        .map(|c| (0..b.nrows()).map(|r| b[(r, c)] * v[r]).sum())
        .collect()
}

/// `B e` for one image block of a chunk, added into `out`.
fn block_mul_add(b: MatRef<'_, f64>, e: &[f64], out: &mut [f64]) {
    for (c, &ec) in e.iter().enumerate() {
        if ec != 0.0 {
            for (r, o) in out.iter_mut().enumerate() {
                *o += b[(r, c)] * ec;
            }
        }
    }
}

/// Solves `(1/n sum P^T P + tau) mu = 1/n sum P^T y` over band-limited
/// volumes.
pub fn estimate_mean(lds: &LowResDataset, opts: &CgOptions) -> Result<(Volume, CgReport)> {
    lds.check()?;
    let grid = lds.volume_grid();
    let n = lds.len() as f64;
    if !lds.use_projections {
        let mut mu = Field::zeros(grid);
        for y in &lds.images {
            mu.axpy(1.0 / n, y);
        }
        mu.scale(1.0 / (1.0 + MEAN_RIDGE));
        return Ok((mu, identity_report()));
    }
    let basis = Basis::band_limited(grid);
    let f = Factors::new(lds);
    let z = all_image_coords(&f, lds);
    let r = basis.dim();
    let cols = f.ncols();
    let inv_n = 1.0 / n;
    let (m_bar, rhs) = chunked_reduce(
        lds.len(),
        images_per_chunk(cols),
        |range| {
            let b = f.build_chunk(range.clone(), &basis);
            let mut acc = Mat::zeros(r, r);
            gemm(acc.as_mut(), false, b.as_ref(), b.transpose(), inv_n);
            let mut rhs = vec![0.0; r];
            for (i, s) in range.enumerate() {
                block_mul_add(b.as_ref().subcols(i * cols, cols), &z[s], &mut rhs);
            }
            rhs.iter_mut().for_each(|v| *v *= inv_n);
            (acc, rhs)
        },
        |a, b| {
            a.0 += b.0;
            linalg::add_into(&mut a.1, &b.1);
        },
    )
    .expect("non-empty dataset");
    let trace: f64 = (0..r).map(|i| m_bar[(i, i)]).sum();
    let tau = MEAN_RIDGE * trace / r as f64;
    let apply = |v: &[f64], out: &mut [f64]| {
        let vm = MatRef::from_column_major_slice(v, r, 1);
        let om = MatMut::from_column_major_slice_mut(out, r, 1);
        gemm(om, false, m_bar.as_ref(), vm, 1.0);
        linalg::axpy(out, tau, v);
    };
    let (x, rep) = cg::solve(apply, &rhs, None, opts)?;
    Ok((basis.synthesize(&x), rep))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceOptions {
    pub cg: CgOptions,
    /// Solve over band-limited volumes rather than all voxels.
    pub band_limit: bool,
    /// Byte budget for caching the factors across CG iterations.
    pub cache_bytes: usize,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions {
            cg: CgOptions::default(),
            band_limit: true,
            cache_bytes: 1 << 29,
        }
    }
}

/// Symmetric covariance in the coordinates of `basis`.
#[derive(Clone, Debug)]
pub struct Covariance {
    pub basis: Basis,
    pub matrix: Mat<f64>,
}

impl Covariance {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm_l2()
    }

    /// `max |S - S^T| / max |S|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut gap = 0.0f64;
        let mut big = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                gap = gap.max((self.matrix[(i, j)] - self.matrix[(j, i)]).abs());
                big = big.max(self.matrix[(i, j)].abs());
            }
        }
        if big == 0.0 {
            0.0
        } else {
            gap / big
        }
    }
}

/// The covariance normal operator `L(S) = 1/n sum M_s S M_s + tau_c S`
/// in the coordinates of a basis.
pub struct CovarianceOperator {
    factors: Factors,
    basis: Basis,
    n_images: usize,
    chunk: usize,
    cache: Option<Vec<Mat<f64>>>,
    ridge: f64,
}

impl CovarianceOperator {
    pub fn new(lds: &LowResDataset, basis: Basis, cache_bytes: usize) -> Result<Self> {
        lds.check()?;
        if !lds.use_projections {
            return Err(Error::InvalidSize(
                "covariance operator needs projection data".into(),
            ));
        }
        let factors = Factors::new(lds);
        let chunk = images_per_chunk(factors.ncols());
        let bytes = lds.len() * basis.dim() * factors.ncols() * 8;
        let mut op = CovarianceOperator {
            factors,
            basis,
            n_images: lds.len(),
            chunk,
            cache: None,
            ridge: 0.0,
        };
        if bytes <= cache_bytes {
            let ranges = op.ranges();
            op.cache = Some(
                ranges
                    .into_par_iter()
                    .map(|r| op.factors.build_chunk(r, &op.basis))
                    .collect(),
            );
        }
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn set_ridge(&mut self, ridge: f64) {
        self.ridge = ridge;
    }

    fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.n_images)
            .step_by(self.chunk)
            .map(|s| s..(s + self.chunk).min(self.n_images))
            .collect()
    }

    fn with_chunk<T>(
        &self,
        c: usize,
        r: std::ops::Range<usize>,
        f: impl FnOnce(MatRef<'_, f64>) -> T,
    ) -> T {
        match &self.cache {
            Some(cache) => f(cache[c].as_ref()),
            None => {
                let b = self.factors.build_chunk(r, &self.basis);
                f(b.as_ref())
            }
        }
    }

    /// Trace of `1/n sum M_s` in the basis.
    pub fn mean_trace(&self) -> f64 {
        let ranges = self.ranges();
        let parts: Vec<f64> = ranges
            .into_par_iter()
            .enumerate()
            .map(|(c, r)| self.with_chunk(c, r, |b| b.norm_l2().powi(2)))
            .collect();
        parts.iter().sum::<f64>() / self.n_images as f64
    }

    /// `out = L(sigma)` on column-major `d x d` storage.
    pub fn apply(&self, sigma: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let cols = self.factors.ncols();
        let s_mat = MatRef::from_column_major_slice(sigma, d, d);
        let inv_n = 1.0 / self.n_images as f64;
        let ranges: Vec<_> = self.ranges().into_iter().enumerate().collect();
        let acc = chunked_reduce(
            ranges.len(),
            1,
            |idx| {
                let (c, r) = ranges[idx.start].clone();
                self.with_chunk(c, r, |b| {
                    let k = b.ncols();
                    let mut t = Mat::zeros(d, k);
                    gemm(t.as_mut(), false, s_mat, b, 1.0);
                    let mut u = Mat::zeros(d, k);
                    let mut g = Mat::zeros(cols, cols);
                    for i in 0..k / cols {
                        let bs = b.subcols(i * cols, cols);
                        gemm(
                            g.as_mut(),
                            false,
                            bs.transpose(),
                            t.as_ref().subcols(i * cols, cols),
                            1.0,
                        );
                        gemm(
                            u.as_mut().subcols_mut(i * cols, cols),
                            false,
                            bs,
                            g.as_ref(),
                            1.0,
                        );
                    }
                    let mut part = Mat::zeros(d, d);
                    gemm(part.as_mut(), false, u.as_ref(), b.transpose(), inv_n);
                    part
                })
            },
            |a, b| *a += b,
        )
        .unwrap_or_else(|| Mat::zeros(d, d));
        let mut out_m = MatMut::from_column_major_slice_mut(out, d, d);
        for j in 0..d {
            for i in 0..d {
                out_m[(i, j)] = acc[(i, j)] + self.ridge * s_mat[(i, j)];
            }
        }
    }

    /// `1/n sum_s [b_s b_s^T - sigma_s^2 M_s]` with `b_s = B_s (z_s - B_s^T mu)`.
    fn rhs(&self, z: &[Vec<f64>], mean: &[f64], noise_var: &[f64]) -> Mat<f64> {
        let d = self.dim();
        let cols = self.factors.ncols();
        let inv_n = 1.0 / self.n_images as f64;
        let ranges: Vec<_> = self.ranges().into_iter().enumerate().collect();
        chunked_reduce(
            ranges.len(),
            1,
            |idx| {
                let (c, r) = ranges[idx.start].clone();
                self.with_chunk(c, r.clone(), |b| {
                    let mut w = Mat::zeros(d, r.len());
                    let mut scaled = b.to_owned();
                    for (i, s) in r.clone().enumerate() {
                        let bs = b.subcols(i * cols, cols);
                        let fit = block_t_mul(bs, mean);
                        let e: Vec<f64> = z[s].iter().zip(&fit).map(|(a, f)| a - f).collect();
                        let mut bsv = vec![0.0; d];
                        block_mul_add(bs, &e, &mut bsv);
                        for (row, v) in bsv.into_iter().enumerate() {
                            w[(row, i)] = v;
                        }
                        let sd = noise_var[s].max(0.0).sqrt();
                        for col in i * cols..(i + 1) * cols {
                            scaled.col_mut(col).iter_mut().for_each(|v| *v *= sd);
                        }
                    }
                    let mut part = Mat::zeros(d, d);
                    gemm(part.as_mut(), false, w.as_ref(), w.transpose(), inv_n);
                    gemm(
                        part.as_mut(),
                        true,
                        scaled.as_ref(),
                        scaled.transpose(),
                        -inv_n,
                    );
                    part
                })
            },
            |a, b| *a += b,
        )
        .unwrap_or_else(|| Mat::zeros(d, d))
    }
}

fn symmetrize(m: &mut Mat<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Least-squares covariance about `mean`, solved by CG on the normal
/// equations and symmetrized.
pub fn estimate_covariance(
    lds: &LowResDataset,
    mean: &Volume,
    opts: &CovarianceOptions,
) -> Result<(Covariance, CgReport)> {
    lds.check()?;
    let grid = lds.volume_grid();
    mean.grid.check_same(&grid)?;
    let n = lds.len() as f64;
    if !lds.use_projections {
        let d = grid.len();
        let mut acc = Mat::<f64>::zeros(d, d);
        let w = Mat::from_fn(d, lds.len(), |i, s| lds.images[s].data[i] - mean.data[i]);
        gemm(acc.as_mut(), false, w.as_ref(), w.transpose(), 1.0 / n);
        let noise = lds.noise_var.iter().sum::<f64>() / n;
        for i in 0..d {
            acc[(i, i)] -= noise;
        }
        acc *= faer::Scale(1.0 / (1.0 + COV_RIDGE));
        symmetrize(&mut acc);
        let basis = Basis::voxels(grid);
        return Ok((Covariance { basis, matrix: acc }, identity_report()));
    }
    let basis = if opts.band_limit {
        Basis::band_limited(grid)
    } else {
        Basis::voxels(grid)
    };
    let d = basis.dim();
    let mut op = CovarianceOperator::new(lds, basis.clone(), opts.cache_bytes)?;
    let scale = op.mean_trace() / d as f64;
    op.set_ridge(COV_RIDGE * scale * scale);
    let z = all_image_coords(&op.factors, lds);
    let rhs = op.rhs(&z, &basis.coefficients(&mean.data), &lds.noise_var);
    let rhs_vec: Vec<f64> = (0..d * d).map(|k| rhs[(k % d, k / d)]).collect();
    let (x, rep) = cg::solve(|v, o| op.apply(v, o), &rhs_vec, None, &opts.cg)?;
    let mut matrix = Mat::from_fn(d, d, |i, j| x[i + j * d]);
    symmetrize(&mut matrix);
    Ok((Covariance { basis, matrix }, rep))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eigenvolumes {
    pub volumes: Vec<Volume>,
    /// Descending, with negative values clamped to zero.
    pub values: Vec<f64>,
    /// How many of the returned values were clamped.
    pub clamped: usize,
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Leading `q` eigenpairs of the covariance.
pub fn top_eigenvolumes(cov: &Covariance, q: usize) -> Result<Eigenvolumes> {
    let d = cov.dim();
    let q = q.min(d);
    let (vals, vecs) = sym_eigen(&cov.matrix)?;
    let mut out = Eigenvolumes {
        volumes: Vec::with_capacity(q),
        values: Vec::with_capacity(q),
        clamped: 0,
    };
    for k in 0..q {
        let idx = d - 1 - k;
        let mut lambda = vals[idx];
        if lambda < 0.0 {
            lambda = 0.0;
            out.clamped += 1;
        }
        let mut v: Vec<f64> = (0..d).map(|i| vecs[(i, idx)]).collect();
        fix_sign(&mut v);
        out.volumes.push(cov.basis.synthesize(&v));
        out.values.push(lambda);
    }
    if out.clamped > 0 {
        log::warn!(
            "clamped {} negative covariance eigenvalues to zero",
            out.clamped
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CovarianceModel {
    pub mean: Volume,
    pub covariance: Covariance,
    /// Eigenvolumes with strictly positive eigenvalues, orthonormal.
    pub eigvols: Vec<Volume>,
    pub eigvals: Vec<f64>,
    /// Requested components dropped because their eigenvalue was clamped.
    pub clamped: usize,
}

impl CovarianceModel {
    pub fn new(mean: Volume, covariance: Covariance, q: usize) -> Result<Self> {
        let eig = top_eigenvolumes(&covariance, q)?;
        let keep = eig.values.iter().take_while(|&&v| v > 0.0).count();
        Ok(CovarianceModel {
            mean,
            covariance,
            eigvols: eig.volumes[..keep].to_vec(),
            eigvals: eig.values[..keep].to_vec(),
            clamped: q.min(eig.values.len()) - keep,
        })
    }

    pub fn q(&self) -> usize {
        self.eigvals.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PcaCoordinates {
    pub betas: Vec<Vec<f64>>,
}

impl PcaCoordinates {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn q(&self) -> usize {
        self.betas.first().map_or(0, |b| b.len())
    }
}

/// Solves the ridge-regularized system `(A^T A + sigma^2 Lambda^{-1}) beta
/// = A^T r`, falling back to a tiny extra ridge if Cholesky fails.
fn solve_coordinates(
    mut g: Mat<f64>,
    rhs: &[f64],
    sigma2: f64,
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let q = rhs.len();
    for k in 0..q {
        g[(k, k)] += sigma2 / lambda[k];
    }
    if let Some(x) = cholesky_solve(&g, rhs) {
        return Ok(x);
    }
    let scale = (0..q).map(|k| g[(k, k)].abs()).sum::<f64>() / q as f64;
    for k in 0..q {
        g[(k, k)] += 1e-10 * scale.max(f64::MIN_POSITIVE);
    }
    cholesky_solve(&g, rhs)
        .ok_or_else(|| Error::SingularSystem("principal coordinate system".into()))
}

/// Wiener-filtered coordinates of each image in the eigenvolume basis.
///
/// The model's mean and eigenvolumes are expressed in the covariance basis,
/// so they should lie in its span.
pub fn pca_coordinates(lds: &LowResDataset, model: &CovarianceModel) -> Result<PcaCoordinates> {
    lds.check()?;
    let grid = lds.volume_grid();
    model.mean.grid.check_same(&grid)?;
    let q = model.q();
    if model.eigvals.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::SingularSystem(
            "non-positive eigenvalue in the model".into(),
        ));
    }
    if q == 0 {
        return Ok(PcaCoordinates {
            betas: vec![Vec::new(); lds.len()],
        });
    }
    let betas = if !lds.use_projections {
        let d = grid.len();
        let v = Mat::from_fn(d, q, |i, k| model.eigvols[k].data[i]);
        let mut g = Mat::zeros(q, q);
        gemm(g.as_mut(), false, v.transpose(), v.as_ref(), 1.0);
        lds.images
            .par_iter()
            .zip(&lds.noise_var)
            .map(|(y, &s2)| {
                let r = y.sub(&model.mean);
                let rhs: Vec<f64> = model.eigvols.iter().map(|e| e.dot(&r)).collect();
                solve_coordinates(g.clone(), &rhs, s2, &model.eigvals)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let basis = &model.covariance.basis;
        let factors = Factors::new(lds);
        let vc: Vec<Vec<f64>> = model
            .eigvols
            .iter()
            .map(|e| basis.coefficients(&e.data))
            .collect();
        let r = basis.dim();
        let v = Mat::from_fn(r, q, |i, k| vc[k][i]);
        let mu = basis.coefficients(&model.mean.data);
        (0..lds.len())
            .into_par_iter()
            .map(|s| {
                let bs = factors.build(s, basis);
                let z = factors.image_coords(s, &lds.images[s]);
                let fit = block_t_mul(bs.as_ref(), &mu);
                let e: Vec<f64> = z.iter().zip(&fit).map(|(a, f)| a - f).collect();
                let mut a = Mat::zeros(bs.ncols(), q);
                gemm(a.as_mut(), false, bs.transpose(), v.as_ref(), 1.0);
                let rhs: Vec<f64> = (0..q).map(|k| linalg::dot(a.col_as_slice(k), &e)).collect();
                let mut g = Mat::zeros(q, q);
                gemm(g.as_mut(), false, a.transpose(), a.as_ref(), 1.0);
                solve_coordinates(g, &rhs, lds.noise_var[s], &model.eigvals)
            })
            .collect::<Result<Vec<_>>>()?
    };
    if betas.iter().flatten().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("principal coordinates"));
    }
    Ok(PcaCoordinates { betas })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowResOptions {
    /// Downsampled grid size.
    pub n: usize,
    pub q: usize,
    pub mean_cg: CgOptions,
    pub covariance: CovarianceOptions,
}

impl Default for LowResOptions {
    fn default() -> Self {
        LowResOptions {
            n: 16,
            q: 4,
            mean_cg: CgOptions::default(),
            covariance: CovarianceOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LowResResult {
    pub data: LowResDataset,
    pub model: CovarianceModel,
    pub coordinates: PcaCoordinates,
    pub mean_report: CgReport,
    pub covariance_report: CgReport,
}

/// Downsampling, mean, covariance, eigenvolumes and coordinates in one go.
pub fn fit(ds: &Dataset, opts: &LowResOptions) -> Result<LowResResult> {
    let data = downsample(ds, opts.n.min(ds.n))?;
    let (mean, mean_report) = estimate_mean(&data, &opts.mean_cg)?;
    log::info!("mean: {} CG iterations", mean_report.iterations);
    let (cov, covariance_report) = estimate_covariance(&data, &mean, &opts.covariance)?;
    log::info!("covariance: {} CG iterations", covariance_report.iterations);
    let model = CovarianceModel::new(mean, cov, opts.q)?;
    let coordinates = pca_coordinates(&data, &model)?;
    Ok(LowResResult {
        data,
        model,
        coordinates,
        mean_report,
        covariance_report,
    })
}
