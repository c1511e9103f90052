//! Spectral volumes: the generalized tomographic least-squares problem.
//!
//! With basis vectors `phi^(l)` on the graph, volumes are modelled as
//! `x_s = sqrt(n) sum_l phi_s^(l) alpha^(l)` and the normal equations read
//! `sum_m K^(l,m) alpha^(m) = b^(l)` with
//! `K^(l,m) = sum_s phi_s^(l) phi_s^(m) P_s^T P_s` and
//! `b^(l) = n^{-1/2} sum_s phi_s^(l) P_s^T y_s`.
//!
//! `P^T P` acts on a volume as a convolution. Its kernel is
//! `kappa(d) = N^{-2} sum_j H_j^2 e^{i x_j.d}` over offsets `d` in
//! `[-(N-1), N-1]^3`, so every block is stored as the transform of a real,
//! even kernel on a `(2N)^3` grid, large enough that the circular product
//! equals the linear convolution.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::cg::{preconditioned_cg, CgOptions, CgReport};
use crate::error::{Error, Result};
use crate::fourier::fft_nd;
use crate::graph::SpectralBasis;
use crate::grid::{Field, Grid, Image, Volume};
use crate::imaging::{ImagingOperator, Projector};
use crate::linalg::{dot, norm};
use crate::nufft::{self, Gridder, NuMethod, Type1Sum};
use crate::simulate::Dataset;

/// Fine-grid memory allowed while accumulating kernels.
const KERNEL_BUILD_BYTES: usize = 1 << 30;

/// `alpha^(0..r)`, on the grid of the densities.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralVolumes {
    pub volumes: Vec<Field>,
}

impl SpectralVolumes {
    pub fn r(&self) -> usize {
        self.volumes.len()
    }

    pub fn grid(&self) -> Option<Grid> {
        self.volumes.first().map(|v| v.grid)
    }

    pub fn truncated(&self, r: usize) -> SpectralVolumes {
        SpectralVolumes {
            volumes: self.volumes[..r.min(self.r())].to_vec(),
        }
    }

    fn from_flat(grid: Grid, r: usize, x: Vec<f64>) -> Self {
        let len = grid.len();
        SpectralVolumes {
            volumes: (0..r)
                .map(|l| Field {
                    grid,
                    data: x[l * len..(l + 1) * len].to_vec(),
                })
                .collect(),
        }
    }
}

/// `b^(0..r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackprojectionSet {
    pub volumes: Vec<Field>,
}

impl BackprojectionSet {
    pub fn r(&self) -> usize {
        self.volumes.len()
    }

    pub fn truncated(&self, r: usize) -> BackprojectionSet {
        BackprojectionSet {
            volumes: self.volumes[..r.min(self.r())].to_vec(),
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.volumes
            .iter()
            .flat_map(|v| v.data.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum KernelData {
    /// `P_s = I`, so `K^(l,m) = G_lm I` with `G` the Gram matrix of the basis.
    Identity { gram: Vec<f64> },
    /// Transforms of the block kernels on the padded grid, upper triangle
    /// packed row by row; a single block when `diagonal_only`.
    Fourier { blocks: Vec<Vec<f64>> },
}

/// The blocks `K^(l,m)` in a form that applies in `O(r^2)` pointwise
/// products plus `2r` FFTs.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    pub r: usize,
    /// Grid of the volumes the kernels act on.
    pub grid: Grid,
    /// One shared kernel on every diagonal block, zero cross terms.
    pub diagonal_only: bool,
    data: KernelData,
}

fn packed(l: usize, m: usize, r: usize) -> usize {
    let (a, b) = if l <= m { (l, m) } else { (m, l) };
    a * r - a * (a + 1) / 2 + b
}

fn check_basis(ds: &Dataset, basis: &SpectralBasis) -> Result<()> {
    if basis.n() != ds.len() {
        return Err(Error::SizeMismatch(format!(
            "basis has {} entries but the dataset has {} images",
            basis.n(),
            ds.len()
        )));
    }
    if basis.r() == 0 {
        return Err(Error::InvalidSize("empty spectral basis".into()));
    }
    Ok(())
}

/// Zero-pads an `N^3` volume into the `(2N)^3` grid and transforms it.
fn padded_transform(v: &[f64], n: usize) -> Vec<Complex64> {
    let m = 2 * n;
    let mut buf = vec![Complex64::new(0.0, 0.0); m * m * m];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                buf[(z * m + y) * m + x] = Complex64::new(v[(z * n + y) * n + x], 0.0);
            }
        }
    }
    fft_nd(&mut buf, m, 3, false);
    buf
}

/// Inverse of the padded transform followed by cropping to `N^3`.
fn crop_inverse(mut buf: Vec<Complex64>, n: usize, out: &mut [f64]) {
    let m = 2 * n;
    fft_nd(&mut buf, m, 3, true);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                out[(z * n + y) * n + x] = buf[(z * m + y) * m + x].re;
            }
        }
    }
}

/// Turns centered `2N`-mode kernel samples into the stored transform.
fn kernel_transform(centered: &[Complex64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut buf = vec![Complex64::new(0.0, 0.0); m * m * m];
    // Centered position p holds offset p - N, which wraps to (p + N) mod 2N.
    for pz in 0..m {
        for py in 0..m {
            for px in 0..m {
                let src = (pz * m + py) * m + px;
                let dst = (((pz + n) % m) * m + (py + n) % m) * m + (px + n) % m;
                buf[dst] = Complex64::new(centered[src].re, 0.0);
            }
        }
    }
    fft_nd(&mut buf, m, 3, false);
    // The kernel is real and even, so its transform is real.
    let scale = 1.0 / (m * m * m) as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Accumulates `sum_s w_c(s) P_s^T P_s` kernels for a set of weight channels.
fn accumulate_kernels(
    ds: &Dataset,
    weights: &dyn Fn(usize, usize) -> f64,
    channels: usize,
    oversample: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = ds.n;
    let proj = Projector::auto(n);
    let layout = proj.layout().clone();
    let modes = 2 * n;
    let gridder = match proj.method {
        NuMethod::Direct => None,
        NuMethod::Gridded { tol } => Some(Gridder::new(modes, oversample, tol)),
    };
    let per_channel = match &gridder {
        Some(g) => g.fine_size().pow(3) * 8,
        None => modes.pow(3) * 16,
    };
    let batch = (KERNEL_BUILD_BYTES / per_channel).clamp(1, channels.max(1));
    let norm2 = 1.0 / (n * n) as f64;
    let mut out = Vec::with_capacity(channels);
    let mut vals = vec![Complex64::new(0.0, 0.0); batch];
    for first in (0..channels).step_by(batch) {
        let count = batch.min(channels - first);
        let mut sum = match &gridder {
            Some(g) => Type1Sum::gridded(g, count, true),
            None => Type1Sum::direct(modes, count),
        };
        for (s, op) in ds.operators.iter().enumerate() {
            let w: Vec<f64> = (0..count).map(|c| weights(s, first + c)).collect();
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            let pts = layout.points(&op.rotation);
            let h = layout.filter(op);
            // Offsets are in units of the N-grid spacing, as are the modes.
            let x = nufft::to_x(&pts, n);
            for k in 0..layout.len() {
                let base = layout.mult[k] * h[k] * h[k] * norm2;
                if base == 0.0 {
                    continue;
                }
                for c in 0..count {
                    vals[c] = Complex64::new(base * w[c], 0.0);
                }
                sum.add(&x[k], &vals[..count]);
            }
        }
        for centered in sum.finish() {
            out.push(kernel_transform(&centered, n));
        }
    }
    Ok(out)
}

/// Builds every block `K^(l,m)`.
pub fn build_kernels(ds: &Dataset, basis: &SpectralBasis, oversample: f64) -> Result<KernelSet> {
    check_basis(ds, basis)?;
    let r = basis.r();
    let pairs: Vec<(usize, usize)> = (0..r).flat_map(|l| (l..r).map(move |m| (l, m))).collect();
    if !ds.use_projections {
        let gram = pairs
            .iter()
            .map(|&(l, m)| dot(&basis.eigvecs[l], &basis.eigvecs[m]))
            .collect();
        return Ok(KernelSet {
            r,
            grid: ds.volume_grid(),
            diagonal_only: false,
            data: KernelData::Identity { gram },
        });
    }
    let w = |s: usize, c: usize| {
        let (l, m) = pairs[c];
        basis.eigvecs[l][s] * basis.eigvecs[m][s]
    };
    let blocks = accumulate_kernels(ds, &w, pairs.len(), oversample)?;
    Ok(KernelSet {
        r,
        grid: ds.volume_grid(),
        diagonal_only: false,
        data: KernelData::Fourier { blocks },
    })
}

/// The shared kernel `(1/n) sum_s P_s^T P_s` on every diagonal block.
pub fn diagonal_approximation(ds: &Dataset, r: usize) -> Result<KernelSet> {
    if ds.is_empty() {
        return Err(Error::InvalidSize("empty dataset".into()));
    }
    let data = if ds.use_projections {
        let inv = 1.0 / ds.len() as f64;
        let w = |_: usize, _: usize| inv;
        KernelData::Fourier {
            blocks: accumulate_kernels(ds, &w, 1, 2.0)?,
        }
    } else {
        KernelData::Identity { gram: vec![1.0] }
    };
    Ok(KernelSet {
        r,
        grid: ds.volume_grid(),
        diagonal_only: true,
        data,
    })
}

impl KernelSet {
    /// The leading `r` blocks.
    pub fn truncated(&self, r: usize) -> KernelSet {
        let r = r.min(self.r);
        let data = match (&self.data, self.diagonal_only) {
            (d, true) => d.clone(),
            (KernelData::Identity { gram }, false) => KernelData::Identity {
                gram: (0..r)
                    .flat_map(|l| (l..r).map(move |m| (l, m)))
                    .map(|(l, m)| gram[packed(l, m, self.r)])
                    .collect(),
            },
            (KernelData::Fourier { blocks }, false) => KernelData::Fourier {
                blocks: (0..r)
                    .flat_map(|l| (l..r).map(move |m| (l, m)))
                    .map(|(l, m)| blocks[packed(l, m, self.r)].clone())
                    .collect(),
            },
        };
        KernelSet {
            r,
            grid: self.grid,
            diagonal_only: self.diagonal_only,
            data,
        }
    }

    fn len(&self) -> usize {
        self.grid.len()
    }

    /// Applies `K` to stacked volumes.
    pub fn apply(&self, alphas: &[Field]) -> Result<Vec<Field>> {
        if alphas.len() != self.r {
            return Err(Error::ShapeMismatch(format!(
                "{} volumes for {} kernel blocks",
                alphas.len(),
                self.r
            )));
        }
        for a in alphas {
            a.grid
                .check_same(&self.grid)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        }
        let x: Vec<f64> = alphas.iter().flat_map(|a| a.data.iter().copied()).collect();
        let mut y = vec![0.0; x.len()];
        self.apply_flat(&x, &mut y);
        Ok(SpectralVolumes::from_flat(self.grid, self.r, y).volumes)
    }

    /// `y = K x` on volumes stacked block after block.
    pub fn apply_flat(&self, x: &[f64], y: &mut [f64]) {
        let len = self.len();
        let r = self.r;
        debug_assert_eq!(x.len(), r * len);
        match &self.data {
            KernelData::Identity { gram } => {
                y.par_chunks_mut(len).enumerate().for_each(|(l, out)| {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for m in 0..r {
                        let g = if self.diagonal_only {
                            if l != m {
                                continue;
                            }
                            gram[0]
                        } else {
                            gram[packed(l, m, r)]
                        };
                        out.iter_mut()
                            .zip(&x[m * len..(m + 1) * len])
                            .for_each(|(o, v)| *o += g * v);
                    }
                });
            }
            KernelData::Fourier { blocks } => {
                let n = self.grid.n;
                let spectra: Vec<Vec<Complex64>> =
                    x.par_chunks(len).map(|a| padded_transform(a, n)).collect();
                y.par_chunks_mut(len).enumerate().for_each(|(l, out)| {
                    let mut acc = vec![Complex64::new(0.0, 0.0); spectra[0].len()];
                    for (m, spec) in spectra.iter().enumerate() {
                        let k = if self.diagonal_only {
                            if l != m {
                                continue;
                            }
                            &blocks[0]
                        } else {
                            &blocks[packed(l, m, r)]
                        };
                        acc.iter_mut()
                            .zip(spec)
                            .zip(k)
                            .for_each(|((a, s), kv)| *a += s * kv);
                    }
                    crop_inverse(acc, n, out);
                });
            }
        }
    }

    /// Applies the single block `(l, m)` to one volume.
    pub fn apply_block(&self, l: usize, m: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        if self.diagonal_only && l != m {
            return out;
        }
        match &self.data {
            KernelData::Identity { gram } => {
                let g = if self.diagonal_only {
                    gram[0]
                } else {
                    gram[packed(l, m, self.r)]
                };
                out.iter_mut().zip(v).for_each(|(o, x)| *o = g * x);
            }
            KernelData::Fourier { blocks } => {
                let k = if self.diagonal_only {
                    &blocks[0]
                } else {
                    &blocks[packed(l, m, self.r)]
                };
                let mut spec = padded_transform(v, self.grid.n);
                spec.iter_mut().zip(k).for_each(|(s, kv)| *s *= kv);
                crop_inverse(spec, self.grid.n, &mut out);
            }
        }
        out
    }

    /// See [`Preconditioner`]; `shift` is added to every block first. With
    /// `ball`, frequencies outside the ball of radius `N/2` are dropped.
    pub fn preconditioner(&self, shift: f64, ball: bool) -> Preconditioner {
        let n = self.grid.n;
        let diag = |l: usize| {
            if self.diagonal_only {
                0
            } else {
                packed(l, l, self.r)
            }
        };
        let blocks = if self.diagonal_only { 1 } else { self.r };
        let inverse = match &self.data {
            KernelData::Identity { gram } => (0..blocks)
                .map(|l| {
                    let g = gram[diag(l)] + shift;
                    vec![if g > 0.0 { 1.0 / g } else { 1.0 }]
                })
                .collect(),
            KernelData::Fourier { blocks: data } => (0..blocks)
                .into_par_iter()
                .map(|l| {
                    let k = &data[diag(l)];
                    let m = 2 * n;
                    // T. Chan's optimal circulant: taper the Toeplitz kernel
                    // by prod_a (1 - |o_a|/N) over offsets o, then fold it
                    // onto the N grid. Even padded frequencies are the
                    // N-grid ones, so the fold is a subsampling; the
                    // transform pair is unnormalized, hence the 1/(2N)^3
                    // below cancels against the one folded into `k`.
                    let mut buf: Vec<Complex64> =
                        k.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                    fft_nd(&mut buf, m, 3, true);
                    let taper: Vec<f64> = (0..m)
                        .map(|p| {
                            let o = if p < n { p } else { m - p };
                            1.0 - o as f64 / n as f64
                        })
                        .collect();
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b *= taper[i % m] * taper[(i / m) % m] * taper[i / (m * m)];
                    }
                    fft_nd(&mut buf, m, 3, false);
                    let mut t = Vec::with_capacity(n * n * n);
                    for z in 0..n {
                        for y in 0..n {
                            for x in 0..n {
                                t.push(buf[((2 * z) * m + 2 * y) * m + 2 * x].re + shift);
                            }
                        }
                    }
                    let top = t.iter().fold(0.0f64, |a, &b| a.max(b));
                    let floor = if top > 0.0 {
                        top * PRECONDITIONER_FLOOR
                    } else {
                        1.0
                    };
                    let norm = 1.0 / (n * n * n) as f64;
                    t.iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            if !ball || in_ball(i, n) {
                                norm / v.max(floor)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        Preconditioner {
            grid: self.grid,
            inverse,
        }
    }

    /// Operator norm of block `(l, m)` on `N^3` volumes, by power iteration
    /// on its square (every block is symmetric).
    pub fn block_norm(&self, l: usize, m: usize, iterations: usize) -> f64 {
        let len = self.len();
        let mut v: Vec<f64> = (0..len)
            .map(|i| 0.5 + ((i as f64 + 1.0) * 0.754_877_666_246_692_7).fract())
            .collect();
        let mut est = 0.0;
        for _ in 0..iterations.max(1) {
            let nv = norm(&v);
            if nv == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            let w = self.apply_block(l, m, &v);
            est = norm(&w);
            v = self.apply_block(l, m, &w);
        }
        est
    }
}

/// `b^(l) = n^{-1/2} sum_s phi_s^(l) P_s^T y_s` for every `l`.
pub fn build_backprojections(ds: &Dataset, basis: &SpectralBasis) -> Result<BackprojectionSet> {
    check_basis(ds, basis)?;
    let scale = 1.0 / (ds.len() as f64).sqrt();
    let weights: Vec<Vec<f64>> = basis
        .eigvecs
        .iter()
        .map(|v| v.iter().map(|p| p * scale).collect())
        .collect();
    let volumes = if ds.use_projections {
        let refs: Vec<&[f64]> = weights.iter().map(|w| w.as_slice()).collect();
        Projector::auto(ds.n).backproject_weighted(&ds.images, &ds.operators, &refs)?
    } else {
        weighted_image_sums(&ds.images, &weights)?
    };
    Ok(BackprojectionSet { volumes })
}

fn weighted_image_sums(images: &[Field], weights: &[Vec<f64>]) -> Result<Vec<Field>> {
    let grid = images
        .first()
        .map(|y| y.grid)
        .ok_or_else(|| Error::InvalidSize("empty dataset".into()))?;
    weights
        .par_iter()
        .map(|w| {
            let mut acc = Field::zeros(grid);
            for (y, &c) in images.iter().zip(w) {
                y.grid.check_same(&grid)?;
                acc.axpy(c, y);
            }
            Ok(acc)
        })
        .collect()
}

/// Whether standard-order position `i` of an `N^3` transform lies strictly
/// inside the ball of radius `N/2`, the region central slices reach.
fn in_ball(i: usize, n: usize) -> bool {
    let signed = |p: usize| {
        let p = p as i64;
        if 2 * p < n as i64 {
            p
        } else {
            p - n as i64
        }
    };
    let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
    let r2 = signed(x).pow(2) + signed(y).pow(2) + signed(z).pow(2);
    4 * r2 < (n * n) as i64
}

/// Removes the frequencies outside the ball from every stacked volume.
pub fn restrict_to_ball(x: &mut [f64], n: usize) {
    let len = n * n * n;
    let norm = 1.0 / len as f64;
    x.par_chunks_mut(len).for_each(|v| {
        let mut buf: Vec<Complex64> = v.iter().map(|&a| Complex64::new(a, 0.0)).collect();
        fft_nd(&mut buf, n, 3, false);
        buf.iter_mut().enumerate().for_each(|(i, b)| {
            if !in_ball(i, n) {
                *b = Complex64::new(0.0, 0.0);
            }
        });
        fft_nd(&mut buf, n, 3, true);
        v.iter_mut().zip(&buf).for_each(|(a, b)| *a = b.re * norm);
    });
}

/// Transfer-function values below this fraction of the largest are raised
/// to it when inverting, which keeps the preconditioner well defined
/// outside the band the data reach.
pub const PRECONDITIONER_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub cg: CgOptions,
    /// Tikhonov weight added to the diagonal of `K`.
    pub tikhonov: f64,
    /// Precondition with [`KernelSet::preconditioner`].
    pub precondition: bool,
    /// On the kernel route, solve for volumes band-limited to the ball of
    /// radius `N/2`. Frequencies outside it lie on no central slice, so
    /// `K` is close to singular there.
    pub ball: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            cg: CgOptions {
                tol: 1e-6,
                max_iter: 300,
            },
            tikhonov: 0.0,
            precondition: true,
            ball: true,
        }
    }
}

/// Block-diagonal approximate inverse of `K`.
///
/// Each diagonal block is a Toeplitz convolution; it is replaced by the
/// circulant one with the same transfer function sampled on the `N` grid,
/// which an FFT inverts exactly. Off-diagonal blocks are ignored, which
/// is what the blocks tend to as `n` grows.
#[derive(Clone, Debug, PartialEq)]
pub struct Preconditioner {
    grid: Grid,
    /// Per block: one scalar on the identity path, else `N^3` multipliers.
    inverse: Vec<Vec<f64>>,
}

impl Preconditioner {
    /// `z = M^{-1} r` on stacked volumes.
    pub fn apply_flat(&self, r: &[f64], z: &mut [f64]) {
        let len = self.grid.len();
        let n = self.grid.n;
        z.par_chunks_mut(len)
            .zip(r.par_chunks(len))
            .enumerate()
            .for_each(|(l, (out, inp))| {
                let inv = &self.inverse[l.min(self.inverse.len() - 1)];
                if inv.len() == 1 {
                    out.iter_mut().zip(inp).for_each(|(o, v)| *o = inv[0] * v);
                    return;
                }
                let mut buf: Vec<Complex64> = inp.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft_nd(&mut buf, n, self.grid.dim, false);
                buf.iter_mut().zip(inv).for_each(|(b, w)| *b *= w);
                fft_nd(&mut buf, n, self.grid.dim, true);
                out.iter_mut().zip(&buf).for_each(|(o, b)| *o = b.re);
            });
    }
}

/// Runs CG on `(K + tau I) alpha = b` and returns the last iterate with its
/// report, converged or not.
pub fn solve_spectral_volumes_report(
    k: &KernelSet,
    b: &BackprojectionSet,
    opts: &SolveOptions,
) -> Result<(SpectralVolumes, CgReport)> {
    if b.r() != k.r {
        return Err(Error::ShapeMismatch(format!(
            "{} backprojections for {} kernel blocks",
            b.r(),
            k.r
        )));
    }
    for v in &b.volumes {
        v.grid
            .check_same(&k.grid)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    }
    let mut rhs = b.flat();
    let tau = opts.tikhonov;
    let ball = opts.ball && matches!(k.data, KernelData::Fourier { .. }) && k.grid.dim == 3;
    if ball {
        restrict_to_ball(&mut rhs, k.grid.n);
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        k.apply_flat(v, out);
        if tau != 0.0 {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += tau * x);
        }
        if ball {
            restrict_to_ball(out, k.grid.n);
        }
    };
    let (x, report) = if opts.precondition {
        let m = k.preconditioner(tau, ball);
        preconditioned_cg(
            apply,
            |r: &[f64], z: &mut [f64]| m.apply_flat(r, z),
            &rhs,
            None,
            &opts.cg,
        )
    } else {
        crate::cg::conjugate_gradient(apply, &rhs, None, &opts.cg)
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral volumes"));
    }
    Ok((SpectralVolumes::from_flat(k.grid, k.r, x), report))
}

/// Like [`solve_spectral_volumes_report`] but fails without convergence.
pub fn solve_spectral_volumes(
    k: &KernelSet,
    b: &BackprojectionSet,
    opts: &SolveOptions,
) -> Result<(SpectralVolumes, CgReport)> {
    let (sv, report) = solve_spectral_volumes_report(k, b, opts)?;
    if !report.converged {
        return Err(Error::CgNoConvergence {
            iterations: report.iterations,
            residual: report.rel_residual,
        });
    }
    Ok((sv, report))
}

/// `alpha^(l) = n^{-1/2} sum_s phi_s^(l) y_s` when every operator is the identity.
pub fn solve_identity(ds: &Dataset, basis: &SpectralBasis) -> Result<SpectralVolumes> {
    if ds.use_projections {
        return Err(Error::OperatorsNotIdentity);
    }
    check_basis(ds, basis)?;
    let scale = 1.0 / (ds.len() as f64).sqrt();
    let weights: Vec<Vec<f64>> = basis
        .eigvecs
        .iter()
        .map(|v| v.iter().map(|p| p * scale).collect())
        .collect();
    Ok(SpectralVolumes {
        volumes: weighted_image_sums(&ds.images, &weights)?,
    })
}

/// `x_s = sqrt(n) sum_l phi_s^(l) alpha^(l)`, with `s` counted from zero.
pub fn reconstruct(sv: &SpectralVolumes, basis: &SpectralBasis, s: usize) -> Result<Volume> {
    if s >= basis.n() {
        return Err(Error::IndexOutOfRange {
            index: s,
            len: basis.n(),
        });
    }
    if sv.r() > basis.r() {
        return Err(Error::SizeMismatch(format!(
            "{} spectral volumes but only {} basis vectors",
            sv.r(),
            basis.r()
        )));
    }
    let grid = sv
        .grid()
        .ok_or_else(|| Error::InvalidSize("no spectral volumes".into()))?;
    let scale = (basis.n() as f64).sqrt();
    let mut out = Field::zeros(grid);
    for (l, a) in sv.volumes.iter().enumerate() {
        out.axpy(scale * basis.phi(s, l), a);
    }
    Ok(out)
}

/// Model images `sqrt(n) sum_l phi_s^(l) P_s alpha^(l)` for every `s`.
pub fn model_images(
    ds: &Dataset,
    basis: &SpectralBasis,
    sv: &SpectralVolumes,
) -> Result<Vec<Image>> {
    check_basis(ds, basis)?;
    let scale = (ds.len() as f64).sqrt();
    if !ds.use_projections {
        return (0..ds.len()).map(|s| reconstruct(sv, basis, s)).collect();
    }
    let proj = Projector::auto(ds.n);
    let per_volume: Vec<Vec<Image>> = sv
        .volumes
        .iter()
        .map(|a| proj.project_many(a, &ds.operators))
        .collect::<Result<_>>()?;
    Ok((0..ds.len())
        .map(|s| {
            let mut img = Field::zeros(Grid::image(ds.n));
            for (l, imgs) in per_volume.iter().enumerate() {
                img.axpy(scale * basis.phi(s, l), &imgs[s]);
            }
            img
        })
        .collect())
}

/// `sum_s |y_s - model_s|^2 / sum_s |y_s|^2`.
pub fn data_residual(ds: &Dataset, basis: &SpectralBasis, sv: &SpectralVolumes) -> Result<f64> {
    let model = model_images(ds, basis, sv)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, m) in ds.images.iter().zip(&model) {
        num += y.sub(m).dot(&y.sub(m));
        den += y.dot(y);
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// `sum_s phi_s^(l) phi_s^(m) P_s^T P_s v`, composed literally.
pub fn direct_block_apply(
    ds: &Dataset,
    basis: &SpectralBasis,
    l: usize,
    m: usize,
    v: &Volume,
) -> Result<Volume> {
    let proj = Projector::auto(ds.n);
    let mut out = Field::zeros(v.grid);
    for (s, op) in ds.operators.iter().enumerate() {
        let w = basis.phi(s, l) * basis.phi(s, m);
        if w != 0.0 {
            out.axpy(w, &proj.normal(v, op)?);
        }
    }
    Ok(out)
}

/// Plain operators for every image; handy for identity-path datasets.
pub fn plain_operators(n: usize) -> Vec<ImagingOperator> {
    vec![ImagingOperator::plain(); n]
}
