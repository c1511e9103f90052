//! Non-uniform discrete Fourier transforms on three-dimensional grids.
//!
//! Two routes are provided for each direction: the literal separable sum
//! and an oversampled-FFT gridder with an exponential-of-semicircle kernel.
//! The literal sum defines the semantics; the gridder is checked against it.
//!
//! Internally both work on mode sums `c(x) = sum_m f[m] e^{-i x.m}` with
//! `m` in the centered range `-floor(M/2) ..= ceil(M/2) - 1` and `x` in
//! `[-pi, pi]^3`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::fft_nd;
use crate::grid::{Field, Grid};

/// A point in three-dimensional physical frequency space.
pub type FreqPoint = [f64; 3];

const MAX_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NuMethod {
    /// Literal separable sum.
    Direct,
    /// Oversampled FFT with spreading kernel, accurate to about `tol`.
    Gridded { tol: f64 },
}

impl NuMethod {
    /// Literal sums on small grids, gridding beyond that.
    pub fn auto(n: usize) -> Self {
        if n <= 8 {
            NuMethod::Direct
        } else {
            NuMethod::Gridded { tol: 1e-7 }
        }
    }
}

/// Complex samples on a spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub grid: Grid,
    pub data: Vec<Complex64>,
}

impl ComplexField {
    pub fn real_part(&self) -> Field {
        Field {
            grid: self.grid,
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }
}

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

fn mode_min(m: usize) -> i64 {
    -((m / 2) as i64)
}

/// `e^{-i x m}` for every centered mode `m`, in storage order.
fn phase_row(x: f64, m: usize, sign: f64) -> Vec<Complex64> {
    let m0 = mode_min(m);
    (0..m)
        .map(|p| Complex64::from_polar(1.0, sign * x * (p as i64 + m0) as f64))
        .collect()
}

/// Literal `c_p = sum_m f[m] e^{-i x_p.m}` over an `m^3` centered mode array.
pub fn direct_type2(f: &[Complex64], m: usize, x: &[[f64; 3]]) -> Vec<Complex64> {
    debug_assert_eq!(f.len(), m * m * m);
    x.iter()
        .map(|xp| {
            let ex = phase_row(xp[0], m, -1.0);
            let ey = phase_row(xp[1], m, -1.0);
            let ez = phase_row(xp[2], m, -1.0);
            let mut acc = czero();
            for (iz, cz) in ez.iter().enumerate() {
                let mut acc_y = czero();
                for (iy, cy) in ey.iter().enumerate() {
                    let row = &f[(iz * m + iy) * m..(iz * m + iy + 1) * m];
                    let sx: Complex64 = row.iter().zip(&ex).map(|(a, b)| a * b).sum();
                    acc_y += sx * cy;
                }
                acc += acc_y * cz;
            }
            acc
        })
        .collect()
}

/// Literal `f[m] = sum_p c_p e^{+i x_p.m}` onto an `m^3` centered mode array.
pub fn direct_type1(x: &[[f64; 3]], c: &[Complex64], m: usize) -> Vec<Complex64> {
    let mut out = vec![czero(); m * m * m];
    for (xp, &cp) in x.iter().zip(c) {
        if cp == czero() {
            continue;
        }
        let ex = phase_row(xp[0], m, 1.0);
        let ey = phase_row(xp[1], m, 1.0);
        let ez = phase_row(xp[2], m, 1.0);
        for (iz, cz) in ez.iter().enumerate() {
            let vz = cp * cz;
            for (iy, cy) in ey.iter().enumerate() {
                let vzy = vz * cy;
                let row = &mut out[(iz * m + iy) * m..(iz * m + iy + 1) * m];
                row.iter_mut().zip(&ex).for_each(|(o, e)| *o += vzy * e);
            }
        }
    }
    out
}

/// Oversampled-FFT gridder for `m^3` modes.
#[derive(Clone, Debug)]
pub struct Gridder {
    modes: usize,
    nf: usize,
    width: usize,
    beta: f64,
    /// Kernel Fourier transform at each centered mode position.
    phihat: Vec<f64>,
}

struct Stencil {
    idx: [usize; MAX_WIDTH],
    val: [f64; MAX_WIDTH],
}

impl Gridder {
    pub fn new(modes: usize, oversample: f64, tol: f64) -> Self {
        let sigma = oversample.max(1.25);
        let tol = tol.clamp(1e-15, 1e-1);
        let width = ((1.0 / tol).ln() / (PI * (1.0 - 1.0 / sigma).sqrt())).ceil() as usize;
        let width = width.clamp(2, MAX_WIDTH);
        let mut nf = (sigma * modes as f64).ceil() as usize;
        nf = nf.max(2 * width).max(modes + 1);
        nf += nf % 2;
        let beta = 0.97 * PI * (1.0 - 0.5 / sigma) * width as f64;
        let mut g = Gridder {
            modes,
            nf,
            width,
            beta,
            phihat: Vec::new(),
        };
        let m0 = mode_min(modes);
        g.phihat = (0..modes)
            .map(|p| g.kernel_ft((p as i64 + m0) as f64))
            .collect();
        g
    }

    pub fn fine_size(&self) -> usize {
        self.nf
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn kernel(&self, t: f64) -> f64 {
        let z = 2.0 * t / self.width as f64;
        let s = 1.0 - z * z;
        if s <= 0.0 {
            0.0
        } else {
            (self.beta * (s.sqrt() - 1.0)).exp()
        }
    }

    /// `int kernel(t) cos(2 pi k t / nf) dt` by composite Simpson.
    fn kernel_ft(&self, k: f64) -> f64 {
        let half = self.width as f64 / 2.0;
        let intervals = 4000;
        let h = 2.0 * half / intervals as f64;
        let mut acc = 0.0;
        for i in 0..=intervals {
            let t = -half + i as f64 * h;
            let wgt = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += wgt * self.kernel(t) * (2.0 * PI * k * t / self.nf as f64).cos();
        }
        acc * h / 3.0
    }

    fn stencil(&self, x: f64) -> Stencil {
        let t = x * self.nf as f64 / (2.0 * PI);
        let l0 = (t - self.width as f64 / 2.0).ceil() as i64;
        let mut s = Stencil {
            idx: [0; MAX_WIDTH],
            val: [0.0; MAX_WIDTH],
        };
        for i in 0..self.width {
            let l = l0 + i as i64;
            s.idx[i] = l.rem_euclid(self.nf as i64) as usize;
            s.val[i] = self.kernel(t - l as f64);
        }
        s
    }

    fn deapod(&self, p: [usize; 3]) -> f64 {
        self.phihat[p[0]] * self.phihat[p[1]] * self.phihat[p[2]]
    }

    /// Fine-grid spectrum of a mode array, ready for repeated interpolation.
    pub fn prepare(&self, f: &[Complex64]) -> PreparedModes<'_> {
        let m = self.modes;
        let nf = self.nf;
        debug_assert_eq!(f.len(), m * m * m);
        let m0 = mode_min(m);
        let wrap = |p: usize| (p as i64 + m0).rem_euclid(nf as i64) as usize;
        let mut fine = vec![czero(); nf * nf * nf];
        for pz in 0..m {
            for py in 0..m {
                for px in 0..m {
                    let v = f[(pz * m + py) * m + px] / self.deapod([px, py, pz]);
                    fine[(wrap(pz) * nf + wrap(py)) * nf + wrap(px)] = v;
                }
            }
        }
        fft_nd(&mut fine, nf, 3, false);
        PreparedModes {
            gridder: self,
            fine,
        }
    }

    /// Approximates [`direct_type2`].
    pub fn type2(&self, f: &[Complex64], x: &[[f64; 3]]) -> Vec<Complex64> {
        self.prepare(f).interp(x)
    }

    fn spread_point<T>(&self, grid: &mut [T], sx: &Stencil, sy: &Stencil, sz: &Stencil, v: T)
    where
        T: Copy + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
    {
        let nf = self.nf;
        let w = self.width;
        for a in 0..w {
            let vz = v * sz.val[a];
            let zoff = sz.idx[a] * nf * nf;
            for b in 0..w {
                let vzy = vz * sy.val[b];
                let off = zoff + sy.idx[b] * nf;
                for i in 0..w {
                    grid[off + sx.idx[i]] += vzy * sx.val[i];
                }
            }
        }
    }

    /// Unnormalized inverse FFT of a spread fine grid, cropped to the modes
    /// and deapodized.
    fn finish_type1(&self, mut fine: Vec<Complex64>) -> Vec<Complex64> {
        let m = self.modes;
        let nf = self.nf;
        fft_nd(&mut fine, nf, 3, true);
        let m0 = mode_min(m);
        let wrap = |p: usize| (p as i64 + m0).rem_euclid(nf as i64) as usize;
        let mut out = vec![czero(); m * m * m];
        for pz in 0..m {
            for py in 0..m {
                for px in 0..m {
                    out[(pz * m + py) * m + px] = fine[(wrap(pz) * nf + wrap(py)) * nf + wrap(px)]
                        / self.deapod([px, py, pz]);
                }
            }
        }
        out
    }

    /// Approximates [`direct_type1`] for several value channels at once.
    pub fn type1_multi(&self, x: &[[f64; 3]], channels: &[&[Complex64]]) -> Vec<Vec<Complex64>> {
        let mut acc = Type1Sum::gridded(self, channels.len(), false);
        let mut vals = vec![czero(); channels.len()];
        for (p, xp) in x.iter().enumerate() {
            for (v, ch) in vals.iter_mut().zip(channels) {
                *v = ch[p];
            }
            acc.add(xp, &vals);
        }
        acc.finish()
    }
}

enum Accum<'a> {
    Direct {
        modes: usize,
        out: Vec<Vec<Complex64>>,
    },
    Complex {
        g: &'a Gridder,
        grids: Vec<Vec<Complex64>>,
    },
    Real {
        g: &'a Gridder,
        grids: Vec<Vec<f64>>,
    },
}

/// Streaming multi-channel type-1 sum `f_c[m] = sum_p v_{p,c} e^{+i x_p.m}`.
///
/// Points are added one at a time so callers never hold the full point set.
pub struct Type1Sum<'a> {
    acc: Accum<'a>,
}

impl<'a> Type1Sum<'a> {
    pub fn direct(modes: usize, channels: usize) -> Self {
        Type1Sum {
            acc: Accum::Direct {
                modes,
                out: vec![vec![czero(); modes.pow(3)]; channels],
            },
        }
    }

    /// Gridded accumulation; `real` keeps the fine grids real, which is
    /// valid only when every added value has zero imaginary part.
    pub fn gridded(g: &'a Gridder, channels: usize, real: bool) -> Self {
        let size = g.nf.pow(3);
        let acc = if real {
            Accum::Real {
                g,
                grids: vec![vec![0.0; size]; channels],
            }
        } else {
            Accum::Complex {
                g,
                grids: vec![vec![czero(); size]; channels],
            }
        };
        Type1Sum { acc }
    }

    pub fn add(&mut self, x: &[f64; 3], vals: &[Complex64]) {
        match &mut self.acc {
            Accum::Direct { modes, out } => {
                let m = *modes;
                let ex = phase_row(x[0], m, 1.0);
                let ey = phase_row(x[1], m, 1.0);
                let ez = phase_row(x[2], m, 1.0);
                let mut plane = vec![czero(); m * m];
                for (iy, cy) in ey.iter().enumerate() {
                    for (ix, cx) in ex.iter().enumerate() {
                        plane[iy * m + ix] = cy * cx;
                    }
                }
                for (o, &v) in out.iter_mut().zip(vals) {
                    if v == czero() {
                        continue;
                    }
                    for (iz, cz) in ez.iter().enumerate() {
                        let vz = v * cz;
                        o[iz * m * m..(iz + 1) * m * m]
                            .iter_mut()
                            .zip(&plane)
                            .for_each(|(a, b)| *a += vz * b);
                    }
                }
            }
            Accum::Complex { g, grids } => {
                let (sx, sy, sz) = (g.stencil(x[0]), g.stencil(x[1]), g.stencil(x[2]));
                for (grid, &v) in grids.iter_mut().zip(vals) {
                    if v != czero() {
                        g.spread_point(grid, &sx, &sy, &sz, v);
                    }
                }
            }
            Accum::Real { g, grids } => {
                let (sx, sy, sz) = (g.stencil(x[0]), g.stencil(x[1]), g.stencil(x[2]));
                for (grid, v) in grids.iter_mut().zip(vals) {
                    debug_assert!(v.im == 0.0);
                    if v.re != 0.0 {
                        g.spread_point(grid, &sx, &sy, &sz, v.re);
                    }
                }
            }
        }
    }

    pub fn finish(self) -> Vec<Vec<Complex64>> {
        match self.acc {
            Accum::Direct { out, .. } => out,
            Accum::Complex { g, grids } => grids.into_iter().map(|c| g.finish_type1(c)).collect(),
            Accum::Real { g, grids } => grids
                .into_iter()
                .map(|c| g.finish_type1(c.into_iter().map(|v| Complex64::new(v, 0.0)).collect()))
                .collect(),
        }
    }
}

/// Mode array transformed onto the fine grid of a [`Gridder`].
pub struct PreparedModes<'a> {
    gridder: &'a Gridder,
    fine: Vec<Complex64>,
}

impl PreparedModes<'_> {
    pub fn interp(&self, x: &[[f64; 3]]) -> Vec<Complex64> {
        let g = self.gridder;
        let nf = g.nf;
        let w = g.width;
        x.iter()
            .map(|xp| {
                let (sx, sy, sz) = (g.stencil(xp[0]), g.stencil(xp[1]), g.stencil(xp[2]));
                let mut acc = czero();
                for a in 0..w {
                    let zoff = sz.idx[a] * nf * nf;
                    let mut acc_z = czero();
                    for b in 0..w {
                        let off = zoff + sy.idx[b] * nf;
                        let mut acc_y = czero();
                        for i in 0..w {
                            acc_y += self.fine[off + sx.idx[i]] * sx.val[i];
                        }
                        acc_z += acc_y * sy.val[b];
                    }
                    acc += acc_z * sz.val[a];
                }
                acc
            })
            .collect()
    }
}

/// Offset of the spatial grid from `2m/N`: `u = 2m/N + offset`.
pub(crate) fn grid_offset(n: usize) -> f64 {
    2.0 * (n / 2) as f64 / n as f64 - 1.0
}

pub(crate) fn check_band(points: &[FreqPoint], n: usize) -> Result<()> {
    let limit = n as f64 / 4.0;
    for (index, p) in points.iter().enumerate() {
        if p.iter().any(|c| !(c.abs() <= limit * (1.0 + 1e-12))) {
            return Err(Error::PointOutOfBand {
                index,
                point: *p,
                limit,
            });
        }
    }
    Ok(())
}

/// Frequency point to mode-sum argument `x = 4 pi xi / N`.
pub(crate) fn to_x(points: &[FreqPoint], n: usize) -> Vec<[f64; 3]> {
    let s = 4.0 * PI / n as f64;
    points.iter().map(|p| p.map(|c| c * s)).collect()
}

/// Phase correcting for the grid offset at a physical frequency.
fn offset_phase(p: &FreqPoint, n: usize, sign: f64) -> Complex64 {
    let off = grid_offset(n);
    if off == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    Complex64::from_polar(1.0, sign * 2.0 * PI * off * (p[0] + p[1] + p[2]))
}

fn check_volume(grid: &Grid) -> Result<()> {
    if grid.dim != 3 {
        return Err(Error::GridMismatch(format!(
            "non-uniform transforms need a volume, got dim {}",
            grid.dim
        )));
    }
    Ok(())
}

/// `(F_3 v)(xi) = sum_u v[u] e^{-2 pi i xi.u}` at arbitrary in-band points.
pub fn nudft_eval(
    source: &Field,
    points: &[FreqPoint],
    method: NuMethod,
) -> Result<Vec<Complex64>> {
    check_volume(&source.grid)?;
    let n = source.grid.n;
    check_band(points, n)?;
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let f: Vec<Complex64> = source
        .data
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    let x = to_x(points, n);
    let mut out = match method {
        NuMethod::Direct => direct_type2(&f, n, &x),
        NuMethod::Gridded { tol } => Gridder::new(n, 2.0, tol).type2(&f, &x),
    };
    for (o, p) in out.iter_mut().zip(points) {
        *o *= offset_phase(p, n, -1.0);
    }
    Ok(out)
}

/// Adjoint of [`nudft_eval`]: `g[u] = sum_p c_p e^{+2 pi i xi_p.u}`.
///
/// `oversample` sets the gridder's fine-grid factor and is ignored by the
/// literal route.
pub fn nudft_adjoint(
    points: &[FreqPoint],
    values: &[Complex64],
    target: Grid,
    oversample: f64,
    method: NuMethod,
) -> Result<ComplexField> {
    check_volume(&target)?;
    if points.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: points.len(),
            actual: values.len(),
        });
    }
    let n = target.n;
    check_band(points, n)?;
    if points.is_empty() {
        return Ok(ComplexField {
            grid: target,
            data: vec![czero(); target.len()],
        });
    }
    let x = to_x(points, n);
    let c: Vec<Complex64> = values
        .iter()
        .zip(points)
        .map(|(v, p)| v * offset_phase(p, n, 1.0))
        .collect();
    let data = match method {
        NuMethod::Direct => direct_type1(&x, &c, n),
        NuMethod::Gridded { tol } => Gridder::new(n, oversample, tol)
            .type1_multi(&x, &[&c])
            .pop()
            .unwrap(),
    };
    Ok(ComplexField { grid: target, data })
}
