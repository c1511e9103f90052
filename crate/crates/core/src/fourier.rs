//! Centered discrete Fourier transforms on [`Grid`]s.
//!
//! `F(j) = sum_u s[u] e^{-2 pi i (j/2) u}` over the spatial grid. With
//! `u = -1 + 2i/N` this is `(-1)^j` times the ordinary DFT bin `j mod N`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{Field, Grid};

/// Complex samples at centered frequency indices, x fastest.
///
/// Position `p` along an axis holds frequency `j = p - floor(N/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierGrid {
    pub grid: Grid,
    pub data: Vec<Complex64>,
}

impl FourierGrid {
    pub fn zeros(grid: Grid) -> Self {
        FourierGrid {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn get(&self, j: [i64; 3]) -> Option<Complex64> {
        let mut lin = 0;
        for a in (0..self.grid.dim).rev() {
            lin = lin * self.grid.n + self.grid.freq_pos(j[a])?;
        }
        Some(self.data[lin])
    }

    /// Largest `|F(-j) - conj F(j)|` relative to the largest magnitude,
    /// over frequencies whose mirror is on the grid.
    pub fn hermitian_defect(&self) -> f64 {
        let scale = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for lin in 0..self.data.len() {
            let j = self.grid.freq_at(lin);
            let neg = [-j[0], -j[1], -j[2]];
            if let Some(m) = self.get(neg) {
                worst = worst.max((m - self.data[lin].conj()).norm());
            }
        }
        worst / scale
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unnormalized in-place FFT over every axis of an `n^dim` array, x fastest.
///
/// `inverse` selects the `e^{+2 pi i}` sign; no `1/n^dim` factor is applied.
pub fn fft_nd(buf: &mut [Complex64], n: usize, dim: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), n.pow(dim as u32));
    if n <= 1 {
        return;
    }
    let fft = plan(n, inverse);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    // x lines are contiguous
    fft.process_with_scratch(buf, &mut scratch);
    if dim < 2 {
        return;
    }
    let total = buf.len();
    let mut lines = vec![Complex64::new(0.0, 0.0); total];
    for axis in 1..dim {
        let stride = n.pow(axis as u32);
        let block = stride * n;
        // gather every line along `axis` into contiguous storage
        let mut l = 0;
        for base in (0..total).step_by(block) {
            for off in 0..stride {
                let start = base + off;
                for k in 0..n {
                    lines[l * n + k] = buf[start + k * stride];
                }
                l += 1;
            }
        }
        fft.process_with_scratch(&mut lines, &mut scratch);
        let mut l = 0;
        for base in (0..total).step_by(block) {
            for off in 0..stride {
                let start = base + off;
                for k in 0..n {
                    buf[start + k * stride] = lines[l * n + k];
                }
                l += 1;
            }
        }
    }
}

/// Maps centered position `p` to FFT bin and the `(-1)^j` centering sign.
fn bin_and_sign(grid: &Grid, p: usize) -> (usize, f64) {
    let j = grid.freq(p);
    let bin = j.rem_euclid(grid.n as i64) as usize;
    let sign = if j.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    (bin, sign)
}

fn lin_bin_and_sign(grid: &Grid, lin: usize) -> (usize, f64) {
    let p = grid.unravel(lin);
    let mut bin = 0;
    let mut sign = 1.0;
    for a in (0..grid.dim).rev() {
        let (b, s) = bin_and_sign(grid, p[a]);
        bin = bin * grid.n + b;
        sign *= s;
    }
    (bin, sign)
}

/// Centered transform of a complex array on `grid`.
pub fn dft_forward_complex(grid: Grid, data: &[Complex64]) -> FourierGrid {
    let mut buf = data.to_vec();
    fft_nd(&mut buf, grid.n, grid.dim, false);
    let mut out = FourierGrid::zeros(grid);
    for (lin, o) in out.data.iter_mut().enumerate() {
        let (bin, sign) = lin_bin_and_sign(&grid, lin);
        *o = buf[bin] * sign;
    }
    out
}

/// Centered transform of a real field.
pub fn dft_forward(signal: &Field) -> FourierGrid {
    let data: Vec<Complex64> = signal
        .data
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    dft_forward_complex(signal.grid, &data)
}

/// Inverse of [`dft_forward_complex`], returning complex spatial samples.
pub fn dft_inverse_complex(f: &FourierGrid) -> Vec<Complex64> {
    let grid = f.grid;
    let mut buf = vec![Complex64::new(0.0, 0.0); grid.len()];
    for (lin, &v) in f.data.iter().enumerate() {
        let (bin, sign) = lin_bin_and_sign(&grid, lin);
        buf[bin] = v * sign;
    }
    fft_nd(&mut buf, grid.n, grid.dim, true);
    let scale = 1.0 / grid.len() as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse transform keeping the real part.
pub fn dft_inverse(f: &FourierGrid) -> Field {
    let data = dft_inverse_complex(f).iter().map(|c| c.re).collect();
    Field { grid: f.grid, data }
}

/// Inverse transform returning the real part and the relative size of the
/// discarded imaginary part.
pub fn dft_inverse_real(f: &FourierGrid) -> (Field, f64) {
    let c = dft_inverse_complex(f);
    let re: f64 = c.iter().map(|v| v.re * v.re).sum::<f64>().sqrt();
    let im: f64 = c.iter().map(|v| v.im * v.im).sum::<f64>().sqrt();
    let residue = if re > 0.0 { im / re } else { im };
    let field = Field {
        grid: f.grid,
        data: c.iter().map(|v| v.re).collect(),
    };
    (field, residue)
}
