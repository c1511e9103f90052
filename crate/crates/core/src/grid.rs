//! Sampling grids and real-valued fields on them.
//!
//! Spatial samples sit at `u = -1 + 2i/N` along each axis. Frequency
//! indices run over `j = -floor(N/2) ..= ceil(N/2) - 1` with physical
//! frequency `k = j / 2`, so `e^{-2 pi i k u}` reduces to ordinary DFT
//! twiddles up to a `(-1)^j` centering phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub dim: usize,
}

impl Grid {
    pub fn new(n: usize, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("N must be positive".into()));
        }
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidGrid(format!("dim must be 2 or 3, got {dim}")));
        }
        Ok(Grid { n, dim })
    }

    pub fn volume(n: usize) -> Self {
        Grid::new(n, 3).expect("positive grid size")
    }

    pub fn image(n: usize) -> Self {
        Grid::new(n, 2).expect("positive grid size")
    }

    /// Total number of samples, `N^dim`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.n as f64
    }

    /// Spatial coordinate of sample `i` along one axis.
    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / self.n as f64
    }

    /// Smallest frequency index, `-floor(N/2)`.
    pub fn freq_min(&self) -> i64 {
        -((self.n / 2) as i64)
    }

    /// Frequency index stored at centered position `p`.
    pub fn freq(&self, p: usize) -> i64 {
        p as i64 + self.freq_min()
    }

    /// Centered storage position of frequency index `j`, if on the grid.
    pub fn freq_pos(&self, j: i64) -> Option<usize> {
        let p = j - self.freq_min();
        (p >= 0 && (p as usize) < self.n).then_some(p as usize)
    }

    /// Linear index of a multi-index, x fastest.
    pub fn index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.n + i)
    }

    /// Multi-index of a linear index, padded with zeros to length 3.
    pub fn unravel(&self, mut lin: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for slot in out.iter_mut().take(self.dim) {
            *slot = lin % self.n;
            lin /= self.n;
        }
        out
    }

    /// Frequency multi-index `j` at centered linear position `lin`.
    pub fn freq_at(&self, lin: usize) -> [i64; 3] {
        let p = self.unravel(lin);
        let mut j = [0i64; 3];
        for a in 0..self.dim {
            j[a] = self.freq(p[a]);
        }
        j
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{}^{} vs {}^{}",
                self.n, self.dim, other.n, other.dim
            )));
        }
        Ok(())
    }
}

/// Real samples on a grid, x fastest-varying.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub data: Vec<f64>,
}

/// A field on a three-dimensional grid.
pub type Volume = Field;
/// A field on a two-dimensional grid.
pub type Image = Field;

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Field {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field data"));
        }
        Ok(Field { grid, data })
    }

    /// Samples `f(u)` at every grid point, with unused trailing coordinates zero.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..grid.len())
            .map(|lin| {
                let idx = grid.unravel(lin);
                let mut u = [0.0; 3];
                for a in 0..grid.dim {
                    u[a] = grid.coord(idx[a]);
                }
                f(u)
            })
            .collect();
        Field { grid, data }
    }

    pub fn dot(&self, other: &Field) -> f64 {
        crate::linalg::dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Field) {
        crate::linalg::axpy(&mut self.data, c, &other.data);
    }

    pub fn sub(&self, other: &Field) -> Field {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Field {
            grid: self.grid,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
