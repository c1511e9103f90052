//! Tomographic projection through the Fourier slice theorem.
//!
//! An image's Fourier transform at index `j` is the volume's transform at
//! `R^T [j1/2, j2/2, 0]`, times the CTF. Only frequencies strictly inside
//! the disk `|j| < N/2` are kept. The disk is symmetric under `j -> -j`,
//! so images of real volumes are exactly real and every slice point stays
//! inside the volume's band.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::fourier::{dft_forward, dft_inverse_real, FourierGrid};
use crate::grid::{Field, Grid, Image, Volume};
use crate::nufft::{self, FreqPoint, Gridder, NuMethod, Type1Sum};
use crate::rotation::Rotation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingOperator {
    pub rotation: Rotation,
    pub ctf: CtfParams,
}

impl ImagingOperator {
    pub fn new(rotation: Rotation, ctf: CtfParams) -> Self {
        ImagingOperator { rotation, ctf }
    }

    /// Identity rotation without CTF.
    pub fn plain() -> Self {
        ImagingOperator {
            rotation: Rotation::identity(),
            ctf: CtfParams::disabled(),
        }
    }

    /// Fourier filter value at image frequency `j` on an `n`-pixel image.
    pub fn filter_at(&self, j: [i64; 2], n: usize) -> f64 {
        let r2 = (j[0] * j[0] + j[1] * j[1]) as f64;
        let h = n as f64 / 2.0;
        if r2 >= h * h {
            return 0.0;
        }
        self.ctf.eval_index(r2.sqrt(), n)
    }
}

/// `R^{-1}[k1, k2, 0]` for every centered image frequency, in storage order.
pub fn slice_points(rotation: &Rotation, image_grid: Grid) -> Vec<FreqPoint> {
    let g = Grid::image(image_grid.n);
    (0..g.len())
        .map(|lin| {
            let j = g.freq_at(lin);
            rotation.apply_inverse([j[0] as f64 / 2.0, j[1] as f64 / 2.0, 0.0])
        })
        .collect()
}

/// Image frequencies inside the disk, reduced to one of each `+-j` pair.
#[derive(Clone, Debug)]
pub struct SliceLayout {
    pub n: usize,
    /// Representative frequency indices, DC first.
    pub freqs: Vec<[i64; 2]>,
    /// Centered linear position of each representative.
    pub pos: Vec<usize>,
    /// Centered linear position of each mirror `-j`.
    pub mirror: Vec<usize>,
    /// 1 for DC, 2 for a representative standing in for a pair.
    pub mult: Vec<f64>,
}

impl SliceLayout {
    pub fn new(n: usize) -> Self {
        let g = Grid::image(n);
        let h = n as f64 / 2.0;
        let mut out = SliceLayout {
            n,
            freqs: vec![[0, 0]],
            pos: vec![g.index(&[g.freq_pos(0).unwrap(), g.freq_pos(0).unwrap()])],
            mirror: vec![0],
            mult: vec![1.0],
        };
        out.mirror[0] = out.pos[0];
        for lin in 0..g.len() {
            let j = g.freq_at(lin);
            let (j1, j2) = (j[0], j[1]);
            let upper = j2 > 0 || (j2 == 0 && j1 > 0);
            if !upper || ((j1 * j1 + j2 * j2) as f64) >= h * h {
                continue;
            }
            let m = g.index(&[g.freq_pos(-j1).unwrap(), g.freq_pos(-j2).unwrap()]);
            out.freqs.push([j1, j2]);
            out.pos.push(lin);
            out.mirror.push(m);
            out.mult.push(2.0);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Rotated frequency points of the representatives.
    pub fn points(&self, rot: &Rotation) -> Vec<FreqPoint> {
        self.freqs
            .iter()
            .map(|j| rot.apply_inverse([j[0] as f64 / 2.0, j[1] as f64 / 2.0, 0.0]))
            .collect()
    }

    /// Filter values of the representatives.
    pub fn filter(&self, op: &ImagingOperator) -> Vec<f64> {
        self.freqs
            .iter()
            .map(|&j| op.filter_at(j, self.n))
            .collect()
    }
}

/// Projection and backprojection on a fixed grid size.
#[derive(Clone, Debug)]
pub struct Projector {
    pub n: usize,
    pub method: NuMethod,
    layout: SliceLayout,
    gridder: Option<Gridder>,
}

impl Projector {
    pub fn new(n: usize, method: NuMethod) -> Self {
        let gridder = match method {
            NuMethod::Direct => None,
            NuMethod::Gridded { tol } => Some(Gridder::new(n, 2.0, tol)),
        };
        Projector {
            n,
            method,
            layout: SliceLayout::new(n),
            gridder,
        }
    }

    pub fn auto(n: usize) -> Self {
        Projector::new(n, NuMethod::auto(n))
    }

    pub fn layout(&self) -> &SliceLayout {
        &self.layout
    }

    fn check_volume(&self, v: &Volume) -> Result<()> {
        v.grid.check_same(&Grid::volume(self.n))
    }

    fn check_image(&self, y: &Image) -> Result<()> {
        y.grid.check_same(&Grid::image(self.n))
    }

    /// `x = 4 pi xi / N` and the odd-grid offset phase for each point.
    fn args(&self, pts: &[FreqPoint]) -> Vec<[f64; 3]> {
        nufft::to_x(pts, self.n)
    }

    fn offset(&self, p: &FreqPoint, sign: f64) -> Complex64 {
        let off = nufft::grid_offset(self.n);
        Complex64::from_polar(
            1.0,
            sign * 2.0 * std::f64::consts::PI * off * (p[0] + p[1] + p[2]),
        )
    }

    fn image_from_half(&self, vals: &[Complex64]) -> Image {
        let g = Grid::image(self.n);
        let mut f = FourierGrid::zeros(g);
        for (k, v) in vals.iter().enumerate() {
            f.data[self.layout.pos[k]] = *v;
            f.data[self.layout.mirror[k]] = v.conj();
        }
        f.data[self.layout.pos[0]] = Complex64::new(vals[0].re, 0.0);
        let (img, residue) = dft_inverse_real(&f);
        if residue > 1e-9 {
            log::warn!("projection discarded imaginary residue {residue:.2e}");
        }
        img
    }

    /// Images of one volume under several operators.
    pub fn project_many(&self, volume: &Volume, ops: &[ImagingOperator]) -> Result<Vec<Image>> {
        self.check_volume(volume)?;
        let f: Vec<Complex64> = volume
            .data
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        let prepared = self.gridder.as_ref().map(|g| g.prepare(&f));
        Ok(ops
            .iter()
            .map(|op| {
                let pts = self.layout.points(&op.rotation);
                let x = self.args(&pts);
                let raw = match &prepared {
                    Some(p) => p.interp(&x),
                    None => nufft::direct_type2(&f, self.n, &x),
                };
                let h = self.layout.filter(op);
                let vals: Vec<Complex64> = raw
                    .iter()
                    .zip(&pts)
                    .zip(&h)
                    .map(|((c, p), hj)| c * self.offset(p, -1.0) * *hj)
                    .collect();
                self.image_from_half(&vals)
            })
            .collect())
    }

    pub fn project(&self, volume: &Volume, op: &ImagingOperator) -> Result<Image> {
        Ok(self
            .project_many(volume, std::slice::from_ref(op))?
            .pop()
            .unwrap())
    }

    /// Half-plane backprojection values `mult * H_j F2(y)_j / N^2` with the
    /// odd-grid phase folded in.
    fn backprojection_values(
        &self,
        image: &Image,
        op: &ImagingOperator,
        pts: &[FreqPoint],
    ) -> Vec<Complex64> {
        let fy = dft_forward(image);
        let h = self.layout.filter(op);
        let norm = 1.0 / (self.n * self.n) as f64;
        (0..self.layout.len())
            .map(|k| {
                fy.data[self.layout.pos[k]]
                    * (h[k] * self.layout.mult[k] * norm)
                    * self.offset(&pts[k], 1.0)
            })
            .collect()
    }

    fn new_sum(&self, channels: usize) -> Type1Sum<'_> {
        match &self.gridder {
            Some(g) => Type1Sum::gridded(g, channels, false),
            None => Type1Sum::direct(self.n, channels),
        }
    }

    /// Exact adjoint of [`Projector::project`].
    pub fn backproject(&self, image: &Image, op: &ImagingOperator) -> Result<Volume> {
        let w = [1.0];
        let mut out = self.backproject_weighted(
            std::slice::from_ref(image),
            std::slice::from_ref(op),
            &[&w[..]],
        )?;
        Ok(out.pop().unwrap())
    }

    /// `sum_s w_c[s] P_s^T y_s` for every weight channel `c`.
    pub fn backproject_weighted(
        &self,
        images: &[Image],
        ops: &[ImagingOperator],
        weights: &[&[f64]],
    ) -> Result<Vec<Volume>> {
        if images.len() != ops.len() {
            return Err(Error::SizeMismatch(format!(
                "{} images but {} operators",
                images.len(),
                ops.len()
            )));
        }
        for w in weights {
            if w.len() != images.len() {
                return Err(Error::SizeMismatch(format!(
                    "weight channel of length {} for {} images",
                    w.len(),
                    images.len()
                )));
            }
        }
        let mut sum = self.new_sum(weights.len());
        let mut vals = vec![Complex64::new(0.0, 0.0); weights.len()];
        for (s, (img, op)) in images.iter().zip(ops).enumerate() {
            self.check_image(img)?;
            if weights.iter().all(|w| w[s] == 0.0) {
                continue;
            }
            let pts = self.layout.points(&op.rotation);
            let base = self.backprojection_values(img, op, &pts);
            let x = self.args(&pts);
            for (k, xk) in x.iter().enumerate() {
                if base[k] == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for (v, w) in vals.iter_mut().zip(weights) {
                    *v = base[k] * w[s];
                }
                sum.add(xk, &vals);
            }
        }
        let g = Grid::volume(self.n);
        Ok(sum
            .finish()
            .into_iter()
            .map(|c| Field {
                grid: g,
                data: c.iter().map(|v| v.re).collect(),
            })
            .collect())
    }

    /// `P^T P v`, composed literally.
    pub fn normal(&self, v: &Volume, op: &ImagingOperator) -> Result<Volume> {
        let y = self.project(v, op)?;
        self.backproject(&y, op)
    }
}

/// Projection with the default transform route for the volume's size.
pub fn project(volume: &Volume, op: &ImagingOperator) -> Result<Image> {
    Projector::auto(volume.grid.n).project(volume, op)
}

/// Adjoint of [`project`] onto `target`.
pub fn backproject(image: &Image, op: &ImagingOperator, target: Grid) -> Result<Volume> {
    if target.dim != 3 || target.n != image.grid.n {
        return Err(Error::GridMismatch(format!(
            "image {}^{} cannot backproject onto {}^{}",
            image.grid.n, image.grid.dim, target.n, target.dim
        )));
    }
    Projector::auto(target.n).backproject(image, op)
}
