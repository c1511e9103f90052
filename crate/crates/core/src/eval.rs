//! Scoring: Fourier shell correlation, mean-subtracted FSC and embedding
//! diagnostics.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::dft_forward;
use crate::graph::SpectralBasis;
use crate::grid::{Field, Grid, Volume};
use crate::linalg::{correlation, norm};
use crate::simulate::{Conformation, Dataset};
use crate::specvols::SpectralVolumes;

/// Correlation per integer-radius frequency shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    /// Side length of the grid the curve was measured on.
    pub n: usize,
    /// One value per shell `0..values.len()`.
    pub values: Vec<f64>,
    /// Fourier samples in each shell.
    pub counts: Vec<usize>,
    /// Shells whose denominator vanished; their value is reported as 0.
    pub degenerate: Vec<bool>,
}

/// Shell of centered frequency index `j`: `floor(|j| + 0.5)`.
pub fn shell_of(j: [i64; 3]) -> usize {
    let r2 = (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]) as f64;
    (r2.sqrt() + 0.5).floor() as usize
}

fn shell_table(grid: Grid) -> (Vec<usize>, usize) {
    let shells: Vec<usize> = (0..grid.len())
        .map(|lin| shell_of(grid.freq_at(lin)))
        .collect();
    let count = shells.iter().max().map_or(0, |m| m + 1);
    (shells, count)
}

/// Shell sums of `F1 conj(F2)`, `|F1|^2` and `|F2|^2`.
#[derive(Clone, Debug)]
struct ShellSums {
    cross: Vec<f64>,
    p1: Vec<f64>,
    p2: Vec<f64>,
    counts: Vec<usize>,
}

impl ShellSums {
    fn new(f1: &[Complex64], f2: &[Complex64], shells: &[usize], count: usize) -> Self {
        let mut s = ShellSums {
            cross: vec![0.0; count],
            p1: vec![0.0; count],
            p2: vec![0.0; count],
            counts: vec![0; count],
        };
        for ((a, b), &sh) in f1.iter().zip(f2).zip(shells) {
            s.cross[sh] += (a * b.conj()).re;
            s.p1[sh] += a.norm_sqr();
            s.p2[sh] += b.norm_sqr();
            s.counts[sh] += 1;
        }
        s
    }

    fn curve(&self, n: usize) -> FscCurve {
        let mut values = Vec::with_capacity(self.cross.len());
        let mut degenerate = Vec::with_capacity(self.cross.len());
        for k in 0..self.cross.len() {
            let den = (self.p1[k] * self.p2[k]).sqrt();
            if den > 0.0 && den.is_finite() {
                values.push((self.cross[k] / den).clamp(-1.0, 1.0));
                degenerate.push(false);
            } else {
                values.push(0.0);
                degenerate.push(true);
            }
        }
        FscCurve {
            n,
            values,
            counts: self.counts.clone(),
            degenerate,
        }
    }
}

/// FSC between two fields on the same grid.
pub fn fsc(a: &Field, b: &Field) -> Result<FscCurve> {
    a.grid.check_same(&b.grid)?;
    let (shells, count) = shell_table(a.grid);
    let (fa, fb) = (dft_forward(a), dft_forward(b));
    Ok(ShellSums::new(&fa.data, &fb.data, &shells, count).curve(a.grid.n))
}

impl FscCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Frequency of shell `k` in cycles per unit length of the `[-1, 1)` box.
    pub fn freq(&self, k: usize) -> f64 {
        k as f64 / 2.0
    }

    /// Wavelength of shell `k` in pixels (infinite for shell 0).
    pub fn wavelength_px(&self, k: usize) -> f64 {
        if k == 0 {
            f64::INFINITY
        } else {
            self.n as f64 / k as f64
        }
    }

    /// Mean value over non-degenerate shells in `lo..=hi`.
    pub fn band_mean(&self, lo: usize, hi: usize) -> f64 {
        let vals: Vec<f64> = (lo..=hi.min(self.len().saturating_sub(1)))
            .filter(|&k| !self.degenerate[k])
            .map(|k| self.values[k])
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Average of the low-frequency quarter of the band, shells
    /// `1..=ceil(N/8)`.
    pub fn low_band_mean(&self) -> f64 {
        self.band_mean(1, self.n.div_ceil(8))
    }

    /// True when every shell is degenerate.
    pub fn all_degenerate(&self) -> bool {
        self.degenerate.iter().all(|&d| d)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shell,freq,wavelength_px,fsc\n");
        for k in 0..self.len() {
            let _ = writeln!(
                out,
                "{k},{},{},{}",
                self.freq(k),
                self.wavelength_px(k),
                self.values[k]
            );
        }
        out
    }
}

/// Shell-wise mean of several curves; a shell is degenerate only when it is
/// degenerate in every curve, and degenerate entries do not count.
pub fn average_curves(curves: &[FscCurve]) -> Option<FscCurve> {
    let first = curves.first()?;
    let len = first.len();
    let mut values = vec![0.0; len];
    let mut used = vec![0usize; len];
    for c in curves {
        for k in 0..len.min(c.len()) {
            if !c.degenerate[k] {
                values[k] += c.values[k];
                used[k] += 1;
            }
        }
    }
    for k in 0..len {
        if used[k] > 0 {
            values[k] /= used[k] as f64;
        }
    }
    Some(FscCurve {
        n: first.n,
        values,
        counts: first.counts.clone(),
        degenerate: used.iter().map(|&u| u == 0).collect(),
    })
}

/// Uniform subsample of `count` indices from `0..n`, in order.
pub fn subsample(n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    (0..count).map(|i| i * n / count).collect()
}

/// Averaged mean-subtracted FSC curves, one per prefix length `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSubtractedFsc {
    /// Images the averages ran over.
    pub images: Vec<usize>,
    /// `curves[i]` uses the first `i + 1` spectral volumes.
    pub curves: Vec<FscCurve>,
}

impl MeanSubtractedFsc {
    pub fn for_r(&self, r: usize) -> Option<&FscCurve> {
        r.checked_sub(1).and_then(|i| self.curves.get(i))
    }
}

/// Mean over the dataset's true volumes.
pub fn truth_mean(ds: &Dataset) -> Result<Volume> {
    let truth = ds.truth.as_ref().ok_or(Error::TruthUnavailable)?;
    let n = truth.conformations.len();
    let mut mean: Option<Volume> = None;
    // Bounded batches keep memory flat for large datasets.
    for start in (0..n).step_by(64) {
        let parts: Vec<Result<Volume>> = (start..(start + 64).min(n))
            .into_par_iter()
            .map(|s| truth.volume(s))
            .collect();
        for p in parts {
            let v = p?;
            match mean.as_mut() {
                Some(m) => m.axpy(1.0, &v),
                None => mean = Some(v),
            }
        }
    }
    let mut mean = mean.ok_or_else(|| Error::InvalidSize("empty dataset".into()))?;
    mean.scale(1.0 / n as f64);
    Ok(mean)
}

/// `FSC(x_s - mean, sum_{l=1}^{r-1} phi_s^(l) alpha^(l))` averaged over a
/// subsample of at most `max_images` images (all of them when `None`), for
/// every `r` from 1 to the number of spectral volumes.
pub fn mean_subtracted_fsc(
    ds: &Dataset,
    sv: &SpectralVolumes,
    basis: &SpectralBasis,
    mean: &Volume,
    max_images: Option<usize>,
) -> Result<MeanSubtractedFsc> {
    let truth = ds.truth.as_ref().ok_or(Error::TruthUnavailable)?;
    let grid = sv
        .grid()
        .ok_or_else(|| Error::InvalidSize("no spectral volumes".into()))?;
    mean.grid.check_same(&grid)?;
    if sv.r() > basis.r() || basis.n() != ds.len() {
        return Err(Error::SizeMismatch(format!(
            "{} spectral volumes, basis {}x{}, {} images",
            sv.r(),
            basis.n(),
            basis.r(),
            ds.len()
        )));
    }
    let (shells, count) = shell_table(grid);
    let spectra: Vec<Vec<Complex64>> = sv.volumes.par_iter().map(|a| dft_forward(a).data).collect();
    let images = subsample(ds.len(), max_images.unwrap_or(ds.len()));
    let r = sv.r();
    let per_image: Vec<Result<Vec<FscCurve>>> = images
        .par_iter()
        .map(|&s| {
            let x = truth.volume(s)?;
            let fx = dft_forward(&x.sub(mean)).data;
            let mut partial = vec![Complex64::new(0.0, 0.0); grid.len()];
            let mut curves = Vec::with_capacity(r);
            for l in 0..r {
                if l >= 1 {
                    let w = basis.phi(s, l);
                    partial
                        .iter_mut()
                        .zip(&spectra[l])
                        .for_each(|(p, a)| *p += a * w);
                }
                curves.push(ShellSums::new(&fx, &partial, &shells, count).curve(grid.n));
            }
            Ok(curves)
        })
        .collect();
    let mut by_r: Vec<Vec<FscCurve>> = vec![Vec::with_capacity(images.len()); r];
    for curves in per_image {
        for (l, c) in curves?.into_iter().enumerate() {
            by_r[l].push(c);
        }
    }
    Ok(MeanSubtractedFsc {
        images,
        curves: by_r
            .iter()
            .map(|c| average_curves(c).expect("non-empty subsample"))
            .collect(),
    })
}

/// Mean of `|x_hat_s - x_s| / |x_s|` over a subsample.
pub fn mean_relative_error(
    ds: &Dataset,
    sv: &SpectralVolumes,
    basis: &SpectralBasis,
    max_images: Option<usize>,
) -> Result<f64> {
    let truth = ds.truth.as_ref().ok_or(Error::TruthUnavailable)?;
    let images = subsample(ds.len(), max_images.unwrap_or(ds.len()));
    let errs: Vec<Result<f64>> = images
        .par_iter()
        .map(|&s| {
            let x = truth.volume(s)?;
            let xh = crate::specvols::reconstruct(sv, basis, s)?;
            let nx = x.norm();
            Ok(if nx > 0.0 {
                xh.sub(&x).norm() / nx
            } else {
                xh.norm()
            })
        })
        .collect();
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / images.len().max(1) as f64)
}

/// How well the first nontrivial eigenvectors track the true conformations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    /// Turns of `atan2(phi^(2), phi^(1))` per turn of the true angle.
    pub winding: Option<i64>,
    /// Coefficient of variation of `|(phi^(1), phi^(2))|`.
    pub radius_cv: Option<f64>,
    /// Rank of the correlation matrix between `(phi^(1), phi^(2))` and the
    /// true two-parameter displacement.
    pub rank: Option<usize>,
    /// Ratio of its singular values.
    pub condition: Option<f64>,
}

/// Net turns of the planar curve `points`, closed back to its start.
pub fn winding_of(points: &[[f64; 2]]) -> i64 {
    let mut total = 0.0;
    for k in 0..points.len() {
        let a = points[k];
        let b = points[(k + 1) % points.len()];
        let mut d = b[1].atan2(b[0]) - a[1].atan2(a[0]);
        while d > PI {
            d -= 2.0 * PI;
        }
        while d <= -PI {
            d += 2.0 * PI;
        }
        total += d;
    }
    (total / (2.0 * PI)).round() as i64
}

/// Winding of the embedding against the true angle.
///
/// Embedding points are averaged within `bins` equal angle bins first, so
/// the count follows the trend rather than per-image scatter. The sign
/// depends on the arbitrary orientation of the eigenvector pair.
pub fn embedding_winding(basis: &SpectralBasis, angles: &[f64], bins: usize) -> Result<i64> {
    if basis.r() < 3 {
        return Err(Error::InvalidSize(
            "winding needs eigenvectors 1 and 2".into(),
        ));
    }
    if angles.len() != basis.n() {
        return Err(Error::LengthMismatch {
            expected: basis.n(),
            actual: angles.len(),
        });
    }
    let bins = bins.max(3);
    let mut sums = vec![[0.0f64; 2]; bins];
    let mut counts = vec![0usize; bins];
    for (s, &t) in angles.iter().enumerate() {
        let b = ((t.rem_euclid(2.0 * PI) / (2.0 * PI)) * bins as f64) as usize % bins;
        sums[b][0] += basis.phi(s, 1);
        sums[b][1] += basis.phi(s, 2);
        counts[b] += 1;
    }
    let pts: Vec<[f64; 2]> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(p, &c)| [p[0] / c as f64, p[1] / c as f64])
        .collect();
    Ok(winding_of(&pts))
}

/// Coefficient of variation of the radius in the `(phi^(1), phi^(2))` plane.
pub fn radius_cv(basis: &SpectralBasis) -> f64 {
    let radii: Vec<f64> = (0..basis.n())
        .map(|s| basis.phi(s, 1).hypot(basis.phi(s, 2)))
        .collect();
    let n = radii.len() as f64;
    let mean = radii.iter().sum::<f64>() / n;
    let var = radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if mean > 0.0 {
        var.sqrt() / mean
    } else {
        f64::INFINITY
    }
}

/// Rank and condition of the 2x2 correlation matrix between the embedding
/// `(phi^(1), phi^(2))` and the true coordinates. Singular values below a
/// tenth of the largest do not count toward the rank.
pub fn embedding_rank(basis: &SpectralBasis, coords: &[[f64; 2]]) -> Result<(usize, f64)> {
    if basis.r() < 3 {
        return Err(Error::InvalidSize("rank needs eigenvectors 1 and 2".into()));
    }
    let phi: [Vec<f64>; 2] = [basis.eigvecs[1].clone(), basis.eigvecs[2].clone()];
    let truth: [Vec<f64>; 2] = [
        coords.iter().map(|c| c[0]).collect(),
        coords.iter().map(|c| c[1]).collect(),
    ];
    let m = [
        [
            correlation(&phi[0], &truth[0]),
            correlation(&phi[0], &truth[1]),
        ],
        [
            correlation(&phi[1], &truth[0]),
            correlation(&phi[1], &truth[1]),
        ],
    ];
    let (s1, s2) = singular_values_2x2(m);
    let rank = [s1, s2]
        .iter()
        .filter(|&&s| s > 0.1 * s1 && s > 0.0)
        .count();
    let cond = if s2 > 0.0 { s1 / s2 } else { f64::INFINITY };
    Ok((rank, cond))
}

/// Singular values of a 2x2 matrix, larger first.
pub fn singular_values_2x2(m: [[f64; 2]; 2]) -> (f64, f64) {
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let p = ((a + d).powi(2) + (c - b).powi(2)).sqrt();
    let q = ((a - d).powi(2) + (b + c).powi(2)).sqrt();
    (0.5 * (p + q), 0.5 * (p - q).abs())
}

/// Cosine between the pair `est` and the pair `reference` after the best
/// orthogonal 2x2 mixing of `est`, which is how a degenerate eigenvalue
/// pair is determined.
pub fn aligned_pair_cosine(est: [&[f64]; 2], reference: [&[f64]; 2]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = [
        [dot(est[0], reference[0]), dot(est[0], reference[1])],
        [dot(est[1], reference[0]), dot(est[1], reference[1])],
    ];
    let (s1, s2) = singular_values_2x2(m);
    let ne = (norm(est[0]).powi(2) + norm(est[1]).powi(2)).sqrt();
    let nr = (norm(reference[0]).powi(2) + norm(reference[1]).powi(2)).sqrt();
    if ne == 0.0 || nr == 0.0 {
        return 0.0;
    }
    (s1 + s2) / (ne * nr)
}

/// Embedding diagnostics appropriate to the dataset's conformations.
pub fn embedding_diagnostics(
    ds: &Dataset,
    basis: &SpectralBasis,
    symmetry_bins: usize,
) -> Result<EmbeddingReport> {
    let truth = ds.truth.as_ref().ok_or(Error::TruthUnavailable)?;
    let mut report = EmbeddingReport::default();
    if basis.r() < 3 {
        return Ok(report);
    }
    let angles: Option<Vec<f64>> = truth.conformations.iter().map(|c| c.angle()).collect();
    if let Some(angles) = angles {
        report.winding = Some(embedding_winding(basis, &angles, symmetry_bins)?);
        report.radius_cv = Some(radius_cv(basis));
    } else {
        let coords: Vec<[f64; 2]> = truth
            .conformations
            .iter()
            .map(|c| match c {
                Conformation::Shift(x, y) => [*x as f64, *y as f64],
                Conformation::Angle(t) => [t.cos(), t.sin()],
            })
            .collect();
        let (rank, cond) = embedding_rank(basis, &coords)?;
        report.rank = Some(rank);
        report.condition = Some(cond);
    }
    Ok(report)
}

const SVG_COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of FSC against shell frequency.
pub fn curves_svg(curves: &[(String, &FscCurve)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let max_shell = curves
        .iter()
        .map(|(_, c)| c.len())
        .max()
        .unwrap_or(1)
        .max(2)
        - 1;
    let sx = |k: usize| pad + (w - 2.0 * pad) * k as f64 / max_shell as f64;
    let sy = |v: f64| pad + (h - 2.0 * pad) * (1.0 - v) / 2.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{pad}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="gray"/>"#,
        y0 = sy(0.0),
        x1 = w - pad
    );
    let _ = writeln!(
        out,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">shell</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" font-size="12">FSC</text>"#,
        h / 2.0
    );
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> = (0..c.len())
            .map(|k| format!("{:.1},{:.1}", sx(k), sy(c.values[k])))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{label}</text>"#,
            w - pad + 4.0,
            pad + 14.0 * (i as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}
