//! Synthetic phantoms and noisy tomographic datasets.
//!
//! Phantoms are sums of smoothed indicator shapes and Gaussian lobes,
//! evaluated analytically on the grid. Edges are blurred by a Gaussian of
//! `smoothing` grid steps so the volumes are close to band-limited.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::fourier::{dft_forward, dft_inverse};
use crate::grid::{Field, Grid, Volume};
use crate::imaging::{ImagingOperator, Projector};
use crate::rotation::Rotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Clock2d,
    Clock3d,
    Spin,
    Stretch,
}

impl PhantomKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clock2d" => Some(PhantomKind::Clock2d),
            "clock3d" => Some(PhantomKind::Clock3d),
            "spin" => Some(PhantomKind::Spin),
            "stretch" => Some(PhantomKind::Stretch),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhantomKind::Clock2d => "clock2d",
            PhantomKind::Clock3d => "clock3d",
            PhantomKind::Spin => "spin",
            PhantomKind::Stretch => "stretch",
        }
    }

    pub fn dim(&self) -> usize {
        if *self == PhantomKind::Clock2d {
            2
        } else {
            3
        }
    }

    pub fn is_angular(&self) -> bool {
        *self != PhantomKind::Stretch
    }
}

/// Where a molecule sits on its conformation manifold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conformation {
    Angle(f64),
    Shift(i32, i32),
}

impl Conformation {
    pub fn angle(&self) -> Option<f64> {
        match self {
            Conformation::Angle(t) => Some(*t),
            _ => None,
        }
    }

    /// Coordinates as a flat vector (one angle or two displacements).
    pub fn coords(&self) -> Vec<f64> {
        match *self {
            Conformation::Angle(t) => vec![t],
            Conformation::Shift(x, y) => vec![x as f64, y as f64],
        }
    }
}

/// Shape constants, in grid units where the box is `[-1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub rim_radius: f64,
    pub rim_width: f64,
    pub hand_length: f64,
    pub hand_width: f64,
    /// Half thickness of the 3D clock along z.
    pub clock_half_depth: f64,
    pub base_radius: f64,
    pub top_radius: f64,
    pub lobe_sigma: f64,
    /// Gaussian edge blur in grid steps.
    pub smoothing: f64,
    /// Slice index where the stretch displacement equals `(dx, dy)`.
    /// Defaults to `round(16 N / 108)`.
    pub z0: Option<usize>,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            rim_radius: 0.8,
            rim_width: 0.06,
            hand_length: 0.6,
            hand_width: 0.06,
            clock_half_depth: 0.12,
            base_radius: 0.42,
            top_radius: 0.45,
            lobe_sigma: 0.15,
            smoothing: 1.5,
            z0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub n: usize,
    pub symmetry_order: usize,
    pub conformation: Conformation,
    pub geometry: Geometry,
    pub delta_max: i32,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, n: usize, conformation: Conformation) -> Self {
        PhantomSpec {
            kind,
            n,
            symmetry_order: 4,
            conformation,
            geometry: Geometry::default(),
            delta_max: 4,
        }
    }

    pub fn z0(&self) -> usize {
        self.geometry
            .z0
            .unwrap_or_else(|| (16.0 * self.n as f64 / 108.0).round() as usize)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n < 2 {
            return bad(format!("N = {} is too small", self.n));
        }
        if self.symmetry_order < 1 {
            return bad("symmetry order must be at least 1".into());
        }
        match (self.kind, self.conformation) {
            (PhantomKind::Stretch, Conformation::Shift(dx, dy)) => {
                if dx.abs() > self.delta_max || dy.abs() > self.delta_max {
                    return bad(format!(
                        "displacement ({dx}, {dy}) exceeds {}",
                        self.delta_max
                    ));
                }
                if self.z0() >= self.n / 2 {
                    return bad(format!("z0 = {} must lie below N/2", self.z0()));
                }
            }
            (PhantomKind::Stretch, _) => return bad("stretch needs a displacement".into()),
            (_, Conformation::Angle(t)) if t.is_finite() => {}
            (_, _) => return bad("angular phantom needs a finite angle".into()),
        }
        Ok(())
    }
}

/// Gaussian-blurred indicator of `[lo, hi]` along one coordinate.
fn soft_box(x: f64, lo: f64, hi: f64, s: f64) -> f64 {
    let k = 1.0 / (std::f64::consts::SQRT_2 * s);
    0.5 * (libm::erf((x - lo) * k) - libm::erf((x - hi) * k))
}

fn gauss(d2: f64, s: f64) -> f64 {
    (-d2 / (2.0 * s * s)).exp()
}

fn clock_face(x: f64, y: f64, theta: f64, g: &Geometry, s: f64) -> f64 {
    let r = (x * x + y * y).sqrt();
    let half = g.rim_width / 2.0;
    let rim = soft_box(r, g.rim_radius - half, g.rim_radius + half, s);
    let (sn, cs) = theta.sin_cos();
    // hand frame: along = direction of the hand, across = perpendicular
    let along = cs * x + sn * y;
    let across = -sn * x + cs * y;
    let hw = g.hand_width / 2.0;
    let hand = soft_box(along, 0.0, g.hand_length, s) * soft_box(across, -hw, hw, s);
    rim + hand
}

fn spin_density(u: [f64; 3], theta: f64, c: usize, g: &Geometry, s: f64) -> f64 {
    let [x, y, z] = u;
    let r = (x * x + y * y).sqrt();
    let base = soft_box(r, 0.12, g.base_radius, s) * soft_box(z, -0.65, -0.05, s);
    let stem = soft_box(r, -1.0, 0.1, s) * soft_box(z, -0.05, 0.5, s);
    let mut top = 0.0;
    for k in 0..c {
        let a = theta + 2.0 * PI * k as f64 / c as f64;
        let (lx, ly) = (g.top_radius * a.cos(), g.top_radius * a.sin());
        // lobes are elongated tangentially so the top has a handedness
        let (tx, ty) = (-(a.sin()), a.cos());
        let dx = x - lx;
        let dy = y - ly;
        let tang = dx * tx + dy * ty;
        let rad = dx * a.cos() + dy * a.sin();
        let dz = z - 0.3;
        let d2 = rad * rad + 0.5 * (tang - 0.3 * rad).powi(2) + dz * dz;
        top += gauss(d2, g.lobe_sigma);
    }
    base + stem + top
}

fn stretch_base(u: [f64; 3], g: &Geometry, s: f64) -> f64 {
    let [x, y, z] = u;
    let r = (x * x + y * y).sqrt();
    let top = soft_box(r, 0.1, g.top_radius, s) * soft_box(z, 0.05, 0.6, s);
    let mut bumps = 0.0;
    for k in 0..4 {
        let a = PI / 4.0 + PI / 2.0 * k as f64;
        let d2 = (x - 0.35 * a.cos()).powi(2) + (y - 0.35 * a.sin()).powi(2) + (z - 0.7).powi(2);
        bumps += 0.8 * gauss(d2, 0.08);
    }
    let skirt = soft_box(r, -1.0, 0.25, s) * soft_box(z, -0.6, 0.0, s);
    let foot = gauss(
        (x - 0.12).powi(2) + (y + 0.05).powi(2) + (z + 0.45).powi(2),
        0.12,
    );
    top + bumps + skirt + foot
}

/// Stretch profile `s_z = ((N/2 - z) / (N/2 - z0))^2` for `z <= N/2`, else 0.
pub fn stretch_profile(z: usize, n: usize, z0: usize) -> f64 {
    let h = (n / 2) as f64;
    if z as f64 > h {
        return 0.0;
    }
    ((h - z as f64) / (h - z0 as f64)).powi(2)
}

/// Shifts each slice `z` so that `v'[x, y] = v[x + dx s_z, y + dy s_z]`,
/// using a Fourier phase ramp.
fn stretch_slices(base: &Volume, dx: i32, dy: i32, z0: usize) -> Volume {
    let n = base.grid.n;
    let mut out = base.clone();
    if dx == 0 && dy == 0 {
        return out;
    }
    let ig = Grid::image(n);
    for z in 0..n {
        let s = stretch_profile(z, n, z0);
        if s == 0.0 {
            continue;
        }
        let (sx, sy) = (dx as f64 * s, dy as f64 * s);
        let slab = &base.data[z * n * n..(z + 1) * n * n];
        let mut f = dft_forward(&Field {
            grid: ig,
            data: slab.to_vec(),
        });
        for lin in 0..ig.len() {
            let j = ig.freq_at(lin);
            let ph = 2.0 * PI * (j[0] as f64 * sx + j[1] as f64 * sy) / n as f64;
            f.data[lin] *= Complex64::from_polar(1.0, ph);
        }
        let shifted = dft_inverse(&f);
        out.data[z * n * n..(z + 1) * n * n].copy_from_slice(&shifted.data);
    }
    out
}

/// Clean density described by a `PhantomSpec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Field> {
    spec.validate()?;
    let g = &spec.geometry;
    let n = spec.n;
    let s = g.smoothing * 2.0 / n as f64;
    let field = match (spec.kind, spec.conformation) {
        (PhantomKind::Clock2d, Conformation::Angle(t)) => {
            Field::from_fn(Grid::image(n), |u| clock_face(u[0], u[1], t, g, s))
        }
        (PhantomKind::Clock3d, Conformation::Angle(t)) => Field::from_fn(Grid::volume(n), |u| {
            clock_face(u[0], u[1], t, g, s)
                * soft_box(u[2], -g.clock_half_depth, g.clock_half_depth, s)
        }),
        (PhantomKind::Spin, Conformation::Angle(t)) => {
            let c = spec.symmetry_order;
            Field::from_fn(Grid::volume(n), |u| spin_density(u, t, c, g, s))
        }
        (PhantomKind::Stretch, Conformation::Shift(dx, dy)) => {
            let base = Field::from_fn(Grid::volume(n), |u| stretch_base(u, g, s));
            stretch_slices(&base, dx, dy, spec.z0())
        }
        _ => unreachable!("validated"),
    };
    Ok(field)
}

/// How conformations are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConformationLaw {
    /// Uniform angle on `[0, 2 pi)`, or uniform integer displacements.
    Uniform,
    /// Equiprobable choice among fixed conformations.
    Discrete(Vec<Conformation>),
}

/// The defocus values, in microns, used by default.
pub const DEFAULT_DEFOCUS_UM: [f64; 7] = [1.50, 1.67, 1.83, 2.00, 2.17, 2.33, 2.50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub n: usize,
    pub kind: PhantomKind,
    pub symmetry_order: usize,
    pub delta_max: i32,
    pub geometry: Geometry,
    pub law: ConformationLaw,
    pub defocus_um: Vec<f64>,
    /// Optics shared by all images; the defocus is drawn per image.
    pub ctf: CtfParams,
    pub noise_ratio: f64,
    pub seed: u64,
    pub use_projections: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_images: 100,
            n: 32,
            kind: PhantomKind::Spin,
            symmetry_order: 4,
            delta_max: 4,
            geometry: Geometry::default(),
            law: ConformationLaw::Uniform,
            defocus_um: DEFAULT_DEFOCUS_UM.to_vec(),
            ctf: CtfParams::default(),
            noise_ratio: 30.0,
            seed: 0,
            use_projections: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_images < 1 {
            return bad("dataset needs at least one image");
        }
        if !(self.noise_ratio >= 0.0) {
            return bad("noise ratio must be non-negative");
        }
        if self.kind == PhantomKind::Clock2d && self.use_projections {
            return bad("clock2d images are not projected; set use_projections = false");
        }
        if self.use_projections && self.ctf.enabled && self.defocus_um.iter().any(|d| !(*d > 0.0)) {
            return bad("defocus values must be positive");
        }
        if self.use_projections && self.ctf.enabled && self.defocus_um.is_empty() {
            return bad("defocus set is empty");
        }
        Ok(())
    }

    pub fn phantom(&self, conformation: Conformation) -> PhantomSpec {
        PhantomSpec {
            kind: self.kind,
            n: self.n,
            symmetry_order: self.symmetry_order,
            conformation,
            geometry: self.geometry.clone(),
            delta_max: self.delta_max,
        }
    }

    fn draw_conformation(&self, rng: &mut ChaCha8Rng) -> Conformation {
        match &self.law {
            ConformationLaw::Discrete(list) => list[rng.random_range(0..list.len())],
            ConformationLaw::Uniform if self.kind == PhantomKind::Stretch => {
                let d = self.delta_max;
                Conformation::Shift(rng.random_range(-d..=d), rng.random_range(-d..=d))
            }
            ConformationLaw::Uniform => Conformation::Angle(rng.random_range(0.0..2.0 * PI)),
        }
    }
}

/// Ground truth kept alongside simulated images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub template: PhantomSpec,
    pub conformations: Vec<Conformation>,
}

impl Truth {
    pub fn volume(&self, s: usize) -> Result<Volume> {
        let c = self.conformations.get(s).ok_or(Error::IndexOutOfRange {
            index: s,
            len: self.conformations.len(),
        })?;
        make_phantom(&PhantomSpec {
            conformation: *c,
            ..self.template.clone()
        })
    }

    /// Density of an arbitrary conformation with the same template.
    pub fn volume_at(&self, conformation: Conformation) -> Result<Volume> {
        make_phantom(&PhantomSpec {
            conformation,
            ..self.template.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Pixels per axis.
    pub n: usize,
    pub images: Vec<Field>,
    pub operators: Vec<ImagingOperator>,
    /// False when each observation is the density itself.
    pub use_projections: bool,
    /// Mean per-pixel noise variance.
    pub sigma2: f64,
    /// Per-image noise variance.
    pub noise_var: Vec<f64>,
    pub noise_ratio: f64,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Grid of the densities being reconstructed.
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

    /// Grid of a single observation.
    pub fn image_grid(&self) -> Grid {
        if self.use_projections {
            Grid::image(self.n)
        } else {
            self.volume_grid()
        }
    }
}

fn image_rng(seed: u64, s: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Simulates a dataset; output depends only on `cfg`.
pub fn sample_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let projector = cfg.use_projections.then(|| Projector::auto(cfg.n));
    let per_image: Vec<Result<(Field, ImagingOperator, f64, Conformation)>> = (0..cfg.n_images)
        .into_par_iter()
        .map(|s| {
            let mut rng = image_rng(cfg.seed, s);
            let conf = cfg.draw_conformation(&mut rng);
            let vol = make_phantom(&cfg.phantom(conf))?;
            let (clean, op) = match &projector {
                Some(p) => {
                    let rot = Rotation::random(&mut rng);
                    let mut ctf = cfg.ctf;
                    if ctf.enabled {
                        ctf.defocus_um = cfg.defocus_um[rng.random_range(0..cfg.defocus_um.len())];
                    }
                    let op = ImagingOperator::new(rot, ctf);
                    (p.project(&vol, &op)?, op)
                }
                None => (vol, ImagingOperator::plain()),
            };
            let pixels = clean.data.len() as f64;
            let var = cfg.noise_ratio * clean.dot(&clean) / pixels;
            let sd = var.sqrt();
            let data = clean
                .data
                .iter()
                .map(|&c| {
                    let e: f64 = rng.sample(StandardNormal);
                    (c + sd * e) as f32 as f64
                })
                .collect();
            Ok((
                Field {
                    grid: clean.grid,
                    data,
                },
                op,
                var,
                conf,
            ))
        })
        .collect();
    let mut ds = Dataset {
        n: cfg.n,
        images: Vec::with_capacity(cfg.n_images),
        operators: Vec::with_capacity(cfg.n_images),
        use_projections: cfg.use_projections,
        sigma2: 0.0,
        noise_var: Vec::with_capacity(cfg.n_images),
        noise_ratio: cfg.noise_ratio,
        truth: None,
    };
    let mut confs = Vec::with_capacity(cfg.n_images);
    for r in per_image {
        let (img, op, var, conf) = r?;
        ds.images.push(img);
        ds.operators.push(op);
        ds.noise_var.push(var);
        confs.push(conf);
    }
    ds.sigma2 = ds.noise_var.iter().sum::<f64>() / ds.noise_var.len() as f64;
    ds.truth = Some(Truth {
        template: cfg.phantom(confs[0]),
        conformations: confs,
    });
    Ok(ds)
}

/// Clean observation of image `s` (projection of its true density).
pub fn clean_observation(ds: &Dataset, s: usize) -> Result<Field> {
    let truth = ds.truth.as_ref().ok_or(Error::TruthUnavailable)?;
    let vol = truth.volume(s)?;
    if ds.use_projections {
        Projector::auto(ds.n).project(&vol, &ds.operators[s])
    } else {
        Ok(vol)
    }
}
