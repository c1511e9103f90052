//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances and runtime budgets are pinned below.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specvol::ctf::CtfParams;
use specvol::eval;
use specvol::graph::{spectral_embedding, GraphKind, SpectralBasis};
use specvol::imaging::{ImagingOperator, Projector};
use specvol::io::pipeline::{EvalReport, SpecvolsIndex};
use specvol::io::PipelineConfig;
use specvol::linalg::{correlation, rel_err};
use specvol::lowres::{self, Basis, CovarianceModel, CovarianceOptions};
use specvol::rotation::Rotation;
use specvol::simulate::{
    sample_dataset, Conformation, ConformationLaw, Dataset, DatasetConfig, Geometry, PhantomKind,
};
use specvol::specvols::{self, SolveOptions};
use specvol::{Field, Grid};

const ADJOINT_TOL: f64 = 1e-10;
const KERNEL_TOL: f64 = 1e-6;
const CLOSED_FORM_TOL: f64 = 1e-8;
const PAIR_GAP_1: f64 = 0.05;
const PAIR_GAP_2: f64 = 0.1;
const RADIUS_CV_MAX: f64 = 0.15;
const FOURIER_CORR_MIN: f64 = 0.95;
const OFF_DIAGONAL_RATIO: f64 = 0.1;
const FSC_SLACK: f64 = 0.05;
const STRETCH_CONDITION_MAX: f64 = 5.0;
const COVARIANCE_CORR_MIN: f64 = 0.9;
const CG_TOL: f64 = 1e-6;
const CG_MAX_ITER: usize = 100;

/// Noise ratio of the shipped criterion-8 configs. The spin embedding is
/// noise-limited at desk scale; see the README.
const C8_NOISE_RATIO: f64 = 1.0;

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn check(
    id: &'static str,
    name: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) -> Outcome {
    let t = Instant::now();
    let (ok, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let elapsed = t.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let out = Outcome {
        id,
        name,
        pass: ok && in_time,
        detail,
        elapsed,
        budget,
    };
    print_line(&out);
    out
}

fn print_line(o: &Outcome) {
    let budget = o
        .budget
        .map(|b| format!(" / {} s", b.as_secs()))
        .unwrap_or_default();
    println!(
        "{} {:>3} {:<28} {} [{:.1} s{}]",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.elapsed.as_secs_f64(),
        budget
    );
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> PipelineConfig {
    PipelineConfig::load(&root().join("configs").join(name)).unwrap()
}

fn random_volume(n: usize, rng: &mut ChaCha8Rng) -> Field {
    Field::from_vec(
        Grid::volume(n),
        (0..n * n * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn random_op(rng: &mut ChaCha8Rng) -> ImagingOperator {
    let ctf = CtfParams {
        defocus_um: rng.random_range(1.5..2.5),
        ..CtfParams::default()
    };
    ImagingOperator::new(Rotation::random(rng), ctf)
}

// 1 ------------------------------------------------------------------------

fn adjoint() -> (bool, String) {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let p = Projector::auto(n);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v = random_volume(n, &mut rng);
        let y = Field::from_vec(
            Grid::image(n),
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let op = random_op(&mut rng);
        let pv = p.project(&v, &op).unwrap();
        let pty = p.backproject(&y, &op).unwrap();
        let gap = (pv.dot(&y) - v.dot(&pty)).abs() / (pv.norm() * y.norm());
        worst = worst.max(gap);
    }
    (
        worst <= ADJOINT_TOL,
        format!("worst scaled gap {worst:.2e} <= {ADJOINT_TOL:.0e}"),
    )
}

// 2 ------------------------------------------------------------------------

fn synthetic(n: usize, ops: Vec<ImagingOperator>, rng: &mut ChaCha8Rng) -> Dataset {
    let images = ops
        .iter()
        .map(|_| {
            Field::from_vec(
                Grid::image(n),
                (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    Dataset {
        n,
        noise_var: vec![0.0; ops.len()],
        operators: ops,
        images,
        use_projections: true,
        sigma2: 0.0,
        noise_ratio: 0.0,
        truth: None,
    }
}

fn kernels() -> (bool, String) {
    let (n, count, r) = (8, 50, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let ops: Vec<ImagingOperator> = (0..count).map(|_| random_op(&mut rng)).collect();
    let ds = synthetic(n, ops, &mut rng);
    let basis = SpectralBasis {
        eigvals: vec![0.0, 1.0],
        eigvecs: (0..r)
            .map(|_| (0..count).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    };
    let k = specvols::build_kernels(&ds, &basis, 2.0).unwrap();
    let v: Vec<Field> = (0..r).map(|_| random_volume(n, &mut rng)).collect();
    let got = k.apply(&v).unwrap();
    let p = Projector::auto(n);
    let mut worst: f64 = 0.0;
    for l in 0..r {
        let mut want = Field::zeros(Grid::volume(n));
        for (m, vm) in v.iter().enumerate() {
            for (s, op) in ds.operators.iter().enumerate() {
                let w = basis.eigvecs[l][s] * basis.eigvecs[m][s];
                let back = p.backproject(&p.project(vm, op).unwrap(), op).unwrap();
                want.axpy(w, &back);
            }
        }
        worst = worst.max(rel_err(&got[l].data, &want.data));
    }
    (
        worst <= KERNEL_TOL,
        format!("relative error {worst:.2e} <= {KERNEL_TOL:.0e}"),
    )
}

// 3 ------------------------------------------------------------------------

fn clock_config(n_images: usize, n: usize, noise_ratio: f64) -> DatasetConfig {
    DatasetConfig {
        n_images,
        n,
        kind: PhantomKind::Clock2d,
        use_projections: false,
        noise_ratio,
        seed: 103,
        ..DatasetConfig::default()
    }
}

fn angles(ds: &Dataset) -> Vec<f64> {
    ds.truth
        .as_ref()
        .unwrap()
        .conformations
        .iter()
        .map(|c| c.angle().unwrap())
        .collect()
}

fn closed_form() -> (bool, String) {
    let ds = sample_dataset(&clock_config(500, 64, 1.0)).unwrap();
    let pts: Vec<Vec<f64>> = angles(&ds).iter().map(|t| vec![t.cos(), t.sin()]).collect();
    let (_, basis) = spectral_embedding(&pts, GraphKind::Knn { k: 10 }, 5).unwrap();
    let k = specvols::build_kernels(&ds, &basis, 2.0).unwrap();
    let b = specvols::build_backprojections(&ds, &basis).unwrap();
    let (cg, _) = specvols::solve_spectral_volumes(
        &k,
        &b,
        &SolveOptions {
            cg: specvol::cg::CgOptions {
                tol: 1e-12,
                max_iter: 50,
            },
            ..Default::default()
        },
    )
    .unwrap();
    let direct = specvols::solve_identity(&ds, &basis).unwrap();
    let scale = 1.0 / (ds.len() as f64).sqrt();
    let mut worst: f64 = 0.0;
    for l in 0..basis.r() {
        let mut want = vec![0.0; ds.images[0].data.len()];
        for (s, y) in ds.images.iter().enumerate() {
            let w = scale * basis.eigvecs[l][s];
            want.iter_mut().zip(&y.data).for_each(|(a, v)| *a += w * v);
        }
        worst = worst
            .max(rel_err(&cg.volumes[l].data, &want))
            .max(rel_err(&direct.volumes[l].data, &want));
    }
    (
        worst <= CLOSED_FORM_TOL,
        format!("relative error {worst:.2e} <= {CLOSED_FORM_TOL:.0e}"),
    )
}

// 4 and 5 ------------------------------------------------------------------

fn clock_embedding() -> (Dataset, SpectralBasis) {
    let cfg = load("desk_clock2d.cfg");
    let ds = sample_dataset(&cfg.dataset).unwrap();
    let low = lowres::fit(&ds, &cfg.lowres).unwrap();
    let (_, basis) = spectral_embedding(&low.coordinates.betas, cfg.graph, cfg.specvols.r).unwrap();
    (ds, basis)
}

fn circle_spectrum(ds: &Dataset, basis: &SpectralBasis) -> (bool, String) {
    let l = &basis.eigvals;
    let g1 = (l[1] - l[2]).abs() / l[2];
    let g2 = (l[3] - l[4]).abs() / l[4];
    let cv = eval::radius_cv(basis);
    let winding = eval::embedding_winding(basis, &angles(ds), 64).unwrap();
    (
        g1 <= PAIR_GAP_1 && g2 <= PAIR_GAP_2 && cv <= RADIUS_CV_MAX,
        format!("pair gaps {g1:.3} <= {PAIR_GAP_1}, {g2:.3} <= {PAIR_GAP_2}; radius CV {cv:.3} <= {RADIUS_CV_MAX}; winding {winding}"),
    )
}

/// Mixes `est` by the orthogonal 2x2 map (rotation or reflection) that best
/// matches `reference`.
fn align_pair(est: [&[f64]; 2], reference: [&[f64]; 2]) -> [Vec<f64>; 2] {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = |i: usize, j: usize| dot(est[i], reference[j]);
    // rotation [[c, -s], [s, c]] or reflection [[c, s], [s, -c]], applied as e'_j = sum_i q_ij e_i
    let rot = (m(1, 0) - m(0, 1)).atan2(m(0, 0) + m(1, 1));
    let refl = (m(1, 0) + m(0, 1)).atan2(m(0, 0) - m(1, 1));
    let rot_gain = (m(0, 0) + m(1, 1)).hypot(m(1, 0) - m(0, 1));
    let refl_gain = (m(0, 0) - m(1, 1)).hypot(m(1, 0) + m(0, 1));
    let q = if rot_gain >= refl_gain {
        let (s, c) = rot.sin_cos();
        [[c, -s], [s, c]]
    } else {
        let (s, c) = refl.sin_cos();
        [[c, s], [s, -c]]
    };
    let mix = |j: usize| -> Vec<f64> {
        est[0]
            .iter()
            .zip(est[1])
            .map(|(a, b)| q[0][j] * a + q[1][j] * b)
            .collect()
    };
    [mix(0), mix(1)]
}

fn fourier_limit(ds: &Dataset, basis: &SpectralBasis) -> (bool, String) {
    let sv = specvols::solve_identity(ds, basis).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let n = ds.n;
    let grid = Grid::image(n);
    let reach = Geometry::default().hand_length;
    let annulus: Vec<usize> = (0..n * n)
        .filter(|&i| {
            let (x, y) = (grid.coord(i % n), grid.coord(i / n));
            let r = x.hypot(y);
            r > 0.1 && r < reach + 0.1
        })
        .collect();
    // Fourier coefficients of the clock over its angle, by dense quadrature.
    let steps = 720;
    let mut coeffs = vec![[vec![0.0; annulus.len()], vec![0.0; annulus.len()]]; 3];
    for j in 0..steps {
        let t = 2.0 * PI * j as f64 / steps as f64;
        let img = truth.volume_at(Conformation::Angle(t)).unwrap();
        for (k, c) in coeffs.iter_mut().enumerate() {
            let (cs, sn) = (((k + 1) as f64 * t).cos(), ((k + 1) as f64 * t).sin());
            for (a, &i) in annulus.iter().enumerate() {
                c[0][a] += cs * img.data[i];
                c[1][a] += sn * img.data[i];
            }
        }
    }
    let restrict =
        |l: usize| -> Vec<f64> { annulus.iter().map(|&i| sv.volumes[l].data[i]).collect() };
    let mut scores = Vec::new();
    for (k, c) in coeffs.iter().enumerate() {
        let (a, b) = (restrict(2 * k + 1), restrict(2 * k + 2));
        let [e0, e1] = align_pair([&a, &b], [&c[0], &c[1]]);
        scores.push(correlation(&e0, &c[0]));
        scores.push(correlation(&e1, &c[1]));
    }
    let worst = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    (
        worst >= FOURIER_CORR_MIN,
        format!(
            "correlations for l = 1..6 {:?} >= {FOURIER_CORR_MIN}",
            scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn off_diagonal_blocks() -> (bool, String) {
    let ds = sample_dataset(&DatasetConfig {
        n_images: 2000,
        n: 16,
        kind: PhantomKind::Spin,
        noise_ratio: 0.0,
        seed: 106,
        ..DatasetConfig::default()
    })
    .unwrap();
    let pts: Vec<Vec<f64>> = angles(&ds).iter().map(|t| vec![t.cos(), t.sin()]).collect();
    let (_, basis) = spectral_embedding(&pts, GraphKind::Knn { k: 10 }, 5).unwrap();
    let k = specvols::build_kernels(&ds, &basis, 2.0).unwrap();
    let r = basis.r();
    let mut diag = 0.0;
    let mut off: f64 = 0.0;
    for l in 0..r {
        for m in l..r {
            let v = k.block_norm(l, m, 30);
            if l == m {
                diag += v / r as f64;
            } else {
                off = off.max(v);
            }
        }
    }
    let ratio = off / diag;
    (
        ratio <= OFF_DIAGONAL_RATIO,
        format!("largest off-diagonal / mean diagonal {ratio:.3} <= {OFF_DIAGONAL_RATIO}"),
    )
}

// 8 ------------------------------------------------------------------------

fn embed(name: &str) -> eval::EmbeddingReport {
    let cfg = load(name);
    assert_eq!(cfg.dataset.noise_ratio, C8_NOISE_RATIO);
    let ds = sample_dataset(&cfg.dataset).unwrap();
    let low = lowres::fit(&ds, &cfg.lowres).unwrap();
    let (_, basis) = spectral_embedding(&low.coordinates.betas, cfg.graph, cfg.specvols.r).unwrap();
    eval::embedding_diagnostics(&ds, &basis, cfg.eval.winding_bins).unwrap()
}

fn winding_and_rank() -> (bool, String) {
    let spin = embed("desk_spin_small.cfg");
    let stretch = embed("desk_stretch.cfg");
    let w = spin.winding.unwrap();
    let rank = stretch.rank.unwrap();
    let cond = stretch.condition.unwrap();
    (
        w.abs() == 4 && rank == 2 && cond <= STRETCH_CONDITION_MAX,
        format!("spin |winding| {} == 4; stretch rank {rank} == 2, condition {cond:.2} <= {STRETCH_CONDITION_MAX} (noise ratio {C8_NOISE_RATIO})", w.abs()),
    )
}

// 9 ------------------------------------------------------------------------

fn covariance_recovery() -> (bool, String) {
    let (m, big) = (8, 16);
    let (a, b) = (Conformation::Angle(0.0), Conformation::Angle(PI / 4.0));
    let ds = sample_dataset(&DatasetConfig {
        n_images: 1000,
        n: big,
        kind: PhantomKind::Spin,
        law: ConformationLaw::Discrete(vec![a, b]),
        noise_ratio: 0.0,
        seed: 109,
        ctf: CtfParams {
            pixel_size_a: 12.0,
            ..CtfParams::default()
        },
        ..DatasetConfig::default()
    })
    .unwrap();
    let lds = lowres::downsample(&ds, m).unwrap();
    let (mu, _) = lowres::estimate_mean(
        &lds,
        &specvol::cg::CgOptions {
            tol: 1e-6,
            max_iter: 500,
        },
    )
    .unwrap();
    let opts = CovarianceOptions {
        cg: specvol::cg::CgOptions {
            tol: 1e-3,
            max_iter: 500,
        },
        ..Default::default()
    };
    let (cov, _) = lowres::estimate_covariance(&lds, &mu, &opts).unwrap();
    let model = CovarianceModel::new(mu, cov, 1).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let diff = truth
        .volume_at(b)
        .unwrap()
        .sub(&truth.volume_at(a).unwrap());
    let low = lowres::fourier_crop(&diff, m).unwrap();
    let band = Basis::band_limited(low.grid);
    let visible = band.synthesize(&band.coefficients(&low.data));
    let c = correlation(&model.eigvols[0].data, &visible.data).abs();
    (
        c >= COVARIANCE_CORR_MIN,
        format!("top eigenvolume vs band-limited difference {c:.3} >= {COVARIANCE_CORR_MIN}"),
    )
}

// 7, 10 and 11 -------------------------------------------------------------

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn desk_run(out: &Path) -> Result<Duration, String> {
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_specvol"))
        .arg("--config")
        .arg(root().join("configs/desk_spin.cfg"))
        .arg("--out")
        .arg(out)
        .arg("--deterministic")
        .arg("pipeline")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(t.elapsed())
}

fn fsc_trend(run: &Path) -> (bool, String) {
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval/report.json")).unwrap())
            .unwrap();
    let cfg = load("desk_spin.cfg");
    assert_eq!(cfg.dataset.noise_ratio, 30.0);
    // low_band_fsc[i] uses i + 1 spectral volumes
    let f = &report.low_band_fsc[1..9];
    let mut best = f64::NEG_INFINITY;
    let mut ok = report.fsc_images == 256;
    for &v in f {
        ok &= v >= best - FSC_SLACK;
        best = best.max(v);
    }
    (
        ok,
        format!(
            "low-band FSC r=2..9 {:?}, drops <= {FSC_SLACK}",
            f.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn cg_behaviour(run: &Path) -> (bool, String) {
    let index: SpecvolsIndex =
        serde_json::from_str(&std::fs::read_to_string(run.join("specvols/index.json")).unwrap())
            .unwrap();
    let cg = index.cg.unwrap();
    (
        cg.converged && cg.rel_residual <= CG_TOL && cg.iterations <= CG_MAX_ITER,
        format!(
            "{} iterations <= {CG_MAX_ITER} to residual {:.2e} <= {CG_TOL:.0e} (r = {})",
            cg.iterations, cg.rel_residual, index.r
        ),
    )
}

/// Adds setup time to an outcome and re-applies its budget.
fn with_setup(mut o: Outcome, setup: Duration, budget: Duration) -> Outcome {
    o.elapsed += setup;
    o.budget = Some(budget);
    o.pass &= o.elapsed <= budget;
    o
}

fn main() {
    // Optional criterion ids as arguments select a subset, e.g. `-- 4 5`.
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let want = |id: &str| only.is_empty() || only.iter().any(|o| o == id);
    let mut results = Vec::new();
    if want("1") {
        results.push(check("1", "adjoint", Some(secs(5)), adjoint));
    }
    if want("2") {
        results.push(check("2", "kernel equivalence", Some(secs(30)), kernels));
    }
    if want("3") {
        results.push(check("3", "closed form", Some(secs(60)), closed_form));
    }
    if want("4") || want("5") {
        let t = Instant::now();
        let (clock, basis) = clock_embedding();
        let setup = t.elapsed();
        if want("4") {
            let o = check("4", "circle spectrum", None, || {
                circle_spectrum(&clock, &basis)
            });
            results.push(with_setup(o, setup, secs(120)));
        }
        if want("5") {
            let o = check("5", "Fourier-coefficient limit", None, || {
                fourier_limit(&clock, &basis)
            });
            results.push(with_setup(o, setup, secs(180)));
        }
    }
    if want("6") {
        results.push(check(
            "6",
            "off-diagonal kernels",
            Some(secs(180)),
            off_diagonal_blocks,
        ));
    }

    let work = tempfile::tempdir().unwrap();
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    let first = if want("7") || want("10") || want("11") {
        desk_run(&a)
    } else {
        Err("not run".into())
    };
    if want("7") {
        let o = match &first {
            Ok(d) => with_setup(
                check("7", "FSC trend", None, || fsc_trend(&a)),
                *d,
                secs(600),
            ),
            Err(e) => check("7", "FSC trend", None, || {
                (false, format!("pipeline failed: {e}"))
            }),
        };
        results.push(o);
    }
    if want("8") {
        results.push(check(
            "8",
            "winding and stretch rank",
            Some(secs(300)),
            winding_and_rank,
        ));
    }
    if want("9") {
        results.push(check(
            "9",
            "covariance recovery",
            Some(secs(120)),
            covariance_recovery,
        ));
    }
    if want("10") {
        results.push(check("10", "CG behaviour", None, || match &first {
            Ok(_) => cg_behaviour(&a),
            Err(e) => (false, format!("pipeline failed: {e}")),
        }));
    }
    if want("11") {
        results.push(check("11", "determinism", None, || {
            if first.is_err() {
                return (false, "first run failed".into());
            }
            match desk_run(&b) {
                Ok(_) => {
                    let (ta, tb) = (tree(&a), tree(&b));
                    let differing = ta.iter().filter(|(k, v)| tb.get(*k) != Some(*v)).count()
                        + tb.keys().filter(|k| !ta.contains_key(*k)).count();
                    (
                        differing == 0,
                        format!("{} files, {differing} differ", ta.len()),
                    )
                }
                Err(e) => (false, format!("second run failed: {e}")),
            }
        }));
    }

    // Times on 4, 5 and 7 include their shared setup, so the summary differs
    // from the lines above.
    println!();
    for o in &results {
        print_line(o);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("\n{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
