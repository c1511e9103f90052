//! Stage drivers behind the command-line tool.
//!
//! A results directory looks like
//!
//! ```text
//! dataset/   manifest.json images.f32
//! lowres/    mean.svol eigvol_1.svol .. model.json betas.csv
//! embed/     basis.csv basis.json
//! specvols/  alpha_00.svol .. index.json
//! recon/     x_000000.svol ..
//! eval/      fsc_r01.csv .. fsc.svg report.json
//! timing.json
//! ```
//!
//! Each stage reads what the previous ones wrote, so stages can be rerun on
//! their own. [`run_pipeline`] chains them in memory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::PipelineConfig;
use super::{dataset, svol};
use crate::cg::CgReport;
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{self, GraphKind, SpectralBasis};
use crate::grid::{Field, Grid};
use crate::lowres::{self, CovarianceModel, PcaCoordinates};
use crate::simulate::{sample_dataset, Dataset};
use crate::specvols::{self, SpectralVolumes};

pub const FAILED_MARKER: &str = "FAILED";
pub const TIMING_FILE: &str = "timing.json";

/// Subdirectories of a results directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn lowres(&self) -> PathBuf {
        self.root.join("lowres")
    }

    pub fn embed(&self) -> PathBuf {
        self.root.join("embed")
    }

    pub fn specvols(&self) -> PathBuf {
        self.root.join("specvols")
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Wall-clock seconds per step, in the order they ran.
#[derive(Clone, Debug, Default)]
pub struct Timings {
    pub entries: Vec<(String, f64)>,
}

impl Timings {
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.entries
            .push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    /// Prints to stderr when `deterministic` (timings would break
    /// byte-identical outputs), otherwise merges them into `timing.json`.
    pub fn report(&self, root: &Path, deterministic: bool) -> Result<()> {
        if deterministic {
            for (name, secs) in &self.entries {
                eprintln!("time {name:<14} {secs:9.3} s");
            }
            return Ok(());
        }
        let path = root.join(TIMING_FILE);
        let mut map: serde_json::Map<String, serde_json::Value> = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        for (name, secs) in &self.entries {
            map.insert(name.clone(), json!(secs));
        }
        write_json(&path, &serde_json::Value::Object(map))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifacts(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Writes a numeric table with a header row; values use the shortest
/// representation that parses back to the same `f64`.
fn write_table(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = (String, Vec<f64>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for (label, row) in rows {
        let record = std::iter::once(label).chain(row.iter().map(|v| v.to_string()));
        w.write_record(record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    if !path.exists() {
        return Err(Error::MissingArtifacts(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::format(path, format!("{e} in {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((label, vals));
    }
    Ok(out)
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

// ---- simulate ---------------------------------------------------------

pub fn run_simulate(cfg: &PipelineConfig, layout: &Layout, t: &mut Timings) -> Result<Dataset> {
    stage("simulate", || {
        let ds = t.time("simulate", || sample_dataset(&cfg.dataset))?;
        dataset::write_manifest(&ds, &layout.dataset())?;
        log::info!(
            "simulated n={} N={} sigma2={:.6e}",
            ds.len(),
            ds.n,
            ds.sigma2
        );
        Ok(ds)
    })
}

pub fn load_dataset(layout: &Layout) -> Result<Dataset> {
    dataset::read_manifest(&layout.dataset())
}

// ---- low resolution ---------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LowResSummary {
    pub n: usize,
    pub q: usize,
    pub eigvals: Vec<f64>,
    pub clamped: usize,
    pub mean_cg: CgReport,
    pub covariance_cg: CgReport,
}

pub fn run_lowres(
    ds: &Dataset,
    cfg: &PipelineConfig,
    layout: &Layout,
    t: &mut Timings,
) -> Result<PcaCoordinates> {
    stage("lowres", || {
        let opts = &cfg.lowres;
        let data = lowres::downsample(ds, opts.n.min(ds.n))?;
        let (mean, mean_cg) = t.time("mean", || lowres::estimate_mean(&data, &opts.mean_cg))?;
        let (cov, covariance_cg) = t.time("covariance", || {
            lowres::estimate_covariance(&data, &mean, &opts.covariance)
        })?;
        let model = t.time("eigenvolumes", || CovarianceModel::new(mean, cov, opts.q))?;
        let coords = t.time("coordinates", || lowres::pca_coordinates(&data, &model))?;
        log::info!(
            "lowres: mean {} / covariance {} CG iterations, eigenvalues {:?}",
            mean_cg.iterations,
            covariance_cg.iterations,
            model.eigvals
        );

        let dir = layout.lowres();
        create_dir(&dir)?;
        svol::write(&dir.join("mean.svol"), &model.mean)?;
        for (k, v) in model.eigvols.iter().enumerate() {
            svol::write(&dir.join(format!("eigvol_{}.svol", k + 1)), v)?;
        }
        write_json(
            &dir.join("model.json"),
            &LowResSummary {
                n: data.n,
                q: model.q(),
                eigvals: model.eigvals.clone(),
                clamped: model.clamped,
                mean_cg,
                covariance_cg,
            },
        )?;
        write_betas(&dir.join("betas.csv"), &coords)?;
        Ok(coords)
    })
}

pub fn write_betas(path: &Path, coords: &PcaCoordinates) -> Result<()> {
    let q = coords.q();
    let header: Vec<String> = std::iter::once("image".to_string())
        .chain((1..=q).map(|k| format!("beta_{k}")))
        .collect();
    write_table(
        path,
        &header,
        coords
            .betas
            .iter()
            .enumerate()
            .map(|(s, b)| (s.to_string(), b.clone())),
    )
}

pub fn read_betas(path: &Path) -> Result<PcaCoordinates> {
    let rows = read_table(path)?;
    let q = rows.first().map(|r| r.1.len()).unwrap_or(0);
    let mut betas = Vec::with_capacity(rows.len());
    for (s, (label, vals)) in rows.into_iter().enumerate() {
        if label != s.to_string() || vals.len() != q {
            return Err(Error::format(path, format!("malformed row {s}")));
        }
        betas.push(vals);
    }
    Ok(PcaCoordinates { betas })
}

// ---- embedding ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisFile {
    pub graph: GraphKind,
    pub basis: SpectralBasis,
}

pub fn run_embed(
    coords: &PcaCoordinates,
    cfg: &PipelineConfig,
    layout: &Layout,
    t: &mut Timings,
) -> Result<SpectralBasis> {
    stage("embed", || {
        let (g, basis) = t.time("embedding", || {
            graph::spectral_embedding(&coords.betas, cfg.graph, cfg.specvols.r)
        })?;
        log::info!(
            "graph: {} edges, eigenvalues {:?}",
            g.nnz() / 2,
            basis.eigvals
        );
        let dir = layout.embed();
        create_dir(&dir)?;
        let header: Vec<String> = std::iter::once("image".to_string())
            .chain((0..basis.r()).map(|l| format!("phi_{l}")))
            .collect();
        let rows = std::iter::once(("eigenvalue".to_string(), basis.eigvals.clone())).chain(
            (0..basis.n()).map(|s| {
                (
                    s.to_string(),
                    (0..basis.r()).map(|l| basis.phi(s, l)).collect(),
                )
            }),
        );
        write_table(&dir.join("basis.csv"), &header, rows)?;
        write_json(
            &dir.join("basis.json"),
            &BasisFile {
                graph: cfg.graph,
                basis: basis.clone(),
            },
        )?;
        Ok(basis)
    })
}

pub fn load_basis(layout: &Layout) -> Result<SpectralBasis> {
    Ok(read_json::<BasisFile>(&layout.embed().join("basis.json"))?.basis)
}

// ---- spectral volumes -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecvolsIndex {
    pub r: usize,
    pub n: usize,
    pub dim: usize,
    /// `identity`, `kernels` or `diagonal`.
    pub route: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cg: Option<CgReport>,
    pub files: Vec<String>,
}

pub fn alpha_file(l: usize) -> String {
    format!("alpha_{l:02}.svol")
}

pub fn run_specvols(
    ds: &Dataset,
    basis: &SpectralBasis,
    cfg: &PipelineConfig,
    layout: &Layout,
    t: &mut Timings,
) -> Result<SpectralVolumes> {
    stage("specvols", || {
        let r = cfg.specvols.r.min(basis.r());
        let basis = basis.truncated(r);
        let (sv, route, cg) = if !ds.use_projections {
            let sv = t.time("solve", || specvols::solve_identity(ds, &basis))?;
            (sv, "identity", None)
        } else {
            let k = t.time("kernels", || {
                if cfg.specvols.diagonal {
                    specvols::diagonal_approximation(ds, r)
                } else {
                    specvols::build_kernels(ds, &basis, cfg.specvols.oversample)
                }
            })?;
            let b = t.time("backprojection", || {
                specvols::build_backprojections(ds, &basis)
            })?;
            let (sv, rep) = t.time("solve", || {
                specvols::solve_spectral_volumes(&k, &b, &cfg.specvols.solve)
            })?;
            log::info!(
                "spectral volumes: {} CG iterations, residual {:.2e}",
                rep.iterations,
                rep.rel_residual
            );
            (
                sv,
                if cfg.specvols.diagonal {
                    "diagonal"
                } else {
                    "kernels"
                },
                Some(rep),
            )
        };
        let dir = layout.specvols();
        create_dir(&dir)?;
        let files: Vec<String> = (0..sv.r()).map(alpha_file).collect();
        for (f, v) in files.iter().zip(&sv.volumes) {
            svol::write(&dir.join(f), v)?;
        }
        let grid = sv.grid().expect("r >= 1");
        write_json(
            &dir.join("index.json"),
            &SpecvolsIndex {
                r: sv.r(),
                n: grid.n,
                dim: grid.dim,
                route: route.to_string(),
                cg,
                files,
            },
        )?;
        // Continue at the stored precision so staged runs reproduce this one.
        let mut sv = sv;
        for v in &mut sv.volumes {
            v.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        Ok(sv)
    })
}

/// Reads spectral volumes back; samples carry 32-bit precision.
pub fn load_specvols(layout: &Layout) -> Result<SpectralVolumes> {
    let dir = layout.specvols();
    let index: SpecvolsIndex = read_json(&dir.join("index.json"))?;
    let grid = Grid::new(index.n, index.dim)
        .map_err(|e| Error::format(dir.join("index.json"), e.to_string()))?;
    let mut volumes = Vec::with_capacity(index.r);
    for f in &index.files {
        let path = dir.join(f);
        if !path.exists() {
            return Err(Error::MissingArtifacts(path));
        }
        let v = svol::read(&path)?;
        if v.grid != grid {
            return Err(Error::format(path, "grid disagrees with index.json"));
        }
        volumes.push(v);
    }
    if volumes.len() != index.r {
        return Err(Error::format(
            dir.join("index.json"),
            "file list disagrees with r",
        ));
    }
    Ok(SpectralVolumes { volumes })
}

// ---- reconstructions ------------------------------------------------------

pub fn recon_file(s: usize) -> String {
    format!("x_{s:06}.svol")
}

/// Writes `x_s` for each requested image. Every index is checked before
/// anything is written; repeats are written once.
pub fn run_reconstruct(
    sv: &SpectralVolumes,
    basis: &SpectralBasis,
    indices: &[usize],
    layout: &Layout,
) -> Result<Vec<PathBuf>> {
    stage("reconstruct", || {
        if let Some(&bad) = indices.iter().find(|&&s| s >= basis.n()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: basis.n(),
            });
        }
        let unique: BTreeSet<usize> = indices.iter().copied().collect();
        if unique.is_empty() {
            return Ok(Vec::new());
        }
        let dir = layout.recon();
        create_dir(&dir)?;
        let mut written = Vec::with_capacity(unique.len());
        for s in unique {
            let x: Field = specvols::reconstruct(sv, basis, s)?;
            let path = dir.join(recon_file(s));
            svol::write(&path, &x)?;
            written.push(path);
        }
        Ok(written)
    })
}

// ---- evaluation -------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub r: usize,
    pub truth: bool,
    #[serde(default)]
    pub embedding: eval::EmbeddingReport,
    /// Mean-subtracted FSC over the lowest quarter of shells, per `r`.
    #[serde(default)]
    pub low_band_fsc: Vec<f64>,
    #[serde(default)]
    pub fsc_images: usize,
    #[serde(default)]
    pub mean_relative_error: Option<f64>,
}

pub fn run_eval(
    ds: &Dataset,
    sv: &SpectralVolumes,
    basis: &SpectralBasis,
    cfg: &PipelineConfig,
    layout: &Layout,
    t: &mut Timings,
) -> Result<EvalReport> {
    stage("eval", || {
        let dir = layout.eval();
        create_dir(&dir)?;
        let mut report = EvalReport {
            n_images: ds.len(),
            r: sv.r(),
            truth: ds.truth.is_some(),
            embedding: Default::default(),
            low_band_fsc: Vec::new(),
            fsc_images: 0,
            mean_relative_error: None,
        };
        if ds.truth.is_some() {
            t.time("eval", || {
                report.embedding = eval::embedding_diagnostics(ds, basis, cfg.eval.winding_bins)?;
                let mean = eval::truth_mean(ds)?;
                let ms =
                    eval::mean_subtracted_fsc(ds, sv, basis, &mean, Some(cfg.eval.fsc_images))?;
                report.fsc_images = ms.images.len();
                report.low_band_fsc = ms.curves.iter().map(|c| c.low_band_mean()).collect();
                report.mean_relative_error = Some(eval::mean_relative_error(
                    ds,
                    sv,
                    basis,
                    Some(cfg.eval.fsc_images),
                )?);
                let mut labelled = Vec::with_capacity(ms.curves.len());
                for (i, c) in ms.curves.iter().enumerate() {
                    write_text(&dir.join(format!("fsc_r{:02}.csv", i + 1)), &c.to_csv())?;
                    labelled.push((format!("r = {}", i + 1), c));
                }
                write_text(&dir.join("fsc.svg"), &eval::curves_svg(&labelled))
            })?;
        } else {
            log::warn!("dataset has no ground truth; skipping FSC");
        }
        write_json(&dir.join("report.json"), &report)?;
        Ok(report)
    })
}

// ---- whole pipeline ---------------------------------------------------------

/// Runs every stage into `cfg.output`. On failure a `FAILED` marker naming
/// the stage is left next to whatever was already written.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    let layout = Layout::new(&cfg.output);
    create_dir(&layout.root)?;
    let marker = layout.root.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let mut t = Timings::default();
    let result = (|| {
        let ds = run_simulate(cfg, &layout, &mut t)?;
        let coords = run_lowres(&ds, cfg, &layout, &mut t)?;
        let basis = run_embed(&coords, cfg, &layout, &mut t)?;
        let sv = run_specvols(&ds, &basis, cfg, &layout, &mut t)?;
        run_reconstruct(&sv, &basis, &cfg.eval.reconstruct, &layout)?;
        run_eval(&ds, &sv, &basis, cfg, &layout, &mut t)
    })();
    t.report(&layout.root, cfg.specvols.deterministic)?;
    if let Err(e) = &result {
        let stage = match e {
            Error::Stage { stage, .. } => *stage,
            _ => "pipeline",
        };
        write_text(&marker, &format!("stage: {stage}\nerror: {e}\n"))?;
    }
    result
}
