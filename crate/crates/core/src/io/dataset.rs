//! Datasets on disk: `manifest.json` plus the raw `images.f32` stack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::imaging::ImagingOperator;
use crate::rotation::Rotation;
use crate::simulate::{Conformation, Dataset, PhantomSpec, Truth};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STACK_FILE: &str = "images.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub quaternion: [f64; 4],
    pub defocus_um: f64,
    pub ctf: CtfParams,
    pub noise_var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conformation: Option<Conformation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_images: usize,
    /// Pixels per axis.
    pub n: usize,
    /// Dimension of each observation: 2 for projections, else the density's.
    pub image_dim: usize,
    pub use_projections: bool,
    pub sigma2: f64,
    pub noise_ratio: f64,
    pub stack_crc32: u32,
    pub stack_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PhantomSpec>,
    pub images: Vec<ImageEntry>,
}

fn image_grid(ds: &Dataset) -> Grid {
    ds.images
        .first()
        .map(|y| y.grid)
        .unwrap_or_else(|| ds.image_grid())
}

/// Writes `manifest.json` and `images.f32` into `dir`, creating it.
///
/// Samples are stored as 32-bit floats; simulated images are already
/// rounded to that precision, so they round-trip exactly.
pub fn write_manifest(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = image_grid(ds);
    let mut stack = Vec::with_capacity(ds.images.iter().map(|y| y.data.len() * 4).sum());
    for y in &ds.images {
        y.grid.check_same(&grid)?;
        for &v in &y.data {
            stack.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let confs = ds.truth.as_ref().map(|t| &t.conformations);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        n_images: ds.len(),
        n: ds.n,
        image_dim: grid.dim,
        use_projections: ds.use_projections,
        sigma2: ds.sigma2,
        noise_ratio: ds.noise_ratio,
        stack_crc32: crc32fast::hash(&stack),
        stack_bytes: stack.len() as u64,
        template: ds.truth.as_ref().map(|t| t.template.clone()),
        images: ds
            .operators
            .iter()
            .enumerate()
            .map(|(s, op)| ImageEntry {
                quaternion: op.rotation.q,
                defocus_um: op.ctf.defocus_um,
                ctf: op.ctf,
                noise_var: ds.noise_var.get(s).copied().unwrap_or(ds.sigma2),
                conformation: confs.and_then(|c| c.get(s).copied()),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    let spath = dir.join(STACK_FILE);
    std::fs::write(&spath, &stack).map_err(|e| Error::io(&spath, e))?;
    Ok(manifest)
}

pub fn read_manifest_file(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingArtifacts(mpath));
    }
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::FormatVersionMismatch {
            path: mpath,
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    if m.images.len() != m.n_images {
        return Err(Error::format(
            &mpath,
            "image count disagrees with the entry list",
        ));
    }
    Ok(m)
}

/// Reads a dataset written by [`write_manifest`].
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let m = read_manifest_file(dir)?;
    let spath = dir.join(STACK_FILE);
    let stack = std::fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    if stack.len() as u64 != m.stack_bytes || crc32fast::hash(&stack) != m.stack_crc32 {
        return Err(Error::ChecksumMismatch(spath));
    }
    let grid = Grid::new(m.n, m.image_dim)
        .map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
    let per = grid.len() * 4;
    if stack.len() != per * m.n_images {
        return Err(Error::ChecksumMismatch(spath));
    }
    let images = stack
        .chunks_exact(per.max(1))
        .take(m.n_images)
        .map(|c| Field {
            grid,
            data: c
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
                .collect(),
        })
        .collect();
    let mut operators = Vec::with_capacity(m.n_images);
    for e in &m.images {
        // Unit quaternions are kept bit-exact; anything else is normalized.
        let norm2: f64 = e.quaternion.iter().map(|v| v * v).sum();
        let rotation = if (norm2 - 1.0).abs() < 1e-12 {
            Rotation { q: e.quaternion }
        } else {
            Rotation::from_quaternion(e.quaternion)
                .ok_or_else(|| Error::format(dir.join(MANIFEST_FILE), "invalid quaternion"))?
        };
        operators.push(ImagingOperator::new(
            rotation,
            CtfParams {
                defocus_um: e.defocus_um,
                ..e.ctf
            },
        ));
    }
    let conformations: Option<Vec<Conformation>> =
        m.images.iter().map(|e| e.conformation).collect();
    let truth = match (m.template, conformations) {
        (Some(template), Some(conformations)) => Some(Truth {
            template,
            conformations,
        }),
        _ => None,
    };
    Ok(Dataset {
        n: m.n,
        images,
        operators,
        use_projections: m.use_projections,
        sigma2: m.sigma2,
        noise_var: m.images.iter().map(|e| e.noise_var).collect(),
        noise_ratio: m.noise_ratio,
        truth,
    })
}
