//! INI-style pipeline configuration.
//!
//! ```ini
//! [dataset]
//! kind = spin
//! n_images = 2000
//! n = 32
//!
//! [graph]
//! kind = knn
//! k = 10
//! ```
//!
//! Every key is optional; unknown sections or keys are rejected so typos
//! surface as configuration errors rather than silently ignored settings.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::graph::GraphKind;
use crate::lowres::LowResOptions;
use crate::simulate::{Conformation, ConformationLaw, DatasetConfig, PhantomKind};
use crate::specvols::SolveOptions;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecvolsConfig {
    pub r: usize,
    pub solve: SolveOptions,
    /// Keep only the diagonal kernel blocks.
    pub diagonal: bool,
    /// Fine-grid oversampling for the kernel transforms.
    pub oversample: f64,
    pub deterministic: bool,
}

impl Default for SpecvolsConfig {
    fn default() -> Self {
        SpecvolsConfig {
            r: 9,
            solve: SolveOptions::default(),
            diagonal: false,
            oversample: 2.0,
            deterministic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Images used for the mean-subtracted FSC.
    pub fsc_images: usize,
    /// Angle bins for the winding diagnostic.
    pub winding_bins: usize,
    /// Image indices (from zero) whose reconstructions are written.
    pub reconstruct: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fsc_images: 256,
            winding_bins: 64,
            reconstruct: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub lowres: LowResOptions,
    pub graph: GraphKind,
    pub specvols: SpecvolsConfig,
    pub eval: EvalConfig,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetConfig::default(),
            lowres: LowResOptions::default(),
            graph: GraphKind::Knn { k: 10 },
            specvols: SpecvolsConfig::default(),
            eval: EvalConfig::default(),
            output: PathBuf::from("results"),
        }
    }
}

fn bad(section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("[{section}] {key}: {msg}"))
}

fn num<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| bad(section, key, format!("{e} in {v:?}")))
}

fn boolean(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(section, key, format!("expected a boolean, got {v:?}"))),
    }
}

fn list<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(section, key, s))
        .collect()
}

/// `0.5; 2.1` for angles, `2 0; -2 0` for displacements.
fn conformations(key: &str, v: &str) -> Result<Vec<Conformation>> {
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split_whitespace().collect();
            match parts.as_slice() {
                [a] => Ok(Conformation::Angle(num("dataset", key, a)?)),
                [x, y] => Ok(Conformation::Shift(
                    num("dataset", key, x)?,
                    num("dataset", key, y)?,
                )),
                _ => Err(bad(
                    "dataset",
                    key,
                    format!("cannot read conformation {item:?}"),
                )),
            }
        })
        .collect()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.output.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.output = parent.join(&cfg.output);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = PipelineConfig::default();
        let mut graph_kind: Option<String> = None;
        let (mut k, mut sigma): (Option<f64>, Option<f64>) = (None, None);
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, v) in props.iter() {
                let v = v.trim();
                match (section, key) {
                    ("dataset", "kind") => {
                        cfg.dataset.kind = PhantomKind::parse(v)
                            .ok_or_else(|| bad(section, key, format!("unknown phantom {v:?}")))?
                    }
                    ("dataset", "n_images") => cfg.dataset.n_images = num(section, key, v)?,
                    ("dataset", "n") => cfg.dataset.n = num(section, key, v)?,
                    ("dataset", "symmetry_order") => {
                        cfg.dataset.symmetry_order = num(section, key, v)?
                    }
                    ("dataset", "delta_max") => cfg.dataset.delta_max = num(section, key, v)?,
                    ("dataset", "noise_ratio") => cfg.dataset.noise_ratio = num(section, key, v)?,
                    ("dataset", "seed") => cfg.dataset.seed = num(section, key, v)?,
                    ("dataset", "use_projections") => {
                        cfg.dataset.use_projections = boolean(section, key, v)?
                    }
                    ("dataset", "defocus_um") => cfg.dataset.defocus_um = list(section, key, v)?,
                    ("dataset", "ctf") => cfg.dataset.ctf.enabled = boolean(section, key, v)?,
                    ("dataset", "pixel_size_a") => {
                        cfg.dataset.ctf.pixel_size_a = num(section, key, v)?
                    }
                    ("dataset", "voltage_kv") => cfg.dataset.ctf.voltage_kv = num(section, key, v)?,
                    ("dataset", "cs_mm") => cfg.dataset.ctf.cs_mm = num(section, key, v)?,
                    ("dataset", "amplitude_contrast") => {
                        cfg.dataset.ctf.amplitude_contrast = num(section, key, v)?
                    }
                    ("dataset", "conformations") => {
                        cfg.dataset.law = ConformationLaw::Discrete(conformations(key, v)?)
                    }
                    ("lowres", "n") => cfg.lowres.n = num(section, key, v)?,
                    ("lowres", "q") => cfg.lowres.q = num(section, key, v)?,
                    ("lowres", "mean_tol") => cfg.lowres.mean_cg.tol = num(section, key, v)?,
                    ("lowres", "mean_max_iter") => {
                        cfg.lowres.mean_cg.max_iter = num(section, key, v)?
                    }
                    ("lowres", "cov_tol") => cfg.lowres.covariance.cg.tol = num(section, key, v)?,
                    ("lowres", "cov_max_iter") => {
                        cfg.lowres.covariance.cg.max_iter = num(section, key, v)?
                    }
                    ("lowres", "band_limit") => {
                        cfg.lowres.covariance.band_limit = boolean(section, key, v)?
                    }
                    ("graph", "kind") => graph_kind = Some(v.to_ascii_lowercase()),
                    ("graph", "k") => k = Some(num(section, key, v)?),
                    ("graph", "sigma") => sigma = Some(num(section, key, v)?),
                    ("specvols", "r") => cfg.specvols.r = num(section, key, v)?,
                    ("specvols", "tol") => cfg.specvols.solve.cg.tol = num(section, key, v)?,
                    ("specvols", "max_iter") => {
                        cfg.specvols.solve.cg.max_iter = num(section, key, v)?
                    }
                    ("specvols", "tikhonov") => cfg.specvols.solve.tikhonov = num(section, key, v)?,
                    ("specvols", "precondition") => {
                        cfg.specvols.solve.precondition = boolean(section, key, v)?
                    }
                    ("specvols", "ball") => cfg.specvols.solve.ball = boolean(section, key, v)?,
                    ("specvols", "diagonal") => cfg.specvols.diagonal = boolean(section, key, v)?,
                    ("specvols", "oversample") => cfg.specvols.oversample = num(section, key, v)?,
                    ("specvols", "deterministic") => {
                        cfg.specvols.deterministic = boolean(section, key, v)?
                    }
                    ("eval", "fsc_images") => cfg.eval.fsc_images = num(section, key, v)?,
                    ("eval", "winding_bins") => cfg.eval.winding_bins = num(section, key, v)?,
                    ("eval", "reconstruct") => cfg.eval.reconstruct = list(section, key, v)?,
                    ("output", "dir") => cfg.output = PathBuf::from(v),
                    ("dataset" | "lowres" | "graph" | "specvols" | "eval" | "output", _) => {
                        return Err(bad(section, key, "unknown key"))
                    }
                    _ => {
                        return Err(Error::Config(if section.is_empty() {
                            format!("key {key:?} outside any section")
                        } else {
                            format!("unknown section [{section}]")
                        }))
                    }
                }
            }
        }
        cfg.graph = match graph_kind.as_deref().unwrap_or("knn") {
            "knn" => {
                if sigma.is_some() {
                    return Err(bad("graph", "sigma", "only used with kind = gaussian"));
                }
                GraphKind::Knn {
                    k: k.unwrap_or(10.0) as usize,
                }
            }
            "gaussian" => {
                if k.is_some() {
                    return Err(bad("graph", "k", "only used with kind = knn"));
                }
                GraphKind::Gaussian {
                    sigma: sigma.unwrap_or(1.0),
                }
            }
            other => return Err(bad("graph", "kind", format!("unknown graph {other:?}"))),
        };
        if let Some(k) = k {
            if k.fract() != 0.0 || k < 1.0 {
                return Err(bad("graph", "k", "must be a positive integer"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.specvols.r < 1 {
            return fail("[specvols] r must be at least 1".into());
        }
        if self.lowres.q < 1 {
            return fail("[lowres] q must be at least 1".into());
        }
        if self.lowres.n < 2 || self.lowres.n > self.dataset.n {
            return fail(format!("[lowres] n must lie in 2..={}", self.dataset.n));
        }
        if self.specvols.r > self.dataset.n_images {
            return fail("[specvols] r exceeds the number of images".into());
        }
        match self.graph {
            GraphKind::Knn { k } if k < 1 || k >= self.dataset.n_images => {
                return fail("[graph] k must lie in 1..n_images".into())
            }
            GraphKind::Gaussian { sigma } if !(sigma > 0.0) => {
                return fail("[graph] sigma must be positive".into())
            }
            _ => {}
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.specvols.solve.cg.tol)
            || !positive(self.lowres.mean_cg.tol)
            || !positive(self.lowres.covariance.cg.tol)
        {
            return fail("CG tolerances must be positive".into());
        }
        if !(self.specvols.oversample >= 1.0) {
            return fail("[specvols] oversample must be at least 1".into());
        }
        if !(self.specvols.solve.tikhonov >= 0.0) {
            return fail("[specvols] tikhonov must be non-negative".into());
        }
        Ok(())
    }
}
