//! Spectral-volume reconstruction of continuously heterogeneous 3D densities.
//!
//! The crate is organised as a pipeline:
//!
//! * [`grid`], [`fourier`], [`nufft`], [`rotation`], [`ctf`] and [`imaging`]
//!   hold the transform and imaging-operator primitives,
//! * [`simulate`] produces phantoms and synthetic datasets,
//! * [`lowres`] runs the low-resolution mean/covariance/PCA stage,
//! * [`graph`] builds the affinity graph and its Laplacian eigenbasis,
//! * [`specvols`] solves the generalized tomographic problem for the
//!   spectral volumes,
//! * [`eval`] scores reconstructions,
//! * [`io`] holds the on-disk formats, configuration and pipeline driver.

pub mod cg;
pub mod ctf;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod graph;
pub mod grid;
pub mod imaging;
pub mod io;
pub mod linalg;
pub mod lowres;
pub mod nufft;
pub mod rotation;
pub mod simulate;
pub mod specvols;

pub use error::{Error, Result};
pub use grid::{Field, Grid, Image, Volume};
