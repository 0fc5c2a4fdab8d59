//! Content-aware retargeting of images, point sets and triangle meshes.
//!
//! Instead of removing discrete seams, this crate fits a small coordinate
//! network `D` that maps every output position to an offset along the
//! resize axis; the output at `p` is the input sampled at `p + v * D(p)`.
//! `D` is optimized so that stretching is spent where the content is least
//! interesting, transitions stay smooth, boundaries map to boundaries and
//! lookups never run backwards. A classic dynamic-programming seam carver
//! is included as a baseline, and the same machinery extends to point
//! clouds and meshes along one axis in 3D.
//!
//! Module map:
//!
//! * [`nn`] — the network substrate: positional encoding, a fixed residual
//!   MLP with exact reverse-mode gradients, Adam, checkpoints.
//! * [`image`] — raster images and 8-bit quantization.
//! * [`fields`] — continuous image / energy / cumulative-energy fields.
//! * [`deform`] — the deformation losses, optimizer and renderer.
//! * [`seam`] — the discrete seam-carving baseline.
//! * [`edit`] — object removal and relocation via masked deformation.
//! * [`points`] — the 3D path: point-set scenes, inverse maps.
//! * [`mesh`] — triangle meshes, curvature energies, OBJ I/O.
//! * [`fixtures`] — deterministic synthetic inputs used by tests and the
//!   CLI.

pub mod blas;
pub mod error;
pub mod deform;
pub mod fields;
pub mod fixtures;
pub mod image;
pub mod nn;
pub mod seam;

pub use error::{Error, Result};

/// The image axis being resized. `X` changes width (columns move), `Y`
/// changes height. The 3D pipeline fixes its own axis convention per scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            other => Err(Error::argument(format!("unknown axis {other:?}; use x or y"))),
        }
    }
}

/// Prepares the numeric backend (kernel selection, thread caps). Safe to
/// call more than once; the CLI calls it first thing.
pub fn init() {
    blas::init();
}
