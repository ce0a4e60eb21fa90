//! Parallel-beam CT simulation for metal artifact reduction experiments.
//!
//! The crate covers the full path from a procedural phantom to a paired
//! (artifact, clean) training image:
//!
//! * [`phantom`]: torso- and dental-like HU phantoms with metal inserts
//! * [`project`]: ray-driven forward projection and metal trace extraction
//! * [`fbp`]: Ram-Lak filtered backprojection
//! * [`spectrum`]: three-bin polychromatic source and material attenuation table
//! * [`simulate`]: polychromatic, Poisson-noisy acquisition and reconstruction
//! * [`li`]: linear-interpolation inpainting of the metal trace
//! * [`hu`]: HU window normalization
//!
//! Heavy loops run through [`par`], which uses rayon when the `parallel`
//! feature is enabled and falls back to plain iteration otherwise.

pub mod fbp;
pub mod geometry;
pub mod hu;
pub mod li;
pub mod par;
pub mod phantom;
pub mod project;
pub mod simulate;
pub mod spectrum;

pub use fbp::fbp_reconstruct;
pub use geometry::{ScanGeometry, Sinogram};
pub use hu::{hu_denormalize, hu_normalize, HU_MAX, HU_MIN};
pub use li::li_interpolate;
pub use phantom::{make_phantom, make_phantom_with, Material, MetalFamily, MetalInsert, Phantom, PhantomOptions, PhantomProfile};
pub use project::{forward_project, metal_trace, TraceMask};
pub use simulate::{simulate_metal_artifact, ArtifactPair, DomainTag, SimulatedScan};
pub use spectrum::SpectrumModel;

/// Row-major 2-D grid of reals used for images and sinograms.
pub type Grid = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum PhysError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("view {view} is entirely covered by the metal trace")]
    UnrecoverableView { view: usize },
}

pub type Result<T> = std::result::Result<T, PhysError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PhysError::InvalidArgument(msg.into()))
}
