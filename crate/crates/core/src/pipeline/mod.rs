//! Data side of the system: image I/O, dataset manifests, preprocessing,
//! random training patches and the overlap grid used at inference.

pub mod grid;
pub mod io;
pub mod manifest;
pub mod patches;
pub mod preprocess;
pub mod raster;

pub use grid::{binarize, plan_grid, stitch, PatchGrid};
pub use io::Image8;
pub use manifest::{FundusSample, Manifest, Record, Split};
pub use patches::{sample_patches, sample_specs, PatchPair, PatchSpec};
pub use preprocess::{preprocess, PreprocessConfig, Preprocessed};
pub use raster::Raster;
