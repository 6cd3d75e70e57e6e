//! File formats: VGRD grid fields, Gaussian-splat PLY, raw rasters with
//! text sidecars, the pipeline configuration, and parameter documents.

pub mod config;
pub mod params_doc;
pub mod ply;
pub mod raster;
pub mod vgrd;
