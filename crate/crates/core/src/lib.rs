//! Panorama sliding and Gaussian splatting reconstruction.
//!
//! The crate turns a 360° equirectangular panorama into a set of overlapping
//! perspective views, initializes a colored point cloud from per-view depth,
//! and fits a Gaussian splatting scene (with optional pose refinement) under
//! photometric, semantic and geometric losses. Neural models are reached
//! through pluggable [`hooks`].

pub mod error;
pub mod fusion;
pub mod hooks;
pub mod io;
pub mod losses;
pub mod panorama;
pub mod pointinit;
pub mod rasterizer;
pub mod raster;
pub mod refine;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use raster::Image;
