//! Relocalization of a stereo camera against a textured mesh map by virtual
//! template synthesis and matching (VTSM).
//!
//! The pipeline renders small patches of the map from randomized virtual
//! viewpoints near a pose prior, finds them in the real stereo pair by masked
//! normalized cross-correlation, triangulates the accepted matches and
//! re-estimates the camera pose with Umeyama + RANSAC, iterating with a set
//! of search strategies (stall, reseed, anneal, distribute, reuse).
//!
//! Modules mirror the pipeline stages:
//! - [`geometry`]: rigid transforms, perturbation sampling, rectified stereo model
//! - [`meshmap`]: textured mesh map, sampling mask, visibility queries, OBJ I/O
//! - [`render`]: software rasterizer for template patches and full frames
//! - [`matcher`]: masked zero-mean NCC search with multi-modality fallback
//! - [`posesolve`]: stereo triangulation, Umeyama alignment, RANSAC
//! - [`vtsm`]: the iterative localization loop and its search strategies
//! - [`scenegen`]: procedural depot-analog scenes and relit query imagery
//! - [`harness`]: experiment runner, per-trial records, CSV/SVG reports

pub mod geometry;
pub mod harness;
pub mod matcher;
pub mod meshmap;
pub mod posesolve;
mod raycast;
pub mod render;
pub mod scenegen;
pub mod vtsm;

pub use geometry::{CameraSide, PixelCoord, Pose, SearchBounds, StereoRig};
pub use meshmap::{MapPoint, SamplingMask, TexturedMesh};
pub use posesolve::Correspondence;
pub use vtsm::{LocalizeOutcome, VtsmConfig};
