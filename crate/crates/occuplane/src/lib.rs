//! Surface reconstruction from noisy point clouds using occupancy fields on
//! learned projection planes.
//!
//! A point cloud is encoded into per-point features, projected onto a set of
//! 2D feature planes whose orientations are predicted per input by a small
//! network, refined by a shared-weight U-Net, and decoded into a continuous
//! occupancy field. Meshes are extracted from the field by multiresolution
//! isosurface refinement followed by marching cubes.
//!
//! The crate is organized around the stages of that pipeline:
//!
//! - [`autodiff`]: a minimal reverse-mode tape with exactly the tensor ops the
//!   pipeline needs, plus a finite-difference gradient checker.
//! - [`geometry`]: plane normalization, basis change, orthographic projection,
//!   grid indexing, and positional encoding. Pure functions, no learning.
//! - [`networks`]: the point encoder, plane predictor, shared U-Net, and
//!   occupancy decoder, with binary checkpoint I/O.
//! - [`training`]: losses (binary cross-entropy, plane-normal similarity),
//!   Adam, and the training loop with validation-based model selection.
//! - [`meshing`]: field evaluation, multiresolution isosurface extraction with
//!   a dense-grid oracle, marching cubes, and OBJ export.
//! - [`metrics`]: volumetric IoU, Chamfer-L1, normal consistency, F-score,
//!   the rotation-robustness protocol, and the plane-normal report.
//! - [`data`]: synthetic CSG shapes with exact occupancy oracles, surface
//!   sampling, noising, and the on-disk sample format.
//! - [`commands`]: the operations behind the `occuplane` command-line tool.
//!
//! The `examples/` directory contains one runnable program per major
//! capability; start with `overfit_single_shape` for an end-to-end tour.

pub mod autodiff;
pub mod commands;
pub mod data;
pub mod geometry;
pub mod meshing;
pub mod metrics;
pub mod networks;
pub mod training;
