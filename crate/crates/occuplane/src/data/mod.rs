//! Synthetic shape dataset: analytic CSG ground truth, surface sampling,
//! noising, and the on-disk sample format.
//!
//! Analytic CSG occupancy replaces mesh-based labeling: labels are exact,
//! and the same oracles serve the volumetric metrics. All shapes live inside
//! `[-0.45, 0.45]^3`, leaving a margin inside the world cube.

mod dataset;
mod io;
mod sample;
mod shapes;

pub use dataset::{
    generate_dataset, verify_labels, Dataset, DatasetRecipe, FamilyCounts, ShapeFamily,
};
pub use io::{load_sample, save_sample};
pub use sample::{make_sample, sample_surface};
pub use shapes::{bounding_radius, occupancy_at, signed_distance, ShapeSpec};

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected \"DPCS\")")]
    BadMagic { path: String },
    #[error("{path}: unsupported version {version} (reader supports {supported})")]
    UnsupportedVersion {
        path: String,
        version: u32,
        supported: u32,
    },
    #[error("{path}: truncated or malformed section: {what}")]
    Malformed { path: String, what: String },
    #[error("{path}: shape spec does not parse: {msg}")]
    ShapeParse { path: String, msg: String },
    #[error("surface sampling exhausted its candidate budget (kept {kept} of {wanted})")]
    DegenerateShape { kept: usize, wanted: usize },
    #[error("{path}: manifest line {line} is malformed")]
    BadManifest { path: String, line: usize },
}

pub type Result<V> = std::result::Result<V, DataError>;

/// Dataset split membership. Splits are disjoint by shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One training example: the generating shape, its clean and noisy surface
/// points, and labeled query points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub shape: ShapeSpec,
    pub surface_points: Vec<[f32; 3]>,
    pub input_cloud: Vec<[f32; 3]>,
    pub query_points: Vec<[f32; 3]>,
    pub occupancy_labels: Vec<bool>,
    /// Assigned by the dataset manifest; `None` for free-standing samples.
    pub split: Option<Split>,
}

impl SampleRecord {
    pub fn input_cloud_f64(&self) -> Vec<Vec3> {
        to_f64(&self.input_cloud)
    }

    pub fn query_points_f64(&self) -> Vec<Vec3> {
        to_f64(&self.query_points)
    }
}

pub(crate) fn to_f64(points: &[[f32; 3]]) -> Vec<Vec3> {
    points
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect()
}
