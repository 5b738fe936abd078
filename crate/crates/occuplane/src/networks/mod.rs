//! The learned pipeline: point encoder with local pooling, dynamic plane
//! predictor, plane-specific feature summation, scatter projection, a
//! shared-weight U-Net over the feature planes, and the occupancy decoder.

mod checkpoint;
mod decoder;
mod layers;
mod model;
mod pointnet;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{EncodedScene, Model};

use std::collections::HashMap;

use thiserror::Error;

use crate::autodiff::{Real, Tape, TensorId};
use crate::geometry::PositionalEncodingConfig;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("tensor error in model forward: {0}")]
    Tensor(#[from] crate::autodiff::TensorError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<V> = std::result::Result<V, ModelError>;

/// Architecture hyperparameters. `num_planes` counts all projection planes;
/// the first `fixed_canonical_planes` (0 or 3) are the axis-aligned planes of
/// the fixed-plane baseline, the rest are predicted per input. Setting
/// `num_planes = 0` selects the global-feature ablation, which skips planar
/// features entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub num_planes: usize,
    pub fixed_canonical_planes: usize,
    pub plane_resolution: usize,
    pub unet_depth: usize,
    pub pointnet_blocks: usize,
    pub positional_encoding: PositionalEncodingConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 32,
            num_planes: 3,
            fixed_canonical_planes: 0,
            plane_resolution: 64,
            unet_depth: 4,
            pointnet_blocks: 5,
            positional_encoding: PositionalEncodingConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn num_dynamic(&self) -> usize {
        self.num_planes - self.fixed_canonical_planes
    }

    pub fn global_only(&self) -> bool {
        self.num_planes == 0
    }

    /// Encoded input width: 3 raw coordinates or the positional expansion.
    pub fn input_dim(&self) -> usize {
        self.positional_encoding.point_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.feature_dim == 0 || self.pointnet_blocks == 0 {
            return fail("feature_dim and pointnet_blocks must be positive".into());
        }
        if self.fixed_canonical_planes != 0 && self.fixed_canonical_planes != 3 {
            return fail(format!(
                "fixed_canonical_planes must be 0 or 3, got {}",
                self.fixed_canonical_planes
            ));
        }
        if self.global_only() {
            if self.fixed_canonical_planes != 0 {
                return fail("global-only ablation cannot carry canonical planes".into());
            }
            return Ok(());
        }
        if self.fixed_canonical_planes > self.num_planes {
            return fail(format!(
                "{} canonical planes exceed {} total planes",
                self.fixed_canonical_planes, self.num_planes
            ));
        }
        if self.unet_depth == 0 {
            return fail("unet_depth must be at least 1".into());
        }
        let div = 1usize << self.unet_depth;
        if self.plane_resolution % div != 0 || self.plane_resolution / div == 0 {
            return fail(format!(
                "plane resolution {} is not divisible into a U-Net of depth {}",
                self.plane_resolution, self.unet_depth
            ));
        }
        Ok(())
    }
}

/// Index of a parameter inside [`ModelWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Named parameter store. Construction order is deterministic, so parameter
/// indices are stable for a given configuration.
#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ModelWeights<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelWeights<T> {
    pub fn new() -> Self {
        ModelWeights {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> ParamId {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            shape,
            values,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Converts parameter values to another scalar type (f32 storage <-> f64
    /// verification runs).
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let mut out = ModelWeights::new();
        for p in &self.params {
            out.add(
                p.name.clone(),
                p.shape.clone(),
                p.values.iter().map(|v| U::of(v.as_f64())).collect(),
            );
        }
        out
    }
}

/// Per-forward-pass mapping from parameters to tape tensors.
pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    /// Registers every parameter as a tape leaf. `trainable` leaves receive
    /// gradients on backward.
    pub fn bind<T: Real>(weights: &ModelWeights<T>, tape: &mut Tape<T>, trainable: bool) -> Self {
        let ids = weights
            .params
            .iter()
            .map(|p| {
                tape.leaf(&p.shape, p.values.clone(), trainable)
                    .expect("parameter shapes are consistent")
            })
            .collect();
        ParamBinding { ids }
    }

    pub fn tensor(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }

    /// Reads the accumulated gradient of every parameter, zeros where a
    /// parameter did not participate.
    pub fn gradients<T: Real>(&self, weights: &ModelWeights<T>, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.ids
            .iter()
            .zip(weights.params.iter())
            .map(|(&tid, p)| {
                tape.grad(tid)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.values.len()])
            })
            .collect()
    }
}
