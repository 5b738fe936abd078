//! Minimal reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape owns every tensor produced during a forward pass and records one
//! op per output tensor. [`Tape::backward`] replays the records in reverse,
//! accumulating gradients into every `requires_grad` tensor. The engine
//! provides exactly the operations the reconstruction pipeline needs; it is
//! not a general-purpose framework.
//!
//! Determinism contract: for a fixed sequence of op calls and input bits,
//! forward values and gradients are bit-identical across runs. Kernels may
//! parallelize over independent output cells, but each cell's accumulation
//! loop is a fixed sequential order, so parallelism never changes results.

mod kernels;

pub mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use std::fmt;

use num_traits::{Float, NumAssignOps, NumCast};
use thiserror::Error;

/// Scalar type of a tape: `f32` for training, `f64` for verification.
pub trait Real:
    Float + NumAssignOps + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    #[inline]
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not compatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("scatter_max: cell index {index} out of range (num_cells = {num_cells})")]
    CellIndexOutOfRange { index: usize, num_cells: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: shape {shape:?} implies {expected} values, got {actual}")]
    ValueCountMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<V> = std::result::Result<V, TensorError>;

struct TensorEntry<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Pooling flavor for [`Tape::pool2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

enum Rule<T> {
    Leaf,
    /// Elementwise with trailing-dimension broadcasting.
    Add,
    Sub,
    Mul,
    Relu,
    Sin,
    Cos,
    Sigmoid,
    Scale(T),
    Matmul,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        /// Flat input index winning each output cell.
        argmax: Vec<usize>,
    },
    AvgPool2d {
        window: usize,
    },
    Upsample2d {
        factor: usize,
    },
    ScatterMax {
        /// Winning point row per (cell, channel); `None` for empty cells.
        argmax: Vec<Option<u32>>,
    },
    GatherBilinear {
        /// Four (flat H*W cell, weight) taps per query.
        taps: Vec<[(usize, T); 4]>,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    ConcatCols,
    Transpose2,
    Reshape,
    Sum,
    Mean,
    BceWithLogits {
        labels: Vec<bool>,
    },
    /// Mean over unordered row pairs of |cos(angle between rows)|^exponent.
    PairwiseCosPenalty {
        exponent: u32,
    },
}

struct OpRecord<T> {
    inputs: Vec<TensorId>,
    output: TensorId,
    rule: Rule<T>,
}

/// Records tensors and operations for one forward pass.
pub struct Tape<T: Real> {
    entries: Vec<TensorEntry<T>>,
    ops: Vec<OpRecord<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Number of tensors currently stored.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push_entry(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> TensorId {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite values entered the tape"
        );
        let id = TensorId(self.entries.len() as u32);
        self.entries.push(TensorEntry {
            shape,
            values,
            requires_grad,
            grad: None,
        });
        id
    }

    fn push_op(&mut self, inputs: Vec<TensorId>, output: TensorId, rule: Rule<T>) {
        self.ops.push(OpRecord {
            inputs,
            output,
            rule,
        });
    }

    fn output_of(
        &mut self,
        inputs: Vec<TensorId>,
        shape: Vec<usize>,
        values: Vec<T>,
        rule: Rule<T>,
    ) -> TensorId {
        let requires_grad = inputs.iter().any(|id| self.entries[id.index()].requires_grad);
        let out = self.push_entry(shape, values, requires_grad);
        self.push_op(inputs, out, rule);
        out
    }

    /// Registers an input tensor. Gradients accumulate into it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::ValueCountMismatch {
                op: "leaf",
                shape: shape.to_vec(),
                expected,
                actual: values.len(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op: "leaf",
                msg: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let id = self.push_entry(shape.to_vec(), values, requires_grad);
        self.push_op(vec![], id, Rule::Leaf);
        Ok(id)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.leaf(&[1], vec![v], false).expect("scalar leaf")
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.entries[id.index()].shape
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.entries[id.index()].values
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.entries[id.index()].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` tensor, once [`Tape::backward`] ran.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.entries[id.index()].grad.as_deref()
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.entries[id.index()].values.len()
    }

    // ---- elementwise ----

    fn binary(&mut self, op: &'static str, a: TensorId, b: TensorId, rule: Rule<T>) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })?;
        let values = kernels::broadcast_apply(
            &out_shape,
            &sa,
            self.values(a),
            &sb,
            self.values(b),
            match rule {
                Rule::Add => |x: T, y: T| x + y,
                Rule::Sub => |x, y| x - y,
                Rule::Mul => |x, y| x * y,
                _ => unreachable!("binary rule"),
            },
        );
        Ok(self.output_of(vec![a, b], out_shape, values, rule))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, Rule::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, Rule::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, Rule::Mul)
    }

    fn unary(&mut self, a: TensorId, rule: Rule<T>, f: impl Fn(T) -> T) -> TensorId {
        let shape = self.shape(a).to_vec();
        let values: Vec<T> = self.values(a).iter().map(|&x| f(x)).collect();
        self.output_of(vec![a], shape, values, rule)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Rule::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Rule::Sin, |x| x.sin())
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Rule::Cos, |x| x.cos())
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Rule::Sigmoid, kernels::sigmoid)
    }

    /// Multiplies by a compile-time constant (not a tape tensor).
    pub fn scale(&mut self, a: TensorId, k: T) -> TensorId {
        self.unary(a, Rule::Scale(k), |x| x * k)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -T::one())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernels::matmul(self.values(a), self.values(b), m, k, n);
        Ok(self.output_of(vec![a, b], vec![m, n], values, Rule::Matmul))
    }

    pub fn transpose2(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose2",
                msg: format!("expected rank-2 tensor, got shape {sa:?}"),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.values(a);
        let mut values = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.output_of(vec![a], vec![n, m], values, Rule::Transpose2))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let expected: usize = new_shape.iter().product();
        if expected != self.numel(a) {
            return Err(TensorError::ValueCountMismatch {
                op: "reshape",
                shape: new_shape.to_vec(),
                expected,
                actual: self.numel(a),
            });
        }
        let values = self.values(a).to_vec();
        Ok(self.output_of(vec![a], new_shape.to_vec(), values, Rule::Reshape))
    }

    // ---- convolution and pooling ----

    /// 2D convolution of a `C_in x H x W` input with a `C_out x C_in x k x k`
    /// kernel. The kernel size must be odd and the output size integral.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] || si[0] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let k = sk[2];
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel size {k} must be odd and stride {stride} positive"),
            });
        }
        let (h, w) = (si[1], si[2]);
        let numer_h = h + 2 * padding - k;
        let numer_w = w + 2 * padding - k;
        if numer_h % stride != 0 || numer_w % stride != 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "non-integral output size for input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
                ),
            });
        }
        let (out_h, out_w) = (numer_h / stride + 1, numer_w / stride + 1);
        let values = kernels::conv2d_forward(
            self.values(input),
            self.values(kernel),
            &si,
            &sk,
            stride,
            padding,
            out_h,
            out_w,
        );
        Ok(self.output_of(
            vec![input, kernel],
            vec![sk[0], out_h, out_w],
            values,
            Rule::Conv2d { stride, padding },
        ))
    }

    /// Window pooling of a `C x H x W` input; `H` and `W` must divide by the window.
    pub fn pool2d(&mut self, kind: PoolKind, input: TensorId, window: usize) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "pool2d",
                msg: format!("expected C x H x W input, got shape {si:?}"),
            });
        }
        if window == 0 || si[1] % window != 0 || si[2] % window != 0 {
            return Err(TensorError::InvalidArgument {
                op: "pool2d",
                msg: format!("window {window} does not divide {}x{}", si[1], si[2]),
            });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (oh, ow) = (h / window, w / window);
        match kind {
            PoolKind::Max => {
                let (values, argmax) =
                    kernels::max_pool2d_forward(self.values(input), c, h, w, window);
                Ok(self.output_of(
                    vec![input],
                    vec![c, oh, ow],
                    values,
                    Rule::MaxPool2d { argmax },
                ))
            }
            PoolKind::Avg => {
                let values = kernels::avg_pool2d_forward(self.values(input), c, h, w, window);
                Ok(self.output_of(vec![input], vec![c, oh, ow], values, Rule::AvgPool2d { window }))
            }
        }
    }

    /// Nearest-neighbor upsampling of a `C x H x W` input by an integer factor.
    pub fn upsample2d_nearest(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 || factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample2d",
                msg: format!("expected C x H x W input and positive factor, got {si:?}, {factor}"),
            });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let values = kernels::upsample2d_forward(self.values(input), c, h, w, factor);
        Ok(self.output_of(
            vec![input],
            vec![c, h * factor, w * factor],
            values,
            Rule::Upsample2d { factor },
        ))
    }

    // ---- projection ops ----

    /// Scatters `N x D` point features into `num_cells x D` grid cells,
    /// keeping the per-channel maximum. Empty cells hold zero. Gradients flow
    /// to the winning point only; ties break toward the lowest point row.
    pub fn scatter_max(
        &mut self,
        features: TensorId,
        cell_index: &[usize],
        num_cells: usize,
    ) -> Result<TensorId> {
        let sf = self.shape(features).to_vec();
        if sf.len() != 2 || sf[0] != cell_index.len() {
            return Err(TensorError::InvalidArgument {
                op: "scatter_max",
                msg: format!(
                    "features shape {sf:?} does not match {} cell indices",
                    cell_index.len()
                ),
            });
        }
        if let Some(&bad) = cell_index.iter().find(|&&i| i >= num_cells) {
            return Err(TensorError::CellIndexOutOfRange {
                index: bad,
                num_cells,
            });
        }
        let d = sf[1];
        let (values, argmax) =
            kernels::scatter_max_forward(self.values(features), cell_index, num_cells, d);
        Ok(self.output_of(
            vec![features],
            vec![num_cells, d],
            values,
            Rule::ScatterMax { argmax },
        ))
    }

    /// Bilinear lookup of a `D x H x W` grid at `Q x 2` normalized coordinates
    /// in `[0, 1]^2` (first coordinate runs over H, second over W; cell centers
    /// sit at `(i + 0.5) / H`). Coordinates are clamped and treated as
    /// constants: gradients flow to the grid values only.
    pub fn gather_bilinear(&mut self, grid: TensorId, uv: TensorId) -> Result<TensorId> {
        let (sg, su) = (self.shape(grid).to_vec(), self.shape(uv).to_vec());
        if sg.len() != 3 || su.len() != 2 || su[1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_bilinear",
                lhs: sg,
                rhs: su,
            });
        }
        let (d, h, w) = (sg[0], sg[1], sg[2]);
        let q = su[0];
        let taps = kernels::bilinear_taps(self.values(uv), q, h, w);
        let values = kernels::gather_bilinear_forward(self.values(grid), &taps, d, h, w);
        Ok(self.output_of(vec![grid], vec![q, d], values, Rule::GatherBilinear { taps }))
    }

    /// Row lookup: `out[i, :] = src[indices[i], :]`. Rows may repeat.
    pub fn gather_rows(&mut self, src: TensorId, indices: &[usize]) -> Result<TensorId> {
        let ss = self.shape(src).to_vec();
        if ss.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("expected rank-2 source, got shape {ss:?}"),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ss[0]) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {} rows", ss[0]),
            });
        }
        let d = ss[1];
        let src_vals = self.values(src);
        let mut values = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            values.extend_from_slice(&src_vals[r * d..(r + 1) * d]);
        }
        Ok(self.output_of(
            vec![src],
            vec![indices.len(), d],
            values,
            Rule::GatherRows {
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenates two `N x D1` and `N x D2` tensors along the last axis.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.values(a), self.values(b));
        let mut values = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            values.extend_from_slice(&va[i * d1..(i + 1) * d1]);
            values.extend_from_slice(&vb[i * d2..(i + 1) * d2]);
        }
        Ok(self.output_of(vec![a, b], vec![n, d1 + d2], values, Rule::ConcatCols))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &v in self.values(a) {
            acc += v;
        }
        self.output_of(vec![a], vec![1], vec![acc], Rule::Sum)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = T::of(self.numel(a) as f64);
        let mut acc = T::zero();
        for &v in self.values(a) {
            acc += v;
        }
        self.output_of(vec![a], vec![1], vec![acc / n], Rule::Mean)
    }

    /// Mean binary cross-entropy from logits, in the overflow-free form
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: TensorId, labels: &[bool]) -> Result<TensorId> {
        if self.numel(logits) != labels.len() {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits",
                msg: format!(
                    "{} logits vs {} labels",
                    self.numel(logits),
                    labels.len()
                ),
            });
        }
        let mut acc = T::zero();
        for (&z, &y) in self.values(logits).iter().zip(labels) {
            let pos = if z > T::zero() { z } else { T::zero() };
            let yz = if y { z } else { T::zero() };
            acc += pos - yz + (T::one() + (-z.abs()).exp()).ln();
        }
        let n = T::of(labels.len() as f64);
        Ok(self.output_of(
            vec![logits],
            vec![1],
            vec![acc / n],
            Rule::BceWithLogits {
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over unordered row pairs of `|cos(theta_ij)|^exponent`, where
    /// `theta_ij` is the angle between rows `i` and `j`. Rows are normalized
    /// internally; requires at least two rows.
    pub fn pairwise_cos_penalty(&mut self, rows: TensorId, exponent: u32) -> Result<TensorId> {
        let s = self.shape(rows).to_vec();
        if s.len() != 2 || s[0] < 2 || exponent == 0 {
            return Err(TensorError::InvalidArgument {
                op: "pairwise_cos_penalty",
                msg: format!("need >= 2 rows and exponent >= 1, got shape {s:?}, exponent {exponent}"),
            });
        }
        let value = kernels::pairwise_cos_penalty_forward(self.values(rows), s[0], s[1], exponent);
        Ok(self.output_of(
            vec![rows],
            vec![1],
            vec![value],
            Rule::PairwiseCosPenalty { exponent },
        ))
    }

    // ---- backward ----

    /// Propagates gradients from a scalar loss to every `requires_grad`
    /// tensor. Repeated calls accumulate into existing gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.entries.len();
        let mut flowing: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        flowing.resize_with(n, || None);
        flowing[loss.index()] = Some(vec![T::one()]);

        for op in self.ops.iter().rev() {
            let Some(gout) = flowing[op.output.index()].take() else {
                continue;
            };
            kernels::backward_op(&self.entries, op, &gout, &mut flowing);
            // Keep the output gradient if the output itself is a leaf target.
            if matches!(op.rule, Rule::Leaf) {
                flowing[op.output.index()] = Some(gout);
            }
        }

        for (i, entry) in self.entries.iter_mut().enumerate() {
            if !entry.requires_grad {
                continue;
            }
            let grad = entry
                .grad
                .get_or_insert_with(|| vec![T::zero(); entry.values.len()]);
            if let Some(g) = &flowing[i] {
                for (dst, &src) in grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
