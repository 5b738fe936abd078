//! Layer building blocks bound to the tape through parameter ids.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, TensorId};

use super::{ModelWeights, ParamBinding, ParamId, Result};

/// Fan-in scaled uniform weights, the standard fully-connected default.
fn fan_in_values<T: Real>(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect()
}

/// Fully-connected layer `x[N, in] -> x W + b`.
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let w = weights.add(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            fan_in_values(rng, in_dim * out_dim, in_dim),
        );
        let b = weights.add(
            format!("{name}.b"),
            vec![out_dim],
            vec![T::zero(); out_dim],
        );
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn new_no_bias<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let w = weights.add(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            fan_in_values(rng, in_dim * out_dim, in_dim),
        );
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    /// All-zero layer; used for the final occupancy head so training starts
    /// at probability one half.
    pub fn new_zeroed<T: Real>(
        weights: &mut ModelWeights<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let w = weights.add(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            vec![T::zero(); in_dim * out_dim],
        );
        let b = weights.add(
            format!("{name}.b"),
            vec![out_dim],
            vec![T::zero(); out_dim],
        );
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId> {
        let mut out = tape.matmul(x, binding.tensor(self.w))?;
        if let Some(b) = self.b {
            out = tape.add(out, binding.tensor(b))?;
        }
        Ok(out)
    }
}

/// 3x3 (or 1x1) convolution with per-channel bias, stride 1, same padding.
pub struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    k: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> ConvLayer {
        let fan_in = in_ch * k * k;
        let kernel = weights.add(
            format!("{name}.w"),
            vec![out_ch, in_ch, k, k],
            fan_in_values(rng, out_ch * fan_in, fan_in),
        );
        // Bias broadcasts over H and W.
        let bias = weights.add(
            format!("{name}.b"),
            vec![out_ch, 1, 1],
            vec![T::zero(); out_ch],
        );
        ConvLayer { kernel, bias, k }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId> {
        let c = tape.conv2d(x, binding.tensor(self.kernel), 1, self.k / 2)?;
        Ok(tape.add(c, binding.tensor(self.bias))?)
    }
}

/// Fully-connected residual block: `x + fc_1(relu(fc_0(relu(x))))`, with a
/// bias-free linear shortcut when the width changes.
pub struct ResnetBlockFc {
    fc_0: Linear,
    fc_1: Linear,
    shortcut: Option<Linear>,
}

impl ResnetBlockFc {
    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> ResnetBlockFc {
        let hidden = in_dim.min(out_dim);
        let fc_0 = Linear::new(weights, rng, &format!("{name}.fc0"), in_dim, hidden);
        let fc_1 = Linear::new(weights, rng, &format!("{name}.fc1"), hidden, out_dim);
        let shortcut = (in_dim != out_dim)
            .then(|| Linear::new_no_bias(weights, rng, &format!("{name}.skip"), in_dim, out_dim));
        ResnetBlockFc {
            fc_0,
            fc_1,
            shortcut,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId> {
        let a = tape.relu(x);
        let net = self.fc_0.forward(tape, binding, a)?;
        let a2 = tape.relu(net);
        let dx = self.fc_1.forward(tape, binding, a2)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, binding, x)?,
            None => x,
        };
        Ok(tape.add(skip, dx)?)
    }
}
