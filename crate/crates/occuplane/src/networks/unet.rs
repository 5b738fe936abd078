//! Encoder-decoder over a feature plane with skip connections. One weight set
//! is applied to every plane.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PoolKind, Real, Tape, TensorId};

use super::layers::ConvLayer;
use super::{ModelWeights, ParamBinding, Result};

pub struct Unet {
    down: Vec<ConvLayer>,
    bottleneck: ConvLayer,
    up: Vec<ConvLayer>,
    output: ConvLayer,
    depth: usize,
}

impl Unet {
    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        channels: usize,
        depth: usize,
    ) -> Unet {
        let d = channels;
        let down = (0..depth)
            .map(|i| ConvLayer::new(weights, rng, &format!("unet.down{i}"), d, d, 3))
            .collect();
        let bottleneck = ConvLayer::new(weights, rng, "unet.bottleneck", d, d, 3);
        // Up convolutions see the upsampled features concatenated with the
        // skip connection, channel-wise.
        let up = (0..depth)
            .map(|i| ConvLayer::new(weights, rng, &format!("unet.up{i}"), 2 * d, d, 3))
            .collect();
        let output = ConvLayer::new(weights, rng, "unet.out", d, d, 1);
        Unet {
            down,
            bottleneck,
            up,
            output,
            depth,
        }
    }

    /// `grid`: `[D, H, W]` with `H = W` divisible by `2^depth`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        grid: TensorId,
    ) -> Result<TensorId> {
        let mut skips = Vec::with_capacity(self.depth);
        let mut net = grid;
        for conv in &self.down {
            let c = conv.forward(tape, binding, net)?;
            let a = tape.relu(c);
            skips.push(a);
            net = tape.pool2d(PoolKind::Max, a, 2)?;
        }
        let b = self.bottleneck.forward(tape, binding, net)?;
        net = tape.relu(b);
        for (conv, &skip) in self.up.iter().zip(skips.iter().rev()) {
            let upsampled = tape.upsample2d_nearest(net, 2)?;
            let joined = concat_channels(tape, upsampled, skip)?;
            let c = conv.forward(tape, binding, joined)?;
            net = tape.relu(c);
        }
        Ok(self.output.forward(tape, binding, net)?)
    }
}

/// Concatenates two `[C, H, W]` tensors along the channel axis.
fn concat_channels<T: Real>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    let (ca, h, w) = (sa[0], sa[1], sa[2]);
    let cb = sb[0];
    // Channel concatenation expressed through 2D column concatenation of the
    // flattened planes.
    let fa = tape.reshape(a, &[ca, h * w])?;
    let fb = tape.reshape(b, &[cb, h * w])?;
    let ta = tape.transpose2(fa)?;
    let tb = tape.transpose2(fb)?;
    let joined = tape.concat_cols(ta, tb)?;
    let back = tape.transpose2(joined)?;
    Ok(tape.reshape(back, &[ca + cb, h, w])?)
}
