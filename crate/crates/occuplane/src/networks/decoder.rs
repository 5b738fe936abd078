//! Occupancy decoder: five residual blocks with the queried planar feature
//! injected before every block through a learned linear map.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, TensorId};

use super::layers::{Linear, ResnetBlockFc};
use super::{ModelWeights, ParamBinding, Result};

pub const DECODER_BLOCKS: usize = 5;

pub struct Decoder {
    fc_p: Linear,
    fc_psi: Vec<Linear>,
    blocks: Vec<ResnetBlockFc>,
    fc_out: Linear,
}

impl Decoder {
    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        feature_dim: usize,
    ) -> Decoder {
        let d = feature_dim;
        let fc_p = Linear::new(weights, rng, "decoder.fc_p", input_dim, d);
        let fc_psi = (0..DECODER_BLOCKS)
            .map(|i| Linear::new(weights, rng, &format!("decoder.fc_psi{i}"), d, d))
            .collect();
        let blocks = (0..DECODER_BLOCKS)
            .map(|i| ResnetBlockFc::new(weights, rng, &format!("decoder.block{i}"), d, d))
            .collect();
        // Zero head: an untrained model answers probability one half.
        let fc_out = Linear::new_zeroed(weights, "decoder.fc_out", d, 1);
        Decoder {
            fc_p,
            fc_psi,
            blocks,
            fc_out,
        }
    }

    /// `queries_encoded`: `[Q, input_dim]`; `psi`: `[Q, feature_dim]`.
    /// Returns occupancy logits `[Q]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        queries_encoded: TensorId,
        psi: TensorId,
    ) -> Result<TensorId> {
        let q = tape.shape(queries_encoded)[0];
        let mut net = self.fc_p.forward(tape, binding, queries_encoded)?;
        for (proj, block) in self.fc_psi.iter().zip(&self.blocks) {
            let conditioned = proj.forward(tape, binding, psi)?;
            net = tape.add(net, conditioned)?;
            net = block.forward(tape, binding, net)?;
        }
        let activated = tape.relu(net);
        let logits = self.fc_out.forward(tape, binding, activated)?;
        Ok(tape.reshape(logits, &[q])?)
    }
}
