//! Per-point feature extraction and dynamic plane prediction.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, TensorId};

use super::layers::{Linear, ResnetBlockFc};
use super::{ModelWeights, ParamBinding, Result};

/// ResNet point encoder with local pooling. Each block consumes its
/// predecessor's output concatenated with a pooled context: points are binned
/// into the three canonical-plane grids, the per-bin maximum is gathered back
/// to every point, and the three plane contributions are summed.
pub struct ResnetPointnet {
    fc_pos: Linear,
    blocks: Vec<ResnetBlockFc>,
    fc_out: Linear,
}

impl ResnetPointnet {
    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        feature_dim: usize,
        num_blocks: usize,
    ) -> ResnetPointnet {
        let d = feature_dim;
        let fc_pos = Linear::new(weights, rng, "pointnet.fc_pos", input_dim, 2 * d);
        let blocks = (0..num_blocks)
            .map(|i| ResnetBlockFc::new(weights, rng, &format!("pointnet.block{i}"), 2 * d, d))
            .collect();
        let fc_out = Linear::new(weights, rng, "pointnet.fc_out", d, d);
        ResnetPointnet {
            fc_pos,
            blocks,
            fc_out,
        }
    }

    /// `points_encoded`: `[N, input_dim]`; `pool_bins`: per canonical plane,
    /// the grid cell of every point at the configured plane resolution.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        points_encoded: TensorId,
        pool_bins: &[Vec<usize>],
        num_cells: usize,
    ) -> Result<TensorId> {
        let mut net = self.fc_pos.forward(tape, binding, points_encoded)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                let pooled = local_pool(tape, net, pool_bins, num_cells)?;
                net = tape.concat_cols(net, pooled)?;
            }
            net = block.forward(tape, binding, net)?;
        }
        Ok(self.fc_out.forward(tape, binding, net)?)
    }
}

/// Scatter-max into each canonical grid, gather back to the points, sum over
/// the three planes.
fn local_pool<T: Real>(
    tape: &mut Tape<T>,
    features: TensorId,
    pool_bins: &[Vec<usize>],
    num_cells: usize,
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for bins in pool_bins {
        let grid = tape.scatter_max(features, bins, num_cells)?;
        let back = tape.gather_rows(grid, bins)?;
        acc = Some(match acc {
            None => back,
            Some(a) => tape.add(a, back)?,
        });
    }
    Ok(acc.expect("at least one pooling plane"))
}

/// Shallow PointNet with global max pooling that regresses one raw normal
/// `(a, b, c)` per dynamic plane, plus one feature per plane obtained by a
/// single FC layer applied to the predicted parameters.
pub struct PlanePredictor {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    head: Linear,
    plane_feat: Linear,
    num_dynamic: usize,
}

impl PlanePredictor {
    pub const HIDDEN: usize = 64;

    pub fn new<T: Real>(
        weights: &mut ModelWeights<T>,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        feature_dim: usize,
        num_dynamic: usize,
    ) -> PlanePredictor {
        let h = Self::HIDDEN;
        PlanePredictor {
            l1: Linear::new(weights, rng, "predictor.l1", input_dim, h),
            l2: Linear::new(weights, rng, "predictor.l2", h, h),
            l3: Linear::new(weights, rng, "predictor.l3", h, h),
            head: Linear::new(weights, rng, "predictor.head", h, num_dynamic * 3),
            plane_feat: Linear::new(weights, rng, "predictor.plane_feat", 3, feature_dim),
            num_dynamic,
        }
    }

    /// Returns `(raw plane parameters [num_dynamic, 3], plane features
    /// [num_dynamic, feature_dim])`, both on the tape so gradients reach the
    /// predictor.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &ParamBinding,
        points_encoded: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let n = tape.shape(points_encoded)[0];
        let mut net = self.l1.forward(tape, binding, points_encoded)?;
        net = tape.relu(net);
        net = self.l2.forward(tape, binding, net)?;
        net = tape.relu(net);
        net = self.l3.forward(tape, binding, net)?;
        // Global max pool over all points.
        let global = tape.scatter_max(net, &vec![0; n], 1)?;
        let raw = self.head.forward(tape, binding, global)?;
        let params = tape.reshape(raw, &[self.num_dynamic, 3])?;
        let feats = self.plane_feat.forward(tape, binding, params)?;
        Ok((params, feats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::geometry::{grid_index, project_points, PlaneBasis};

    fn encode_raw(points: &[[f64; 3]]) -> Vec<f64> {
        points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    fn bins_for(points: &[[f64; 3]], res: usize) -> Vec<Vec<usize>> {
        PlaneBasis::canonical()
            .iter()
            .map(|b| grid_index(&project_points(points, b), res))
            .collect()
    }

    fn build(input_dim: usize, d: usize, blocks: usize) -> (ModelWeights<f64>, ResnetPointnet) {
        let mut weights = ModelWeights::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ResnetPointnet::new(&mut weights, &mut rng, input_dim, d, blocks);
        (weights, net)
    }

    fn run_pointnet(
        weights: &ModelWeights<f64>,
        net: &ResnetPointnet,
        points: &[[f64; 3]],
        res: usize,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(weights, &mut tape, false);
        let enc = tape
            .constant(&[points.len(), 3], encode_raw(points))
            .unwrap();
        let bins = bins_for(points, res);
        let out = net
            .forward(&mut tape, &binding, enc, &bins, res * res)
            .unwrap();
        tape.values(out).to_vec()
    }

    #[test]
    fn single_point_forward_has_expected_shape() {
        let (weights, net) = build(3, 8, 3);
        let out = run_pointnet(&weights, &net, &[[0.1, -0.2, 0.3]], 8);
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permuting_points_permutes_features() {
        let (weights, net) = build(3, 8, 3);
        let points = vec![
            [0.1, -0.2, 0.3],
            [-0.4, 0.1, 0.0],
            [0.25, 0.25, -0.25],
            [0.0, 0.4, 0.4],
        ];
        let out = run_pointnet(&weights, &net, &points, 8);
        let permuted: Vec<[f64; 3]> = vec![points[2], points[0], points[3], points[1]];
        let out_p = run_pointnet(&weights, &net, &permuted, 8);
        let d = 8;
        for (new_row, &old_row) in [1usize, 3, 0, 2].iter().enumerate() {
            // Row `new_row` of the permuted output is row `old_row` of the
            // original, bit for bit.
            assert_eq!(
                &out_p[new_row * d..(new_row + 1) * d],
                &out[old_row * d..(old_row + 1) * d]
            );
        }
    }

    #[test]
    fn distant_cluster_features_ignore_the_other_cluster() {
        let (weights, net) = build(3, 8, 3);
        let res = 4; // coarse bins keep each cluster inside its own cells
        let cluster_a = vec![[-0.4, -0.4, -0.4], [-0.38, -0.42, -0.41]];
        let b_original = vec![[0.4, 0.4, 0.4], [0.42, 0.38, 0.41]];
        let b_moved = vec![[0.41, 0.41, 0.41], [0.43, 0.39, 0.42]];

        let mut points = cluster_a.clone();
        points.extend(&b_original);
        let out = run_pointnet(&weights, &net, &points, res);

        let mut moved = cluster_a.clone();
        moved.extend(&b_moved);
        let out_moved = run_pointnet(&weights, &net, &moved, res);

        // Cluster B stayed within its own bins, so cluster A's features are
        // bit-identical.
        assert_eq!(&out[..2 * 8], &out_moved[..2 * 8]);
        assert_ne!(&out[2 * 8..], &out_moved[2 * 8..]);
    }

    #[test]
    fn predictor_shapes_and_global_pool_invariance() {
        let mut weights = ModelWeights::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = PlanePredictor::new(&mut weights, &mut rng, 3, 32, 5);

        let run = |points: &[[f64; 3]]| {
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&weights, &mut tape, false);
            let enc = tape
                .constant(&[points.len(), 3], encode_raw(points))
                .unwrap();
            let (params, feats) = pred.forward(&mut tape, &binding, enc).unwrap();
            assert_eq!(tape.shape(params), &[5, 3]);
            assert_eq!(tape.shape(feats), &[5, 32]);
            (tape.values(params).to_vec(), tape.values(feats).to_vec())
        };

        let points = vec![
            [0.2, 0.1, -0.3],
            [-0.1, 0.4, 0.2],
            [0.0, -0.2, 0.1],
        ];
        let (params, feats) = run(&points);

        // Shuffling leaves the global max pool unchanged.
        let shuffled = vec![points[2], points[0], points[1]];
        let (params_s, feats_s) = run(&shuffled);
        assert_eq!(params, params_s);
        assert_eq!(feats, feats_s);

        // Duplicating every point leaves the maximum unchanged.
        let mut doubled = points.clone();
        doubled.extend(&points);
        let (params_d, feats_d) = run(&doubled);
        assert_eq!(params, params_d);
        assert_eq!(feats, feats_d);
    }

    #[test]
    fn predictor_parameter_count_is_about_thirteen_thousand() {
        let mut weights = ModelWeights::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Positionally encoded input, five dynamic planes: the reference
        // operating point.
        let _ = PlanePredictor::new(&mut weights, &mut rng, 60, 32, 5);
        let count = weights.value_count();
        assert!(
            count > 13_000 / 2 && count < 13_000 * 2,
            "predictor has {count} parameters"
        );
    }
}
