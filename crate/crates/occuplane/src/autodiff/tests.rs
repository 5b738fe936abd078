use super::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tape() -> Tape<f64> {
    Tape::new()
}

#[test]
fn relu_clamps_negatives() {
    let mut t = tape();
    let a = t.leaf(&[3], vec![-1.0, 0.0, 2.0], false).unwrap();
    let r = t.relu(a);
    assert_eq!(t.values(r), &[0.0, 0.0, 2.0]);
}

#[test]
fn sin_cos_identities() {
    let mut t = tape();
    let a = t.leaf(&[1], vec![0.0], false).unwrap();
    let s = t.sin(a);
    let c = t.cos(a);
    assert_eq!(t.values(s), &[0.0]);
    assert_eq!(t.values(c), &[1.0]);
}

#[test]
fn mul_gradient_is_product_rule() {
    let mut t = tape();
    let a = t.leaf(&[1], vec![2.0], true).unwrap();
    let b = t.leaf(&[1], vec![3.0], true).unwrap();
    let p = t.mul(a, b).unwrap();
    t.backward(p).unwrap();
    assert_eq!(t.grad(a).unwrap(), &[3.0]);
    assert_eq!(t.grad(b).unwrap(), &[2.0]);
}

#[test]
fn matmul_identity_and_selection() {
    let mut t = tape();
    let eye = t
        .leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false)
        .unwrap();
    let m = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let prod = t.matmul(eye, m).unwrap();
    assert_eq!(t.values(prod), &[1.0, 2.0, 3.0, 4.0]);

    let sel = t.leaf(&[1, 2], vec![1.0, 0.0], false).unwrap();
    let col = t.leaf(&[2, 1], vec![5.0, 7.0], false).unwrap();
    let picked = t.matmul(sel, col).unwrap();
    assert_eq!(t.values(picked), &[5.0]);
}

#[test]
fn matmul_inner_dim_mismatch_rejected() {
    let mut t = tape();
    let a = t.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
    let b = t.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
    assert!(matches!(
        t.matmul(a, b),
        Err(TensorError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        &[(vec![3, 4], a), (vec![4, 2], b)],
        |t, ids| {
            let m = t.matmul(ids[0], ids[1]).unwrap();
            t.sum(m)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn conv2d_box_sum_counts_neighbors() {
    let mut t = tape();
    let input = t.leaf(&[1, 3, 3], vec![1.0; 9], false).unwrap();
    let kernel = t.leaf(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let out = t.conv2d(input, kernel, 1, 1).unwrap();
    assert_eq!(t.shape(out), &[1, 3, 3]);
    let v = t.values(out);
    assert_eq!(v[4], 9.0); // center sees all nine ones
    assert_eq!(v[0], 4.0); // corner sees a 2x2 patch
    assert_eq!(v[2], 4.0);
    assert_eq!(v[6], 4.0);
    assert_eq!(v[8], 4.0);
}

#[test]
fn conv2d_identity_kernel_preserves_input() {
    let mut t = tape();
    let values: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 2.0).collect();
    let input = t.leaf(&[1, 4, 4], values.clone(), false).unwrap();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let kernel = t.leaf(&[1, 1, 3, 3], k, false).unwrap();
    let out = t.conv2d(input, kernel, 1, 1).unwrap();
    assert_eq!(t.values(out), values.as_slice());
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut t = tape();
    let input = t.leaf(&[1, 4, 4], vec![0.0; 16], false).unwrap();
    let kernel = t.leaf(&[1, 1, 3, 3], vec![0.0; 9], false).unwrap();
    assert!(t.conv2d(input, kernel, 2, 0).is_err());
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kernel: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        &[(vec![2, 8, 8], input), (vec![3, 2, 3, 3], kernel)],
        |t, ids| {
            let c = t.conv2d(ids[0], ids[1], 1, 1).unwrap();
            t.sum(c)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn max_pool_takes_window_maximum() {
    let mut t = tape();
    let input = t.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let out = t.pool2d(PoolKind::Max, input, 2).unwrap();
    assert_eq!(t.values(out), &[4.0]);
}

#[test]
fn upsample_replicates_nearest() {
    let mut t = tape();
    let input = t.leaf(&[1, 1, 1], vec![5.0], false).unwrap();
    let out = t.upsample2d_nearest(input, 2).unwrap();
    assert_eq!(t.shape(out), &[1, 2, 2]);
    assert_eq!(t.values(out), &[5.0, 5.0, 5.0, 5.0]);
}

#[test]
fn avg_pool_gradient_splits_evenly() {
    let mut t = tape();
    let input = t.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
    let out = t.pool2d(PoolKind::Avg, input, 2).unwrap();
    let loss = t.sum(out);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(input).unwrap(), &[0.25; 4]);
}

#[test]
fn max_pool_gradient_routes_to_argmax_only() {
    let mut t = tape();
    let input = t.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
    let out = t.pool2d(PoolKind::Max, input, 2).unwrap();
    let loss = t.sum(out);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(input).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn pool_rejects_indivisible_window() {
    let mut t = tape();
    let input = t.leaf(&[1, 3, 3], vec![0.0; 9], false).unwrap();
    assert!(t.pool2d(PoolKind::Max, input, 2).is_err());
}

#[test]
fn scatter_max_keeps_cell_maximum_and_zeros_empty_cells() {
    let mut t = tape();
    let feats = t.leaf(&[2, 1], vec![1.0, 3.0], false).unwrap();
    let out = t.scatter_max(feats, &[0, 0], 2).unwrap();
    assert_eq!(t.values(out), &[3.0, 0.0]);
}

#[test]
fn scatter_max_single_point_is_identity() {
    let mut t = tape();
    let feats = t.leaf(&[1, 3], vec![0.5, -0.25, 2.0], false).unwrap();
    let out = t.scatter_max(feats, &[1], 3).unwrap();
    assert_eq!(
        t.values(out),
        &[0.0, 0.0, 0.0, 0.5, -0.25, 2.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn scatter_max_rejects_out_of_range_cell() {
    let mut t = tape();
    let feats = t.leaf(&[1, 1], vec![1.0], false).unwrap();
    assert!(matches!(
        t.scatter_max(feats, &[4], 4),
        Err(TensorError::CellIndexOutOfRange { index: 4, num_cells: 4 })
    ));
}

#[test]
fn scatter_max_gradient_flows_to_argmax_point() {
    // Values spaced away from ties so the finite-difference probe stays on
    // the analytic branch.
    let feats = vec![0.2, 0.9, -0.4, 0.5, 0.1, -0.8];
    let report = grad_check(
        &[(vec![3, 2], feats)],
        |t, ids| {
            let s = t.scatter_max(ids[0], &[0, 0, 1], 2).unwrap();
            t.sum(s)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn scatter_then_gather_reproduces_cell_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40;
    let d = 5;
    let feats: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let cells: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
    let mut t = tape();
    let f = t.leaf(&[n, d], feats.clone(), false).unwrap();
    let grid = t.scatter_max(f, &cells, 8).unwrap();
    let back = t.gather_rows(grid, &cells).unwrap();
    for (row, &cell) in cells.iter().enumerate() {
        for ch in 0..d {
            let expected = (0..n)
                .filter(|&r| cells[r] == cell)
                .map(|r| feats[r * d + ch])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(t.values(back)[row * d + ch], expected);
        }
    }
}

#[test]
fn gather_bilinear_at_cell_center_returns_cell_value() {
    let mut t = tape();
    let grid = t
        .leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
        .unwrap();
    // Center of cell (1, 0): u = 1.5/2, v = 0.5/2.
    let uv = t.leaf(&[1, 2], vec![0.75, 0.25], false).unwrap();
    let out = t.gather_bilinear(grid, uv).unwrap();
    assert_eq!(t.values(out), &[3.0]);
}

#[test]
fn gather_bilinear_midway_averages_neighbors() {
    let mut t = tape();
    let grid = t
        .leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
        .unwrap();
    // Midway between the centers of cells (0,0) and (0,1).
    let uv = t.leaf(&[1, 2], vec![0.25, 0.5], false).unwrap();
    let out = t.gather_bilinear(grid, uv).unwrap();
    assert_eq!(t.values(out), &[1.5]);
}

#[test]
fn gather_bilinear_constant_grid_is_constant() {
    let mut t = tape();
    let grid = t.leaf(&[2, 4, 4], vec![0.7; 32], false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let uv: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.3..1.3)).collect();
    let uv = t.leaf(&[10, 2], uv, false).unwrap();
    let out = t.gather_bilinear(grid, uv).unwrap();
    for &v in t.values(out) {
        assert!((v - 0.7).abs() < 1e-12);
    }
}

#[test]
fn gather_bilinear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let grid: Vec<f64> = (0..3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let uv: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..0.9)).collect();
    let uv_fixed = uv.clone();
    let report = grad_check(
        &[(vec![3, 4, 4], grid)],
        move |t, ids| {
            let uv = t.constant(&[6, 2], uv_fixed.clone()).unwrap();
            let g = t.gather_bilinear(ids[0], uv).unwrap();
            t.sum(g)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn backward_of_sum_gives_ones() {
    let mut t = tape();
    let w = t.leaf(&[3], vec![0.3, -0.7, 1.1], true).unwrap();
    let loss = t.sum(w);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_populates_zero_grad_for_unused_leaves() {
    let mut t = tape();
    let w = t.leaf(&[3], vec![0.3, -0.7, 1.1], true).unwrap();
    let other = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let loss = t.sum(other);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = tape();
    let w = t.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    assert!(matches!(
        t.backward(w),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn repeated_backward_accumulates() {
    let mut t = tape();
    let w = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let loss = t.sum(w);
    t.backward(loss).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[2.0, 2.0]);
}

#[test]
fn composite_graph_gradient_matches_finite_differences() {
    // conv -> relu -> matmul chain, probed away from relu kinks.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let sample = |rng: &mut ChaCha8Rng| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() > 0.05 {
            return v;
        }
    };
    let input: Vec<f64> = (0..16).map(|_| sample(&mut rng)).collect();
    let kernel: Vec<f64> = (0..9).map(|_| sample(&mut rng)).collect();
    let weight: Vec<f64> = (0..8).map(|_| sample(&mut rng)).collect();
    let report = grad_check(
        &[
            (vec![1, 4, 4], input),
            (vec![1, 1, 3, 3], kernel),
            (vec![4, 2], weight),
        ],
        |t, ids| {
            let c = t.conv2d(ids[0], ids[1], 1, 1).unwrap();
            let r = t.relu(c);
            let flat = t.reshape(r, &[4, 4]).unwrap();
            let m = t.matmul(flat, ids[2]).unwrap();
            t.mean(m)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn grad_check_is_exact_for_linear_maps() {
    let report = grad_check(
        &[(vec![4], vec![0.1, -0.2, 0.3, 0.4])],
        |t, ids| {
            let s = t.scale(ids[0], 2.5);
            t.sum(s)
        },
        1e-3,
        1e-10,
    );
    assert!(
        report.max_rel_error < 1e-9,
        "linear map should differentiate exactly, got {}",
        report.max_rel_error
    );
}

#[test]
fn grad_check_passes_relu_away_from_kink() {
    let report = grad_check(
        &[(vec![4], vec![0.5, -0.5, 1.5, -2.0])],
        |t, ids| {
            let r = t.relu(ids[0]);
            t.sum(r)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let grads_of = |combine: fn(&mut Tape<f64>, TensorId, TensorId) -> TensorId| -> Vec<f64> {
        let mut t = tape();
        let leaf = t.leaf(&[2, 3], w.clone(), true).unwrap();
        let s = t.sin(leaf);
        let l1 = t.sum(s);
        let m = t.mul(leaf, leaf).unwrap();
        let l2 = t.mean(m);
        let loss = combine(&mut t, l1, l2);
        t.backward(loss).unwrap();
        t.grad(leaf).unwrap().to_vec()
    };

    let combined = grads_of(|t, a, b| t.add(a, b).unwrap());
    let first = grads_of(|t, a, _| t.scale(a, 1.0));
    let second = grads_of(|t, _, b| t.scale(b, 1.0));
    for i in 0..combined.len() {
        assert!((combined[i] - first[i] - second[i]).abs() < 1e-12);
    }
}

#[test]
fn broadcast_add_matches_explicit_tiling() {
    let mut t = tape();
    let a = t
        .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
        .unwrap();
    let b = t.leaf(&[3], vec![10.0, 20.0, 30.0], false).unwrap();
    let out = t.add(a, b).unwrap();
    assert_eq!(t.values(out), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
}

#[test]
fn broadcast_backward_reduces_over_expanded_axes() {
    let mut t = tape();
    let a = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let bias = t.leaf(&[2], vec![0.5, -0.5], true).unwrap();
    let out = t.add(a, bias).unwrap();
    let loss = t.sum(out);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(bias).unwrap(), &[2.0, 2.0]);
}

#[test]
fn broadcast_rejects_incompatible_shapes() {
    let mut t = tape();
    let a = t.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
    let b = t.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
    assert!(t.add(a, b).is_err());
}

#[test]
fn bce_with_logits_closed_forms() {
    let mut t = tape();
    let z = t.leaf(&[1], vec![0.0], false).unwrap();
    let l = t.bce_with_logits(z, &[true]).unwrap();
    assert!((t.values(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let mut t = tape();
    let z = t.leaf(&[1], vec![20.0], false).unwrap();
    let l = t.bce_with_logits(z, &[true]).unwrap();
    assert!(t.values(l)[0] < 1e-8);

    let mut t = tape();
    let z = t.leaf(&[1], vec![-20.0], false).unwrap();
    let l = t.bce_with_logits(z, &[true]).unwrap();
    assert!((t.values(l)[0] - 20.0).abs() < 1e-6);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let xs: Vec<f64> = (0..8)
        .map(|_| {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() < 0.1 {
                v + 0.3
            } else {
                v
            }
        })
        .collect();
    let ys: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let report = grad_check(
        &[(vec![8], xs), (vec![8], ys)],
        |t, ids| {
            let s = t.sin(ids[0]);
            let c = t.cos(ids[1]);
            let m = t.mul(s, c).unwrap();
            let g = t.sigmoid(m);
            let d = t.sub(g, ids[1]).unwrap();
            let sc = t.scale(d, 0.7);
            t.mean(sc)
        },
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn pairwise_cos_penalty_gradient_matches_finite_differences() {
    let rows = vec![0.8, 0.2, -0.1, -0.3, 0.9, 0.4, 0.2, -0.5, 0.7];
    let report = grad_check(
        &[(vec![3, 3], rows)],
        |t, ids| t.pairwise_cos_penalty(ids[0], 10).unwrap(),
        1e-3,
        1e-4,
    );
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn gather_rows_and_concat_follow_indices() {
    let mut t = tape();
    let src = t
        .leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
        .unwrap();
    let picked = t.gather_rows(src, &[2, 0, 2]).unwrap();
    assert_eq!(t.values(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);

    let other = t.leaf(&[3, 1], vec![9.0, 8.0, 7.0], false).unwrap();
    let joined = t.concat_cols(picked, other).unwrap();
    assert_eq!(t.shape(joined), &[3, 3]);
    assert_eq!(t.values(joined), &[5.0, 6.0, 9.0, 1.0, 2.0, 8.0, 5.0, 6.0, 7.0]);

    let loss = t.sum(joined);
    t.backward(loss).unwrap();
    // Row 2 was gathered twice, row 1 never.
    assert_eq!(t.grad(src).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}
