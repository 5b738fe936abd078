//! Surface sampling and sample assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::geometry::Vec3;

use super::shapes::{
    add, collect_primitives, frame_for_axis, occupancy_at, primitive_area, scale3, unit,
    PosedPrimitive, ShapeSpec, IDENTITY,
};
use super::{DataError, Result, SampleRecord};

/// Offset used to probe both sides of a candidate point when filtering the
/// exposed boundary of a CSG composite.
const BOUNDARY_PROBE: f64 = 1e-4;

/// Candidate budget multiplier before a shape is declared degenerate.
const CANDIDATE_BUDGET: usize = 512;

/// Draws `n` points uniformly by area from the exposed surface of a shape.
///
/// Candidates come from exact parametric samplers on each primitive, weighted
/// by primitive area; for composites a candidate survives only if the solid's
/// occupancy flips across it along the primitive normal. Deterministic per
/// seed.
pub fn sample_surface(shape: &ShapeSpec, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::new();
    collect_primitives(shape, IDENTITY, [0.0, 0.0, 0.0], &mut prims);
    let single = prims.len() == 1;

    let areas: Vec<f64> = prims.iter().map(|p| primitive_area(p.prim)).collect();
    let total_area: f64 = areas.iter().sum();
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cumulative.push(acc);
    }

    let mut out = Vec::with_capacity(n);
    let budget = CANDIDATE_BUDGET * n.max(64);
    let mut used = 0usize;
    while out.len() < n {
        if used >= budget {
            return Err(DataError::DegenerateShape {
                kept: out.len(),
                wanted: n,
            });
        }
        used += 1;
        let pick = rng.gen_range(0.0..total_area);
        let which = cumulative.partition_point(|&c| c <= pick).min(prims.len() - 1);
        let (point, normal) = sample_primitive(&prims[which], &mut rng);
        if single || on_composite_boundary(shape, point, normal) {
            out.push(point);
        }
    }
    Ok(out)
}

fn on_composite_boundary(shape: &ShapeSpec, point: Vec3, normal: Vec3) -> bool {
    let outside = add(point, scale3(normal, BOUNDARY_PROBE));
    let inside = add(point, scale3(normal, -BOUNDARY_PROBE));
    occupancy_at(shape, outside) != occupancy_at(shape, inside)
}

/// One area-uniform point (and its outward normal) on a posed primitive.
fn sample_primitive(posed: &PosedPrimitive<'_>, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    use std::f64::consts::PI;
    let (local, normal) = match posed.prim {
        ShapeSpec::Sphere { center, radius } => {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            (add(*center, scale3(dir, *radius)), dir)
        }
        ShapeSpec::Cuboid {
            center,
            half_extents,
        } => {
            let [hx, hy, hz] = *half_extents;
            let face_areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy];
            let total: f64 = face_areas.iter().sum::<f64>();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            for (i, &a) in face_areas.iter().enumerate() {
                if pick < a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            let (p, nrm) = match face {
                0 => ([hx, u * hy, v * hz], [1.0, 0.0, 0.0]),
                1 => ([-hx, u * hy, v * hz], [-1.0, 0.0, 0.0]),
                2 => ([u * hx, hy, v * hz], [0.0, 1.0, 0.0]),
                3 => ([u * hx, -hy, v * hz], [0.0, -1.0, 0.0]),
                4 => ([u * hx, v * hy, hz], [0.0, 0.0, 1.0]),
                _ => ([u * hx, v * hy, -hz], [0.0, 0.0, -1.0]),
            };
            (add(*center, p), nrm)
        }
        ShapeSpec::Torus {
            center,
            major_radius,
            minor_radius,
        } => {
            // Area density over the tube angle is proportional to
            // R + r cos(v); rejection against the maximum flattens it.
            let u = rng.gen_range(0.0..2.0 * PI);
            let v = loop {
                let v = rng.gen_range(0.0..2.0 * PI);
                let accept = (major_radius + minor_radius * v.cos())
                    / (major_radius + minor_radius);
                if rng.gen_range(0.0..1.0) < accept {
                    break v;
                }
            };
            let ring = major_radius + minor_radius * v.cos();
            let p = [
                ring * u.cos(),
                ring * u.sin(),
                minor_radius * v.sin(),
            ];
            let nrm = [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()];
            (add(*center, p), nrm)
        }
        ShapeSpec::Cylinder {
            center,
            axis,
            radius,
            half_height,
        } => {
            let a = unit(*axis);
            let (u_ax, v_ax) = frame_for_axis(a);
            let side = 2.0 * PI * radius * (2.0 * half_height);
            let cap = PI * radius * radius;
            let pick = rng.gen_range(0.0..side + 2.0 * cap);
            if pick < side {
                let ang = rng.gen_range(0.0..2.0 * PI);
                let h = rng.gen_range(-*half_height..*half_height);
                let radial = add(scale3(u_ax, ang.cos()), scale3(v_ax, ang.sin()));
                (
                    add(*center, add(scale3(radial, *radius), scale3(a, h))),
                    radial,
                )
            } else {
                let top = pick < side + cap;
                let ang = rng.gen_range(0.0..2.0 * PI);
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let radial = add(scale3(u_ax, ang.cos()), scale3(v_ax, ang.sin()));
                let sign = if top { 1.0 } else { -1.0 };
                (
                    add(
                        *center,
                        add(scale3(radial, r), scale3(a, sign * *half_height)),
                    ),
                    scale3(a, sign),
                )
            }
        }
        _ => unreachable!("sample_primitive called on a non-leaf node"),
    };
    posed.to_world(local, normal)
}

/// Builds a full training sample: noisy surface cloud plus uniformly sampled,
/// exactly labeled query points. Noise is isotropic Gaussian applied before
/// clamping to the world cube, so the cloud keeps its size.
pub fn make_sample(
    shape: &ShapeSpec,
    n_surface: usize,
    q_queries: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface_seed = rng.gen::<u64>();
    let surface = sample_surface(shape, n_surface, surface_seed)?;

    let surface_points: Vec<[f32; 3]> = surface
        .iter()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();

    let input_cloud: Vec<[f32; 3]> = if noise_sigma == 0.0 {
        surface_points.clone()
    } else {
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        surface
            .iter()
            .map(|p| {
                let mut q = [0f32; 3];
                for (axis, qv) in q.iter_mut().enumerate() {
                    let noisy = p[axis] + normal.sample(&mut rng);
                    *qv = noisy.clamp(-0.5, 0.5) as f32;
                }
                q
            })
            .collect()
    };

    let mut query_points = Vec::with_capacity(q_queries);
    let mut occupancy_labels = Vec::with_capacity(q_queries);
    for _ in 0..q_queries {
        let q = [
            rng.gen_range(-0.5f32..=0.5),
            rng.gen_range(-0.5f32..=0.5),
            rng.gen_range(-0.5f32..=0.5),
        ];
        query_points.push(q);
        occupancy_labels.push(occupancy_at(shape, [q[0] as f64, q[1] as f64, q[2] as f64]));
    }

    Ok(SampleRecord {
        shape: shape.clone(),
        surface_points,
        input_cloud,
        query_points,
        occupancy_labels,
        split: None,
    })
}
