//! CSG shape trees over exact analytic primitives.
//!
//! Occupancy is an exact boolean (primitive boundaries count as occupied);
//! the signed distance is exact for primitives and a conservative bound after
//! boolean combinations, which is all the surface sampler needs.

use serde::{Deserialize, Serialize};

use crate::geometry::{cross, dot, mat_mul_vec, mat_transpose, norm, Mat3, Vec3};

/// A solid described by CSG operations over analytic primitives, with an
/// optional rigid pose per subtree. The torus axis is +z in local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeSpec {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Cuboid {
        center: Vec3,
        half_extents: Vec3,
    },
    Torus {
        center: Vec3,
        major_radius: f64,
        minor_radius: f64,
    },
    Cylinder {
        center: Vec3,
        axis: Vec3,
        radius: f64,
        half_height: f64,
    },
    Union(Box<ShapeSpec>, Box<ShapeSpec>),
    Intersection(Box<ShapeSpec>, Box<ShapeSpec>),
    Difference(Box<ShapeSpec>, Box<ShapeSpec>),
    /// Applies `p -> R p + t` to the child solid.
    Posed {
        rotation: Mat3,
        translation: Vec3,
        shape: Box<ShapeSpec>,
    },
}

impl ShapeSpec {
    pub fn union(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec {
        ShapeSpec::Union(Box::new(a), Box::new(b))
    }

    pub fn intersection(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec {
        ShapeSpec::Intersection(Box::new(a), Box::new(b))
    }

    pub fn difference(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec {
        ShapeSpec::Difference(Box::new(a), Box::new(b))
    }

    pub fn rotated(self, rotation: Mat3) -> ShapeSpec {
        ShapeSpec::Posed {
            rotation,
            translation: [0.0, 0.0, 0.0],
            shape: Box::new(self),
        }
    }

    /// Canonical text encoding used inside sample files.
    pub fn to_text(&self) -> String {
        ron::ser::to_string(self).expect("shape serialization cannot fail")
    }

    pub fn from_text(text: &str) -> Result<ShapeSpec, String> {
        ron::de::from_str(text).map_err(|e| e.to_string())
    }
}

/// Exact point-in-solid test. Boundary points resolve as occupied for
/// primitives; booleans follow set semantics (`difference` removes the
/// closed subtrahend).
pub fn occupancy_at(shape: &ShapeSpec, p: Vec3) -> bool {
    match shape {
        ShapeSpec::Sphere { center, radius } => {
            let d = sub(p, *center);
            dot(d, d) <= radius * radius
        }
        ShapeSpec::Cuboid {
            center,
            half_extents,
        } => {
            let d = sub(p, *center);
            d[0].abs() <= half_extents[0]
                && d[1].abs() <= half_extents[1]
                && d[2].abs() <= half_extents[2]
        }
        ShapeSpec::Torus {
            center,
            major_radius,
            minor_radius,
        } => {
            let d = sub(p, *center);
            let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major_radius;
            ring * ring + d[2] * d[2] <= minor_radius * minor_radius
        }
        ShapeSpec::Cylinder {
            center,
            axis,
            radius,
            half_height,
        } => {
            let a = unit(*axis);
            let d = sub(p, *center);
            let t = dot(d, a);
            if t.abs() > *half_height {
                return false;
            }
            let radial = sub(d, scale3(a, t));
            dot(radial, radial) <= radius * radius
        }
        ShapeSpec::Union(a, b) => occupancy_at(a, p) || occupancy_at(b, p),
        ShapeSpec::Intersection(a, b) => occupancy_at(a, p) && occupancy_at(b, p),
        ShapeSpec::Difference(a, b) => occupancy_at(a, p) && !occupancy_at(b, p),
        ShapeSpec::Posed {
            rotation,
            translation,
            shape,
        } => occupancy_at(shape, mat_mul_vec(&mat_transpose(rotation), sub(p, *translation))),
    }
}

/// Signed distance: exact for primitives, a bound (correct sign, conservative
/// magnitude) after CSG operations.
pub fn signed_distance(shape: &ShapeSpec, p: Vec3) -> f64 {
    match shape {
        ShapeSpec::Sphere { center, radius } => norm(sub(p, *center)) - radius,
        ShapeSpec::Cuboid {
            center,
            half_extents,
        } => {
            let d = sub(p, *center);
            let q = [
                d[0].abs() - half_extents[0],
                d[1].abs() - half_extents[1],
                d[2].abs() - half_extents[2],
            ];
            let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
            let inside = q[0].max(q[1]).max(q[2]).min(0.0);
            outside + inside
        }
        ShapeSpec::Torus {
            center,
            major_radius,
            minor_radius,
        } => {
            let d = sub(p, *center);
            let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major_radius;
            (ring * ring + d[2] * d[2]).sqrt() - minor_radius
        }
        ShapeSpec::Cylinder {
            center,
            axis,
            radius,
            half_height,
        } => {
            let a = unit(*axis);
            let d = sub(p, *center);
            let t = dot(d, a);
            let radial = norm(sub(d, scale3(a, t))) - radius;
            let axial = t.abs() - half_height;
            let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
            let inside = radial.max(axial).min(0.0);
            outside + inside
        }
        ShapeSpec::Union(a, b) => signed_distance(a, p).min(signed_distance(b, p)),
        ShapeSpec::Intersection(a, b) => signed_distance(a, p).max(signed_distance(b, p)),
        ShapeSpec::Difference(a, b) => signed_distance(a, p).max(-signed_distance(b, p)),
        ShapeSpec::Posed {
            rotation,
            translation,
            shape,
        } => signed_distance(shape, mat_mul_vec(&mat_transpose(rotation), sub(p, *translation))),
    }
}

/// Radius of an origin-centered ball guaranteed to contain the solid.
/// Conservative through booleans (intersection takes the tighter operand).
pub fn bounding_radius(shape: &ShapeSpec) -> f64 {
    match shape {
        ShapeSpec::Sphere { center, radius } => norm(*center) + radius,
        ShapeSpec::Cuboid {
            center,
            half_extents,
        } => norm(*center) + norm(*half_extents),
        ShapeSpec::Torus {
            center,
            major_radius,
            minor_radius,
        } => norm(*center) + major_radius + minor_radius,
        ShapeSpec::Cylinder {
            center,
            radius,
            half_height,
            ..
        } => norm(*center) + (radius * radius + half_height * half_height).sqrt(),
        ShapeSpec::Union(a, b) => bounding_radius(a).max(bounding_radius(b)),
        ShapeSpec::Intersection(a, b) => bounding_radius(a).min(bounding_radius(b)),
        ShapeSpec::Difference(a, _) => bounding_radius(a),
        ShapeSpec::Posed {
            translation, shape, ..
        } => norm(*translation) + bounding_radius(shape),
    }
}

/// A leaf primitive with its accumulated rigid pose, ready for surface
/// sampling.
pub(crate) struct PosedPrimitive<'a> {
    pub prim: &'a ShapeSpec,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl PosedPrimitive<'_> {
    pub fn to_world(&self, local: Vec3, local_normal: Vec3) -> (Vec3, Vec3) {
        (
            add(mat_mul_vec(&self.rotation, local), self.translation),
            mat_mul_vec(&self.rotation, local_normal),
        )
    }
}

pub(crate) fn collect_primitives<'a>(
    shape: &'a ShapeSpec,
    rotation: Mat3,
    translation: Vec3,
    out: &mut Vec<PosedPrimitive<'a>>,
) {
    match shape {
        ShapeSpec::Union(a, b) | ShapeSpec::Intersection(a, b) | ShapeSpec::Difference(a, b) => {
            collect_primitives(a, rotation, translation, out);
            collect_primitives(b, rotation, translation, out);
        }
        ShapeSpec::Posed {
            rotation: r,
            translation: t,
            shape,
        } => {
            let combined_r = mat_mul(&rotation, r);
            let combined_t = add(mat_mul_vec(&rotation, *t), translation);
            collect_primitives(shape, combined_r, combined_t, out);
        }
        prim => out.push(PosedPrimitive {
            prim,
            rotation,
            translation,
        }),
    }
}

/// Surface area of a leaf primitive (rigid poses preserve it).
pub(crate) fn primitive_area(prim: &ShapeSpec) -> f64 {
    use std::f64::consts::PI;
    match prim {
        ShapeSpec::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        ShapeSpec::Cuboid { half_extents, .. } => {
            let [x, y, z] = *half_extents;
            8.0 * (x * y + y * z + x * z)
        }
        ShapeSpec::Torus {
            major_radius,
            minor_radius,
            ..
        } => 4.0 * PI * PI * major_radius * minor_radius,
        ShapeSpec::Cylinder {
            radius,
            half_height,
            ..
        } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
        _ => unreachable!("primitive_area called on a non-leaf node"),
    }
}

pub(crate) const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn unit(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n < 1e-12 {
        [0.0, 0.0, 1.0]
    } else {
        scale3(a, 1.0 / n)
    }
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (l, brow) in b.iter().enumerate() {
                out[i][j] += a[i][l] * brow[j];
            }
        }
    }
    out
}

/// Orthonormal frame with `w` as third axis, for disk/cap sampling.
pub(crate) fn frame_for_axis(w: Vec3) -> (Vec3, Vec3) {
    let w = unit(w);
    let helper = if w[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = unit(cross(helper, w));
    let v = cross(w, u);
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> ShapeSpec {
        ShapeSpec::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: r,
        }
    }

    #[test]
    fn sphere_occupancy_inside_and_out() {
        let s = sphere(0.4);
        assert!(occupancy_at(&s, [0.0, 0.0, 0.0]));
        assert!(!occupancy_at(&s, [0.45, 0.0, 0.0]));
        // Boundary resolves as occupied.
        assert!(occupancy_at(&s, [0.4, 0.0, 0.0]));
    }

    #[test]
    fn difference_removes_subtrahend_interior() {
        let b = ShapeSpec::Cuboid {
            center: [0.0, 0.0, 0.0],
            half_extents: [0.3, 0.3, 0.3],
        };
        let shape = ShapeSpec::difference(b, sphere(0.2));
        // Inside both cuboid and sphere: removed.
        assert!(!occupancy_at(&shape, [0.0, 0.0, 0.0]));
        // Inside cuboid only: kept.
        assert!(occupancy_at(&shape, [0.25, 0.25, 0.25]));
    }

    #[test]
    fn posed_occupancy_rotates_the_solid() {
        let c = ShapeSpec::Cuboid {
            center: [0.0, 0.0, 0.0],
            half_extents: [0.3, 0.05, 0.05],
        };
        // Quarter turn about z maps the long x-extent onto y.
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let posed = c.rotated(rot);
        assert!(occupancy_at(&posed, [0.0, 0.25, 0.0]));
        assert!(!occupancy_at(&posed, [0.25, 0.0, 0.0]));
    }

    #[test]
    fn signed_distance_matches_occupancy_sign() {
        let shape = ShapeSpec::union(
            sphere(0.3),
            ShapeSpec::Cuboid {
                center: [0.2, 0.0, 0.0],
                half_extents: [0.15, 0.1, 0.1],
            },
        );
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let occ = occupancy_at(&shape, p);
            let sd = signed_distance(&shape, p);
            if sd.abs() > 1e-9 {
                assert_eq!(occ, sd < 0.0, "sign mismatch at {p:?} (sd = {sd})");
            }
        }
    }

    #[test]
    fn bounding_radius_contains_shape() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let shape = ShapeSpec::union(
            ShapeSpec::Torus {
                center: [0.1, 0.0, 0.0],
                major_radius: 0.2,
                minor_radius: 0.05,
            },
            ShapeSpec::Cylinder {
                center: [-0.1, 0.1, 0.0],
                axis: [0.0, 0.0, 1.0],
                radius: 0.08,
                half_height: 0.2,
            },
        );
        let bound = bounding_radius(&shape);
        for _ in 0..5000 {
            let p = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            if occupancy_at(&shape, p) {
                assert!(norm(p) <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn text_encoding_round_trips() {
        let shape = ShapeSpec::difference(
            ShapeSpec::union(
                sphere(0.33),
                ShapeSpec::Cylinder {
                    center: [0.01, -0.2, 0.1],
                    axis: [0.3, 0.4, 0.5],
                    radius: 0.07,
                    half_height: 0.123456789,
                },
            ),
            ShapeSpec::Torus {
                center: [0.0, 0.1, 0.0],
                major_radius: 0.15,
                minor_radius: 0.04,
            },
        );
        let text = shape.to_text();
        let back = ShapeSpec::from_text(&text).unwrap();
        assert_eq!(shape, back);
        // Canonical: repeated encoding is byte-identical.
        assert_eq!(text, back.to_text());
    }
}
