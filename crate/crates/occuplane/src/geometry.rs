//! Deterministic plane mathematics: normalization, basis change, orthographic
//! projection with its bounding constant, grid indexing, and positional
//! encoding.
//!
//! All functions operate in `f64` on raw world coordinates. World coordinates
//! live in the cube `[-0.5, 0.5]^3`; plane coordinates produced by
//! [`project_points`] land in `[-0.5, 0.5]^2` for any unit normal.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Half side length of the world cube.
pub const WORLD_HALF_EXTENT: f64 = 0.5;

const DEGENERATE_NORMAL_EPS: f64 = 1e-8;
const ANTIPARALLEL_EPS: f64 = 1e-8;

/// Raw plane parameters as emitted by the predictor network. The plane
/// intercept is fixed at zero: shifts along the normal do not change the
/// projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParams {
    pub normal_raw: Vec3,
}

impl PlaneParams {
    pub fn new(normal_raw: Vec3) -> Self {
        PlaneParams { normal_raw }
    }
}

/// Orthonormal frame of a projection plane plus the normalization constant
/// that keeps projected cube points inside the bounded grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneBasis {
    pub n_hat: Vec3,
    pub i_p: Vec3,
    pub j_p: Vec3,
    /// Always >= 1; projected coordinates are divided by this.
    pub c_norm: f64,
}

impl PlaneBasis {
    /// The three canonical ground planes (normals +z, +y, +x), used by the
    /// fixed-plane baseline and for local pooling.
    pub fn canonical() -> [PlaneBasis; 3] {
        [
            build_plane_basis([0.0, 0.0, 1.0]),
            build_plane_basis([0.0, 1.0, 0.0]),
            build_plane_basis([1.0, 0.0, 0.0]),
        ]
    }
}

/// Frequency-band configuration of the sin/cos positional encoding. Each
/// input scalar expands to `2 * num_frequencies` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncodingConfig {
    pub num_frequencies: usize,
    pub enabled: bool,
}

impl Default for PositionalEncodingConfig {
    fn default() -> Self {
        PositionalEncodingConfig {
            num_frequencies: 10,
            enabled: true,
        }
    }
}

impl PositionalEncodingConfig {
    pub fn disabled() -> Self {
        PositionalEncodingConfig {
            num_frequencies: 10,
            enabled: false,
        }
    }

    /// Encoded dimensionality of a 3D point: 3 raw coordinates or
    /// `6 * num_frequencies` encoded values.
    pub fn point_dim(&self) -> usize {
        if self.enabled {
            6 * self.num_frequencies
        } else {
            3
        }
    }
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn mat_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

/// Normalizes raw plane parameters to a unit normal. Near-zero inputs fall
/// back to the ground normal `(0, 0, 1)` and report the degeneracy so early
/// training can proceed instead of crashing.
pub fn normalize_plane(p: PlaneParams) -> (Vec3, bool) {
    let n = norm(p.normal_raw);
    if n < DEGENERATE_NORMAL_EPS {
        return ([0.0, 0.0, 1.0], true);
    }
    (
        [
            p.normal_raw[0] / n,
            p.normal_raw[1] / n,
            p.normal_raw[2] / n,
        ],
        false,
    )
}

/// Rotation matrix taking the ground axis `k = (0, 0, 1)` onto `n_hat`:
/// `R = I + [v]x + [v]x^2 (1 - k.n) / |v|^2` with `v = k x n_hat`.
///
/// The formula is singular when `n_hat` is antiparallel to `k`; that case is
/// pinned to the half-turn about x, `diag(1, -1, -1)`. Requires a unit input.
pub fn rotation_from_k(n_hat: Vec3) -> Mat3 {
    debug_assert!(
        (norm(n_hat) - 1.0).abs() < 1e-6,
        "rotation_from_k requires a unit normal, |n| = {}",
        norm(n_hat)
    );
    let k = [0.0, 0.0, 1.0];
    let v = cross(k, n_hat);
    let c = dot(k, n_hat);
    let v_norm_sq = dot(v, v);
    if v_norm_sq < ANTIPARALLEL_EPS * ANTIPARALLEL_EPS {
        return if c >= 0.0 {
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        } else {
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]
        };
    }
    let vx = skew(v);
    let vx2 = mat_mul_mat(&vx, &vx);
    let factor = (1.0 - c) / v_norm_sq;
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            r[i][j] = eye + vx[i][j] + vx2[i][j] * factor;
        }
    }
    r
}

/// Cross-product matrix `[v]x`.
pub fn skew(v: Vec3) -> Mat3 {
    [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ]
}

fn mat_mul_mat(a: &Mat3, b: &Mat3) -> Mat3 {
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

/// Builds the plane frame by rotating the canonical axes `i` and `j` with
/// [`rotation_from_k`], then computing the bounding constant.
pub fn build_plane_basis(n_hat: Vec3) -> PlaneBasis {
    let r = rotation_from_k(n_hat);
    let i_p = mat_mul_vec(&r, [1.0, 0.0, 0.0]);
    let j_p = mat_mul_vec(&r, [0.0, 1.0, 0.0]);
    PlaneBasis {
        n_hat,
        i_p,
        j_p,
        c_norm: normalization_constant(i_p, j_p),
    }
}

/// Bounding constant `c >= 1`: project the all-ones vector onto the
/// componentwise-absolute in-plane axes and take the larger projection
/// length. For unit axes this is `max(|i_p|_1, |j_p|_1)`, which makes
/// `|p . i_p| / c <= 0.5` for every `p` in the world cube.
pub fn normalization_constant(i_p: Vec3, j_p: Vec3) -> f64 {
    let proj_len = |axis: Vec3| -> f64 {
        let a = [axis[0].abs(), axis[1].abs(), axis[2].abs()];
        let ones = [1.0, 1.0, 1.0];
        // a is unit length, so the projection of 1 onto a has length |1 . a|.
        dot(ones, a) / dot(a, a).sqrt()
    };
    proj_len(i_p).max(proj_len(j_p))
}

/// Plane coordinates of world points: `(p . i_p / c, p . j_p / c)`.
pub fn project_points(points: &[Vec3], basis: &PlaneBasis) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|&p| {
            [
                dot(p, basis.i_p) / basis.c_norm,
                dot(p, basis.j_p) / basis.c_norm,
            ]
        })
        .collect()
}

/// Row-major cell ids for plane coordinates in `[-0.5, 0.5]^2` on a square
/// `resolution x resolution` grid. Cells are half-open with the final cell
/// absorbing the +0.5 border: `cell = floor((u + 0.5) * H)` clamped.
pub fn grid_index(plane_coords: &[[f64; 2]], resolution: usize) -> Vec<usize> {
    let h = resolution;
    plane_coords
        .iter()
        .map(|&[u, v]| {
            let row = cell_of(u, h);
            let col = cell_of(v, h);
            row * h + col
        })
        .collect()
}

#[inline]
fn cell_of(coord: f64, res: usize) -> usize {
    let c = ((coord + 0.5) * res as f64).floor();
    (c.max(0.0) as usize).min(res - 1)
}

/// Normalized `[0, 1]^2` sampling coordinates for [`crate::autodiff::Tape::gather_bilinear`],
/// consistent with the cell convention of [`grid_index`].
pub fn plane_to_unit(plane_coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
    plane_coords.iter().map(|&[u, v]| [u + 0.5, v + 0.5]).collect()
}

/// Sin/cos frequency expansion of point coordinates:
/// per scalar `p` emits `sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p),
/// cos(2^(L-1) pi p)`. With `L = 10` a 3D point maps to 60 values. When the
/// config is disabled the raw coordinates pass through unchanged.
pub fn positional_encoding(points: &[Vec3], cfg: &PositionalEncodingConfig) -> Vec<f64> {
    if !cfg.enabled {
        let mut out = Vec::with_capacity(points.len() * 3);
        for p in points {
            out.extend_from_slice(p);
        }
        return out;
    }
    let l = cfg.num_frequencies;
    let mut out = Vec::with_capacity(points.len() * 6 * l);
    for p in points {
        for &coord in p {
            for band in 0..l {
                let freq = (1u64 << band) as f64 * std::f64::consts::PI;
                out.push((freq * coord).sin());
                out.push((freq * coord).cos());
            }
        }
    }
    out
}
