//! Dataset generation: random shape families, per-sample files, and the
//! split manifest.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geometry::Vec3;

use super::io::{load_sample, read_text, save_sample, write_text};
use super::sample::{make_sample, sample_surface};
use super::shapes::{bounding_radius, occupancy_at, ShapeSpec};
use super::{DataError, Result, SampleRecord, Split};

/// Shapes must fit this origin-centered ball, which keeps them inside the
/// world cube under any rotation of the evaluation protocol.
const MAX_SHAPE_RADIUS: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Single analytic primitives.
    Primitives,
    /// 2-4 primitives combined with CSG operations.
    Objects,
    /// A ground slab with several disjoint objects resting on it.
    Rooms,
}

impl ShapeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Primitives => "primitives",
            ShapeFamily::Objects => "objects",
            ShapeFamily::Rooms => "rooms",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "primitives" => Some(ShapeFamily::Primitives),
            "objects" => Some(ShapeFamily::Objects),
            "rooms" => Some(ShapeFamily::Rooms),
            _ => None,
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FamilyCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl FamilyCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        FamilyCounts { train, val, test }
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetRecipe {
    pub primitives: FamilyCounts,
    pub objects: FamilyCounts,
    pub rooms: FamilyCounts,
    /// Surface points per object-style sample.
    pub n_surface: usize,
    /// Surface points per room-style sample.
    pub n_surface_rooms: usize,
    pub q_queries: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe {
            primitives: FamilyCounts::default(),
            objects: FamilyCounts::new(50, 10, 10),
            rooms: FamilyCounts::default(),
            n_surface: 3000,
            n_surface_rooms: 10_000,
            q_queries: 2048,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Generates every sample of a recipe into `dir` alongside `manifest.txt`
/// (tab-separated filename, split, family). Regeneration from the same recipe
/// is byte-identical. Returns the number of samples written.
pub fn generate_dataset(recipe: &DatasetRecipe, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut manifest = String::new();
    let mut written = 0usize;

    for family in [ShapeFamily::Primitives, ShapeFamily::Objects, ShapeFamily::Rooms] {
        let counts = match family {
            ShapeFamily::Primitives => recipe.primitives,
            ShapeFamily::Objects => recipe.objects,
            ShapeFamily::Rooms => recipe.rooms,
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            for index in 0..counts.count(split) {
                let shape = generate_shape(family, &mut rng);
                let sample_seed = rng.gen::<u64>();
                let n_surface = match family {
                    ShapeFamily::Rooms => recipe.n_surface_rooms,
                    _ => recipe.n_surface,
                };
                let mut record =
                    make_sample(&shape, n_surface, recipe.q_queries, recipe.noise_sigma, sample_seed)?;
                record.split = Some(split);
                let name = format!("{}_{}_{:03}.dpcs", family.as_str(), split.as_str(), index);
                save_sample(&record, &dir.join(&name))?;
                manifest.push_str(&format!("{name}\t{}\t{}\n", split.as_str(), family.as_str()));
                written += 1;
            }
        }
    }
    write_text(&dir.join("manifest.txt"), &manifest)?;
    Ok(written)
}

/// A fully loaded dataset with split membership from the manifest.
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub families: Vec<ShapeFamily>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.txt");
        let manifest = read_text(&manifest_path)?;
        let mut samples = Vec::new();
        let mut families = Vec::new();
        let mut names = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (name, split, family) = match (fields.next(), fields.next(), fields.next()) {
                (Some(n), Some(s), Some(f)) => (n, s, f),
                _ => {
                    return Err(DataError::BadManifest {
                        path: manifest_path.display().to_string(),
                        line: lineno + 1,
                    })
                }
            };
            let split = Split::parse(split).ok_or_else(|| DataError::BadManifest {
                path: manifest_path.display().to_string(),
                line: lineno + 1,
            })?;
            let family = ShapeFamily::parse(family).ok_or_else(|| DataError::BadManifest {
                path: manifest_path.display().to_string(),
                line: lineno + 1,
            })?;
            let mut record = load_sample(&dir.join(name))?;
            record.split = Some(split);
            samples.push(record);
            families.push(family);
            names.push(name.to_string());
        }
        Ok(Dataset {
            samples,
            families,
            names,
        })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Re-evaluates every stored occupancy label against the analytic oracle.
pub fn verify_labels(record: &SampleRecord) -> bool {
    record
        .query_points
        .iter()
        .zip(&record.occupancy_labels)
        .all(|(q, &label)| {
            occupancy_at(&record.shape, [q[0] as f64, q[1] as f64, q[2] as f64]) == label
        })
}

fn generate_shape(family: ShapeFamily, rng: &mut ChaCha8Rng) -> ShapeSpec {
    match family {
        ShapeFamily::Primitives => random_primitive(rng, 1.0),
        ShapeFamily::Objects => random_object(rng),
        ShapeFamily::Rooms => random_room(rng),
    }
}

/// A random primitive scaled by `size`, retried until it fits the shape ball.
fn random_primitive(rng: &mut ChaCha8Rng, size: f64) -> ShapeSpec {
    loop {
        let center = [
            rng.gen_range(-0.08..0.08) * size,
            rng.gen_range(-0.08..0.08) * size,
            rng.gen_range(-0.08..0.08) * size,
        ];
        let shape = match rng.gen_range(0..4) {
            0 => ShapeSpec::Sphere {
                center,
                radius: rng.gen_range(0.15..0.38) * size,
            },
            1 => ShapeSpec::Cuboid {
                center,
                half_extents: [
                    rng.gen_range(0.1..0.32) * size,
                    rng.gen_range(0.1..0.32) * size,
                    rng.gen_range(0.1..0.32) * size,
                ],
            },
            2 => ShapeSpec::Torus {
                center,
                major_radius: rng.gen_range(0.15..0.3) * size,
                minor_radius: rng.gen_range(0.05..0.1) * size,
            },
            _ => {
                let axis: [f64; 3] = UnitSphere.sample(rng);
                ShapeSpec::Cylinder {
                    center,
                    axis,
                    radius: rng.gen_range(0.08..0.22) * size,
                    half_height: rng.gen_range(0.12..0.32) * size,
                }
            }
        };
        if bounding_radius(&shape) <= MAX_SHAPE_RADIUS * size {
            return shape;
        }
    }
}

/// 2-4 primitives combined by CSG. Retries until the composite has a
/// sampleable surface and fits the shape ball.
fn random_object(rng: &mut ChaCha8Rng) -> ShapeSpec {
    loop {
        let mut shape = random_primitive(rng, 0.85);
        let extra = rng.gen_range(1..=3);
        for _ in 0..extra {
            let mut part = random_primitive(rng, 0.6);
            part = offset_shape(part, [
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
            ]);
            shape = match rng.gen_range(0..10) {
                0 | 1 => ShapeSpec::difference(shape, part),
                _ => ShapeSpec::union(shape, part),
            };
        }
        if bounding_radius(&shape) > MAX_SHAPE_RADIUS {
            continue;
        }
        // A quick probe guards against CSG degeneracies (a subtraction that
        // swallowed the base, for example).
        let probe_seed = rng.gen::<u64>();
        if sample_surface(&shape, 32, probe_seed).is_ok() {
            return shape;
        }
    }
}

/// Ground slab plus 2-4 small objects with pairwise disjoint bounding
/// spheres, the scene-style analogue of the object family.
fn random_room(rng: &mut ChaCha8Rng) -> ShapeSpec {
    let slab_top = -0.41;
    let slab = ShapeSpec::Cuboid {
        center: [0.0, 0.0, -0.43],
        half_extents: [0.44, 0.44, 0.02],
    };
    let num_objects = rng.gen_range(2..=4);
    let mut placed: Vec<(Vec3, f64)> = Vec::new();
    let mut shape = slab;
    while placed.len() < num_objects {
        let obj = random_primitive(rng, 0.28);
        let radius = bounding_radius(&obj);
        // Rejection placement on the slab with disjoint bounding spheres.
        let mut attempts = 0;
        let position = loop {
            attempts += 1;
            if attempts > 100 {
                break None;
            }
            let candidate = [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                slab_top + radius,
            ];
            let clear = placed.iter().all(|(other, r)| {
                let d = [
                    candidate[0] - other[0],
                    candidate[1] - other[1],
                    candidate[2] - other[2],
                ];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() > radius + r + 0.02
            });
            if clear {
                break Some(candidate);
            }
        };
        let Some(position) = position else { break };
        placed.push((position, radius));
        shape = ShapeSpec::union(shape, offset_shape(obj, position));
    }
    shape
}

fn offset_shape(shape: ShapeSpec, offset: Vec3) -> ShapeSpec {
    ShapeSpec::Posed {
        rotation: super::shapes::IDENTITY,
        translation: offset,
        shape: Box::new(shape),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_recipe() -> DatasetRecipe {
        DatasetRecipe {
            primitives: FamilyCounts::new(2, 1, 1),
            objects: FamilyCounts::new(3, 1, 1),
            rooms: FamilyCounts::new(1, 0, 1),
            n_surface: 128,
            n_surface_rooms: 256,
            q_queries: 64,
            noise_sigma: 0.05,
            seed: 9,
        }
    }

    #[test]
    fn generation_counts_and_manifest_agree() {
        let dir = tempfile::tempdir().unwrap();
        let n = generate_dataset(&small_recipe(), dir.path()).unwrap();
        assert_eq!(n, 11);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 11);
        assert_eq!(ds.split_indices(Split::Train).len(), 6);
        assert_eq!(ds.split_indices(Split::Val).len(), 2);
        assert_eq!(ds.split_indices(Split::Test).len(), 3);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_dataset(&small_recipe(), dir_a.path()).unwrap();
        generate_dataset(&small_recipe(), dir_b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between regenerations");
        }
    }

    #[test]
    fn generated_labels_verify_against_oracle() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&small_recipe(), dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for record in &ds.samples {
            assert!(verify_labels(record));
        }
    }

    #[test]
    fn room_objects_do_not_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let room = random_room(&mut rng);
            // Collect the placed objects (everything except the slab).
            let mut parts = Vec::new();
            fn collect(shape: &ShapeSpec, parts: &mut Vec<ShapeSpec>) {
                if let ShapeSpec::Union(a, b) = shape {
                    collect(a, parts);
                    parts.push((**b).clone());
                } else {
                    parts.push(shape.clone());
                }
            }
            collect(&room, &mut parts);
            let objects = &parts[1..];
            let mut probe = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..20_000 {
                let p = [
                    probe.gen_range(-0.5..0.5),
                    probe.gen_range(-0.5..0.5),
                    probe.gen_range(-0.5..0.5),
                ];
                let inside = objects.iter().filter(|o| occupancy_at(o, p)).count();
                assert!(inside <= 1, "point {p:?} inside {inside} objects");
            }
        }
    }

    #[test]
    fn object_shapes_fit_the_rotation_safe_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let shape = random_object(&mut rng);
            assert!(bounding_radius(&shape) <= MAX_SHAPE_RADIUS + 1e-12);
        }
    }
}
