//! Synthetic datasets with analytic ground truth.
//!
//! * `shapes-cls`: one parametric surface per cloud (sphere, cube, torus,
//!   plane), randomly turned about the vertical axis, stretched per axis in
//!   `[0.85, 1.15]`, jittered and normalized to the unit sphere.
//! * `scene-seg`: 2 to 5 such shapes in distinct cells of a 3 x 2 grid,
//!   per-point labels are the shape class.
//! * `sphere-normals`: uniform samples of the unit sphere; the normal of a
//!   point is its position.

use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::cloud::{normalize_unit_sphere, read_cloud, write_cloud, PointCloud};
use crate::error::{validation_err, Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ShapesCls,
    SceneSeg,
    SphereNormals,
}

impl std::str::FromStr for DatasetKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes-cls" => Ok(Self::ShapesCls),
            "scene-seg" => Ok(Self::SceneSeg),
            "sphere-normals" => Ok(Self::SphereNormals),
            other => validation_err("kind", format!("unknown dataset kind `{other}`")),
        }
    }
}

pub const SHAPE_CLASSES: [&str; 4] = ["sphere", "cube", "torus", "plane"];

fn default_points() -> usize {
    1024
}

fn default_noise() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_points")]
    pub points_per_cloud: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Gaussian jitter added to shape samples; unused for sphere normals.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn new(kind: DatasetKind, train_count: usize, test_count: usize, seed: u64) -> Self {
        Self {
            kind,
            points_per_cloud: default_points(),
            train_count,
            test_count,
            noise: default_noise(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_count < 1 {
            return validation_err("train_count", "must be at least 1");
        }
        if self.test_count < 1 {
            return validation_err("test_count", "must be at least 1");
        }
        if self.points_per_cloud < 8 {
            return validation_err("points_per_cloud", "must be at least 8");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return validation_err("noise", "must be non-negative");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::SphereNormals => 0,
            _ => SHAPE_CLASSES.len(),
        }
    }
}

/// A cloud and, for classification, its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn gen_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let make = |split: u64, count: usize| -> Result<Vec<Sample>> {
        let mut rng = root.fork(split);
        (0..count).map(|i| gen_sample(spec, i, &mut rng)).collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make(1, spec.train_count)?,
        test: make(2, spec.test_count)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticDatasetSpec,
    classes: Vec<String>,
    train: Vec<ManifestEntry>,
    test: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "dataset.json";

/// Writes `dataset.json` plus one ASCII cloud file per sample under `dir`.
pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let entries = |split: &str, samples: &[Sample]| -> Result<Vec<ManifestEntry>> {
        std::fs::create_dir_all(dir.join(split))?;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = format!("{split}/{i:05}.xyz");
                write_cloud(&s.cloud, dir.join(&file))?;
                Ok(ManifestEntry { file, class: s.class })
            })
            .collect()
    };
    let manifest = Manifest {
        spec: data.spec.clone(),
        classes: match data.spec.kind {
            DatasetKind::SphereNormals => Vec::new(),
            _ => SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        },
        train: entries("train", &data.train)?,
        test: entries("test", &data.test)?,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{MANIFEST}: {e}")))?;
    let load = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    cloud: read_cloud(dir.join(&e.file))?,
                    class: e.class,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
        spec: manifest.spec,
    })
}

fn gen_sample(spec: &SyntheticDatasetSpec, index: usize, rng: &mut Rng) -> Result<Sample> {
    let n = spec.points_per_cloud;
    match spec.kind {
        DatasetKind::ShapesCls => {
            // balanced classes, order shuffled by the split stream
            let class = (index + rng.below(SHAPE_CLASSES.len())) % SHAPE_CLASSES.len();
            let pts = posed_shape(class, n, spec.noise, rng);
            let cloud = normalize_unit_sphere(&PointCloud::new(Tensor::from_parts(vec![n, 3], pts))?)?;
            Ok(Sample { cloud, class: Some(class) })
        }
        DatasetKind::SceneSeg => {
            let count = 2 + rng.below(4);
            let mut cells = rng.permutation(6);
            cells.truncate(count);
            let mut pts = Vec::with_capacity(n * 3);
            let mut labels = Vec::with_capacity(n);
            for (s, &cell) in cells.iter().enumerate() {
                let share = n / count + usize::from(s < n % count);
                let class = rng.below(SHAPE_CLASSES.len());
                let center = [(cell % 3) as f64 * 1.2 - 1.2, (cell / 3) as f64 * 1.2 - 0.6, 0.0];
                let shape = posed_shape(class, share, spec.noise, rng);
                for p in shape.chunks_exact(3) {
                    pts.extend((0..3).map(|a| center[a] + 0.45 * p[a]));
                }
                labels.extend(std::iter::repeat_n(class, share));
            }
            let cloud = PointCloud::new(Tensor::from_parts(vec![n, 3], pts))?.with_labels(labels)?;
            Ok(Sample {
                cloud: normalize_unit_sphere(&cloud)?,
                class: None,
            })
        }
        DatasetKind::SphereNormals => {
            let pts: Vec<f64> = (0..n).flat_map(|_| sphere_point(rng)).collect();
            let t = Tensor::from_parts(vec![n, 3], pts);
            let cloud = PointCloud::new(t.clone())?.with_normals(t)?;
            Ok(Sample { cloud, class: None })
        }
    }
}

fn sphere_point(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.map(|x| x / len);
        }
    }
}

/// Surface samples of one class, posed and jittered, roughly unit sized.
fn posed_shape(class: usize, n: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let stretch = [0; 3].map(|_| rng.uniform(0.85, 1.15));
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let p = surface_point(class, rng);
        let p = [p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]];
        let r = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
        out.extend(r.map(|v| v + noise * rng.normal()));
    }
    out
}

fn surface_point(class: usize, rng: &mut Rng) -> [f64; 3] {
    match class {
        0 => sphere_point(rng),
        1 => {
            let face = rng.below(6);
            let (u, v) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let w = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [w, u, v],
                1 => [u, w, v],
                _ => [u, v, w],
            }
        }
        2 => {
            // area-uniform by rejection on the tube angle
            const R: f64 = 0.8;
            const T: f64 = 0.3;
            loop {
                let u = rng.uniform(0.0, std::f64::consts::TAU);
                let v = rng.uniform(0.0, std::f64::consts::TAU);
                if rng.next_f64() * (R + T) <= R + T * v.cos() {
                    let ring = R + T * v.cos();
                    return [ring * u.cos(), ring * u.sin(), T * v.sin()];
                }
            }
        }
        _ => [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [DatasetKind::ShapesCls, DatasetKind::SceneSeg, DatasetKind::SphereNormals] {
            let spec = SyntheticDatasetSpec {
                points_per_cloud: 20,
                ..SyntheticDatasetSpec::new(kind, 3, 2, 4)
            };
            let d = gen_dataset(&spec).unwrap();
            let sub = dir.path().join(format!("{kind:?}"));
            save_dataset(&d, &sub).unwrap();
            assert_eq!(load_dataset(&sub).unwrap(), d);
        }
        assert!(load_dataset(dir.path().join("missing")).is_err());
    }

    #[test]
    fn sphere_normals_are_positions() {
        let spec = SyntheticDatasetSpec {
            points_per_cloud: 64,
            ..SyntheticDatasetSpec::new(DatasetKind::SphereNormals, 2, 1, 3)
        };
        let d = gen_dataset(&spec).unwrap();
        for s in d.train.iter().chain(&d.test) {
            let n = s.cloud.normals().unwrap();
            assert!(n.max_abs_diff(s.cloud.positions()) <= 1e-12);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticDatasetSpec {
            points_per_cloud: 32,
            ..SyntheticDatasetSpec::new(DatasetKind::ShapesCls, 8, 4, 11)
        };
        assert_eq!(gen_dataset(&spec).unwrap(), gen_dataset(&spec).unwrap());
        let other = SyntheticDatasetSpec { seed: 12, ..spec.clone() };
        assert_ne!(gen_dataset(&spec).unwrap(), gen_dataset(&other).unwrap());
    }

    #[test]
    fn classes_are_balanced_and_normalized() {
        let spec = SyntheticDatasetSpec {
            points_per_cloud: 64,
            ..SyntheticDatasetSpec::new(DatasetKind::ShapesCls, 40, 4, 1)
        };
        let d = gen_dataset(&spec).unwrap();
        let mut hist = [0; 4];
        for s in &d.train {
            hist[s.class.unwrap()] += 1;
            let r = s.cloud.positions().data().chunks(3).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!(hist.iter().all(|&h| h >= 5), "{hist:?}");
    }

    #[test]
    fn scene_labels_come_from_placed_shapes() {
        let spec = SyntheticDatasetSpec {
            points_per_cloud: 100,
            ..SyntheticDatasetSpec::new(DatasetKind::SceneSeg, 6, 1, 5)
        };
        for s in gen_dataset(&spec).unwrap().train {
            let labels = s.cloud.labels().unwrap();
            assert_eq!(labels.len(), 100);
            assert!(labels.iter().all(|&l| l < 4));
            let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
            assert!(!distinct.is_empty() && distinct.len() <= 5);
        }
    }

    #[test]
    fn bad_specs() {
        assert!("cubes".parse::<DatasetKind>().is_err());
        let spec = SyntheticDatasetSpec::new(DatasetKind::ShapesCls, 0, 1, 0);
        assert!(gen_dataset(&spec).is_err());
    }
}
