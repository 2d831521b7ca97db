use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{param_err, Result};
use crate::tensor::{Rng, Tensor};

/// Centers the cloud at the origin and scales the farthest point to radius 1.
/// A single point (or all-coincident cloud) maps to the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let n = cloud.len();
    let mut c = [0.0; 3];
    for i in 0..n {
        let p = cloud.point(i);
        (0..3).for_each(|a| c[a] += p[a]);
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    let mut data: Vec<f64> = cloud
        .positions()
        .data()
        .chunks(3)
        .flat_map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = data
        .chunks(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        data.iter_mut().for_each(|v| *v /= r);
    }
    cloud.clone().with_positions(Tensor::from_parts(vec![n, 3], data))
}

/// One concrete perturbation, applied as: permutation, scaling, translation,
/// then clipped Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(default)]
    pub permute: bool,
    #[serde(default)]
    pub translate: [f64; 3],
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub jitter_sigma: f64,
    #[serde(default = "default_clip")]
    pub jitter_clip: f64,
}

fn one() -> f64 {
    1.0
}

fn default_clip() -> f64 {
    0.05
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            permute: false,
            translate: [0.0; 3],
            scale: 1.0,
            jitter_sigma: 0.0,
            jitter_clip: default_clip(),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.permute && self.translate == [0.0; 3] && self.scale == 1.0 && self.jitter_sigma == 0.0
    }

    pub fn permutation() -> Self {
        Self {
            permute: true,
            ..Self::identity()
        }
    }
}

pub fn augment(cloud: &PointCloud, spec: &AugmentSpec, rng: &mut Rng) -> Result<PointCloud> {
    if !(spec.scale > 0.0) {
        return param_err(format!("scale must be positive, got {}", spec.scale));
    }
    if !(spec.jitter_sigma >= 0.0) || !(spec.jitter_clip >= 0.0) {
        return param_err("jitter sigma and clip must be non-negative");
    }
    let mut out = if spec.permute {
        cloud.select(&rng.permutation(cloud.len()))?
    } else {
        cloud.clone()
    };
    if spec.scale != 1.0 || spec.translate != [0.0; 3] || spec.jitter_sigma > 0.0 {
        let mut data = out.positions().data().to_vec();
        for p in data.chunks_mut(3) {
            for a in 0..3 {
                p[a] = p[a] * spec.scale + spec.translate[a];
            }
        }
        if spec.jitter_sigma > 0.0 {
            for v in &mut data {
                *v += (rng.normal() * spec.jitter_sigma).clamp(-spec.jitter_clip, spec.jitter_clip);
            }
        }
        let n = out.len();
        out = out.with_positions(Tensor::from_parts(vec![n, 3], data))?;
    }
    Ok(out)
}

/// Ranges from which a fresh [`AugmentSpec`] is drawn per training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomAugment {
    #[serde(default)]
    pub permute: bool,
    /// Each axis is shifted uniformly in `[-translate, translate]`.
    #[serde(default)]
    pub translate: f64,
    /// Uniform scale range `[lo, hi]`.
    #[serde(default = "unit_range")]
    pub scale: [f64; 2],
    #[serde(default)]
    pub jitter_sigma: f64,
    #[serde(default = "default_clip")]
    pub jitter_clip: f64,
}

fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}

impl Default for RandomAugment {
    fn default() -> Self {
        Self {
            permute: false,
            translate: 0.0,
            scale: unit_range(),
            jitter_sigma: 0.0,
            jitter_clip: default_clip(),
        }
    }
}

impl RandomAugment {
    pub fn is_identity(&self) -> bool {
        !self.permute && self.translate == 0.0 && self.scale == [1.0, 1.0] && self.jitter_sigma == 0.0
    }

    pub fn sample(&self, rng: &mut Rng) -> AugmentSpec {
        let translate = if self.translate > 0.0 {
            [0; 3].map(|_| rng.uniform(-self.translate, self.translate))
        } else {
            [0.0; 3]
        };
        let scale = if self.scale[0] == self.scale[1] {
            self.scale[0]
        } else {
            rng.uniform(self.scale[0], self.scale[1])
        };
        AugmentSpec {
            permute: self.permute,
            translate,
            scale,
            jitter_sigma: self.jitter_sigma,
            jitter_clip: self.jitter_clip,
        }
    }
}
