use std::collections::BTreeMap;

use super::PointCloud;
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// One output point per occupied voxel, at the centroid of its members.
///
/// Features are averaged, labels take the majority (lowest label on ties)
/// and normals are averaged then renormalized. Output follows voxel-key
/// order.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return param_err(format!("voxel size must be positive, got {voxel_size}"));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let key = p.map(|v| (v / voxel_size).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut pos = Vec::with_capacity(cells.len() * 3);
    let fdim = cloud.feature_dim();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut normals = Vec::new();
    for (key, members) in &cells {
        let inv = 1.0 / members.len() as f64;
        for a in 0..3 {
            let c = members.iter().map(|&i| cloud.point(i)[a]).sum::<f64>() * inv;
            let lo = key[a] as f64 * voxel_size;
            pos.push(c.clamp(lo, lo + voxel_size));
        }
        if let Some(f) = cloud.features() {
            for c in 0..fdim {
                feats.push(members.iter().map(|&i| f.row(i)[c]).sum::<f64>() * inv);
            }
        }
        if let Some(l) = cloud.labels() {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in members {
                *votes.entry(l[i]).or_default() += 1;
            }
            let top = votes.values().copied().max().unwrap_or(0);
            labels.push(*votes.iter().find(|(_, &v)| v == top).unwrap().0);
        }
        if let Some(nm) = cloud.normals() {
            let mut s = [0.0; 3];
            for &i in members {
                (0..3).for_each(|a| s[a] += nm.row(i)[a]);
            }
            let len = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len > 1e-9 {
                normals.extend(s.map(|v| v / len));
            } else {
                normals.extend_from_slice(nm.row(members[0]));
            }
        }
    }
    let m = cells.len();
    let mut out = PointCloud::new(Tensor::from_parts(vec![m, 3], pos))?;
    if cloud.features().is_some() {
        out = out.with_features(Tensor::from_parts(vec![m, fdim], feats))?;
    }
    if cloud.labels().is_some() {
        out = out.with_labels(labels)?;
    }
    if cloud.normals().is_some() {
        out = out.with_normals(Tensor::from_parts(vec![m, 3], normals))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_voxel_one_centroid() {
        let c = PointCloud::from_points(&[[0.01, 0.01, 0.01], [0.03, 0.01, 0.02]]).unwrap();
        let d = voxel_downsample(&c, 0.04).unwrap();
        assert_eq!(d.len(), 1);
        let p = d.point(0);
        assert!((p[0] - 0.02).abs() < 1e-15 && (p[2] - 0.015).abs() < 1e-15);
    }

    #[test]
    fn floor_bucketing() {
        // 0.01/0.04 -> cell 0, 0.09/0.04 = 2.25 -> cell 2
        let c = PointCloud::from_points(&[[0.01, 0.0, 0.0], [0.09, 0.0, 0.0]]).unwrap();
        assert_eq!(voxel_downsample(&c, 0.04).unwrap().len(), 2);
    }

    #[test]
    fn huge_voxel() {
        let c = PointCloud::from_points(&[[0.1, 0.2, 0.3], [0.5, 0.1, 0.9], [0.7, 0.7, 0.7]]).unwrap();
        assert_eq!(voxel_downsample(&c, 10.0).unwrap().len(), 1);
    }

    #[test]
    fn label_vote_ties_to_lowest() {
        let c = PointCloud::from_points(&[[0.0; 3], [0.01, 0.0, 0.0], [0.02, 0.0, 0.0], [0.03, 0.0, 0.0]])
            .unwrap()
            .with_labels(vec![5, 2, 5, 2])
            .unwrap();
        assert_eq!(voxel_downsample(&c, 1.0).unwrap().labels().unwrap(), &[2]);
    }

    #[test]
    fn bad_size() {
        let c = PointCloud::from_points(&[[0.0; 3]]).unwrap();
        assert!(voxel_downsample(&c, 0.0).is_err());
        assert!(voxel_downsample(&c, -1.0).is_err());
    }
}
