use super::{dist2, PointCloud};
use crate::error::{param_err, Result};

/// Greedy farthest point sampling.
///
/// The first pick is `seed_index`; every later pick maximizes the distance
/// to the nearest already-picked point, ties going to the lowest index.
/// Returns indices in pick order.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    fps_raw(cloud.positions().data(), m, seed_index)
}

pub(crate) fn fps_raw(pts: &[f64], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = pts.len() / 3;
    if m == 0 || m > n {
        return param_err(format!("cannot sample {m} of {n} points"));
    }
    if seed_index >= n {
        return param_err(format!("seed index {seed_index} out of range for {n} points"));
    }
    let mut picks = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = seed_index;
    for _ in 0..m {
        picks.push(cur);
        taken[cur] = true;
        let c = &pts[cur * 3..cur * 3 + 3];
        let mut best = -1.0;
        let mut best_i = usize::MAX;
        for (j, p) in pts.chunks_exact(3).enumerate() {
            let d = dist2(c, p);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if !taken[j] && min_d[j] > best {
                best = min_d[j];
                best_i = j;
            }
        }
        cur = best_i;
    }
    Ok(picks)
}

/// Seed index that does not depend on point order: the point farthest from
/// the centroid, ties broken by lexicographically largest coordinates.
pub fn canonical_seed(cloud: &PointCloud) -> usize {
    canonical_seed_raw(cloud.positions().data())
}

pub(crate) fn canonical_seed_raw(pts: &[f64]) -> usize {
    let n = (pts.len() / 3).max(1);
    let mut c = [0.0; 3];
    for p in pts.chunks_exact(3) {
        (0..3).for_each(|a| c[a] += p[a]);
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    let mut best = 0;
    let mut best_key = (f64::NEG_INFINITY, [f64::NEG_INFINITY; 3]);
    for (j, p) in pts.chunks_exact(3).enumerate() {
        let key = (dist2(p, &c), [p[0], p[1], p[2]]);
        let better = key.0 > best_key.0
            || (key.0 == best_key.0 && key.1.iter().zip(&best_key.1).find(|(a, b)| a != b).is_some_and(|(a, b)| a > b));
        if better {
            best = j;
            best_key = key;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    #[test]
    fn single_pick_is_seed() {
        let c = PointCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(farthest_point_sample(&c, 1, 2).unwrap(), vec![2]);
    }

    #[test]
    fn picks_far_corner() {
        let c = PointCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 0.0, 0.0]]).unwrap();
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn full_sample_is_permutation() {
        let mut rng = Rng::new(2);
        let c = PointCloud::new(Tensor::uniform(&[30, 3], 1.0, &mut rng)).unwrap();
        let mut p = farthest_point_sample(&c, 30, 5).unwrap();
        p.sort_unstable();
        assert_eq!(p, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn too_many() {
        let c = PointCloud::from_points(&[[0.0; 3]]).unwrap();
        assert!(farthest_point_sample(&c, 2, 0).is_err());
    }

    #[test]
    fn canonical_seed_ignores_order() {
        let mut rng = Rng::new(6);
        let t = Tensor::uniform(&[40, 3], 1.0, &mut rng);
        let c = PointCloud::new(t.clone()).unwrap();
        let s = canonical_seed(&c);
        let perm = rng.permutation(40);
        let pc = c.select(&perm).unwrap();
        assert_eq!(pc.point(canonical_seed(&pc)), c.point(s));
    }
}
