#![allow(dead_code)]

use fullpoint_core::Tensor;

pub fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn brute_knn(pts: &[f64], k: usize) -> Vec<Vec<usize>> {
    let n = pts.len() / 3;
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (d2(&pts[i * 3..i * 3 + 3], &pts[j * 3..j * 3 + 3]), j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            std::iter::once(i).chain(others.into_iter().take(k - 1).map(|(_, j)| j)).collect()
        })
        .collect()
}

pub fn brute_fps(pts: &[f64], m: usize, seed: usize) -> Vec<usize> {
    let n = pts.len() / 3;
    let mut picks = vec![seed];
    while picks.len() < m {
        let score = |j: usize| {
            picks
                .iter()
                .map(|&p| d2(&pts[j * 3..j * 3 + 3], &pts[p * 3..p * 3 + 3]))
                .fold(f64::INFINITY, f64::min)
        };
        let mut best = None::<(f64, usize)>;
        for j in (0..n).filter(|j| !picks.contains(j)) {
            let s = score(j);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        picks.push(best.unwrap().1);
    }
    picks
}

/// Max absolute difference over the largest magnitude of `b`.
pub fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
