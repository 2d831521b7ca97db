use super::dist2;
use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Tensor;

/// For each of `M` queries, the indices of its `K` neighbors, nearest first.
///
/// Rows are sorted by ascending distance with ties broken by ascending
/// index. When built with self-inclusion the query's own index leads its row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    queries: usize,
    k: usize,
}

impl NeighborIndex {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return dim_err("neighbor rows must share one length");
        }
        Ok(Self {
            queries: rows.len(),
            k,
            indices: rows.concat(),
        })
    }

    pub fn from_flat(indices: Vec<usize>, queries: usize, k: usize) -> Result<Self> {
        if indices.len() != queries * k {
            return dim_err(format!("{} indices cannot form {queries}x{k}", indices.len()));
        }
        Ok(Self { indices, queries, k })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// Checks that every index addresses one of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= n) {
            Some(&bad) => Err(Error::Contract(format!("neighbor index {bad} out of range for {n} points"))),
            None => Ok(()),
        }
    }

    /// Relabels both queries and neighbors after the points were permuted so
    /// that new point `p` is old point `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut indices = Vec::with_capacity(self.indices.len());
        for &old_q in perm {
            indices.extend(self.row(old_q).iter().map(|&j| inv[j]));
        }
        Self {
            indices,
            queries: self.queries,
            k: self.k,
        }
    }
}

fn check_points(t: &Tensor, what: &str) -> Result<usize> {
    let s = t.shape();
    if s.len() != 2 || s[1] != 3 {
        return dim_err(format!("{what} must be [N, 3], got {s:?}"));
    }
    if !t.all_finite() {
        return Err(Error::Numeric(format!("{what} contain non-finite values")));
    }
    Ok(s[0])
}

/// Indices of the `k` points nearest to `q` in distance-then-index order.
/// `skip` is excluded and `lead`, when given, is placed first.
fn nearest(
    pts: &[f64],
    q: &[f64],
    k: usize,
    lead: Option<usize>,
    skip: Option<usize>,
    buf: &mut Vec<(f64, usize)>,
    out: &mut Vec<usize>,
) {
    buf.clear();
    for (j, p) in pts.chunks_exact(3).enumerate() {
        if Some(j) == skip || Some(j) == lead {
            continue;
        }
        buf.push((dist2(q, p), j));
    }
    let want = k - usize::from(lead.is_some());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if want > 0 && want < buf.len() {
        buf.select_nth_unstable_by(want - 1, cmp);
    }
    buf.truncate(want);
    buf.sort_unstable_by(cmp);
    out.extend(lead);
    out.extend(buf.iter().map(|&(_, j)| j));
}

/// Plain k-nearest-neighbor search of `queries` against `points`.
pub fn knn_indices(points: &Tensor, queries: &Tensor, k: usize) -> Result<NeighborIndex> {
    let n = check_points(points, "points")?;
    let m = check_points(queries, "queries")?;
    if k > n {
        return param_err(format!("k = {k} exceeds the {n} available points"));
    }
    let mut buf = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(m * k);
    for q in queries.data().chunks_exact(3) {
        nearest(points.data(), q, k, None, None, &mut buf, &mut indices);
    }
    NeighborIndex::from_flat(indices, m, k)
}

/// k-nearest neighbors of arbitrary query positions against a cloud.
///
/// With `include_self`, a cloud point coincident with the query (the lowest
/// such index) leads the row; without it, coincident points are skipped.
pub fn knn(cloud: &super::PointCloud, queries: &Tensor, k: usize, include_self: bool) -> Result<NeighborIndex> {
    let n = cloud.len();
    let m = check_points(queries, "queries")?;
    let avail = if include_self { n } else { n.saturating_sub(1) };
    if k > avail {
        return param_err(format!("k = {k} exceeds the {avail} available points"));
    }
    let pts = cloud.positions().data();
    let mut buf = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(m * k);
    for q in queries.data().chunks_exact(3) {
        let twin = pts.chunks_exact(3).position(|p| dist2(q, p) == 0.0);
        if include_self {
            nearest(pts, q, k, twin, None, &mut buf, &mut indices);
        } else {
            nearest(pts, q, k, None, twin, &mut buf, &mut indices);
        }
    }
    NeighborIndex::from_flat(indices, m, k)
}

/// Neighborhoods of every cloud point among the cloud itself.
pub fn knn_self(positions: &Tensor, k: usize, include_self: bool) -> Result<NeighborIndex> {
    let n = check_points(positions, "positions")?;
    let centers: Vec<usize> = (0..n).collect();
    knn_subset(positions, &centers, k, include_self)
}

/// Neighborhoods of the points `centers` (indices into `positions`) among
/// all of `positions`. Self-inclusion puts the center's own index first.
pub fn knn_subset(positions: &Tensor, centers: &[usize], k: usize, include_self: bool) -> Result<NeighborIndex> {
    let n = check_points(positions, "positions")?;
    let avail = if include_self { n } else { n.saturating_sub(1) };
    if k > avail {
        return param_err(format!("k = {k} exceeds the {avail} available points"));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::Contract(format!("center {bad} out of range for {n} points")));
    }
    let pts = positions.data();
    let mut buf = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(centers.len() * k);
    for &c in centers {
        let q = &pts[c * 3..c * 3 + 3];
        if include_self {
            nearest(pts, q, k, Some(c), None, &mut buf, &mut indices);
        } else {
            nearest(pts, q, k, None, Some(c), &mut buf, &mut indices);
        }
    }
    NeighborIndex::from_flat(indices, centers.len(), k)
}
