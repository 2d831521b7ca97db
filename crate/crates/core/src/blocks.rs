//! Downsampling, upsampling and the per-point MLP baseline.
//!
//! All samplers pick `ceil(N / ratio)` centers by farthest point sampling
//! (seeded at [`canonical_seed`](crate::cloud::canonical_seed)) and group
//! `k` neighbors per center from the full input cloud.

use crate::cloud::{canonical_seed_raw, dist2, fps_raw, knn_subset, NeighborIndex};
use crate::encoding::{hierarchical_features, PositionEncodingParams};
use crate::error::{contract_err, dim_err, param_err, Result};
use crate::nn::{gather_neighbors, Linear, Mlp, ParamStore, Session};
use crate::tensor::{Rng, Tensor, Var};

/// Centers, their positions and their neighborhoods in the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleGeometry {
    pub picks: Vec<usize>,
    pub positions: Tensor,
    pub nbr: NeighborIndex,
}

pub fn downsample_geometry(positions: &Tensor, ratio: usize, k: usize) -> Result<DownsampleGeometry> {
    if ratio == 0 {
        return param_err("downsample ratio must be at least 1");
    }
    if k == 0 {
        return param_err("neighbor count must be at least 1");
    }
    let n = positions.shape()[0];
    if k > n {
        return param_err(format!("k = {k} exceeds the {n} points"));
    }
    let m = n.div_ceil(ratio);
    let pts = positions.data();
    let picks = fps_raw(pts, m, canonical_seed_raw(pts))?;
    let nbr = knn_subset(positions, &picks, k, true)?;
    let sel = picks.iter().flat_map(|&i| positions.row(i).to_vec()).collect();
    Ok(DownsampleGeometry {
        positions: Tensor::from_parts(vec![m, 3], sel),
        picks,
        nbr,
    })
}

fn check_features(features: &Var<'_>, n: usize, c: usize) -> Result<()> {
    let s = features.shape();
    if s != [n, c] {
        return contract_err(format!("features {s:?}, expected [{n}, {c}]"));
    }
    Ok(())
}

/// Shape-aware downsampling: `max_j MLP(f_ij + H_ij)`.
#[derive(Debug, Clone)]
pub struct SadsParams {
    /// Width `C_in`, so `H` adds onto the input features.
    pub pos_params: PositionEncodingParams,
    /// `C_in -> C_out -> C_out`.
    pub mlp: Mlp,
    pub k: usize,
    pub ratio: usize,
}

impl SadsParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::with_encoding(store, name, c_in, c_out, k, ratio, rng, |store, name, c, rng| {
            PositionEncodingParams::fpe(store, name, c, rng)
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_encoding(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        ratio: usize,
        rng: &mut Rng,
        encoding: impl FnOnce(&mut ParamStore, &str, usize, &mut Rng) -> PositionEncodingParams,
    ) -> Result<Self> {
        if ratio == 0 || k == 0 {
            return param_err(format!("ratio ({ratio}) and k ({k}) must be at least 1"));
        }
        Ok(Self {
            pos_params: encoding(store, &format!("{name}.pos"), c_in, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[c_in, c_out, c_out], rng),
            k,
            ratio,
        })
    }

    pub fn c_in(&self) -> usize {
        self.mlp.in_dim()
    }
}

pub fn sads_forward<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    geom: &DownsampleGeometry,
    params: &SadsParams,
) -> Result<Var<'t>> {
    check_features(&features, positions.shape()[0], params.c_in())?;
    let f = gather_neighbors(features, &geom.nbr)?;
    let h = hierarchical_features(s, positions, &geom.picks, &geom.nbr, &params.pos_params)?;
    params.mlp.forward(s, f.add(h)?)?.max(1)
}

pub fn sads_downsample<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    params: &SadsParams,
) -> Result<(Tensor, Var<'t>)> {
    let geom = downsample_geometry(positions, params.ratio, params.k)?;
    let out = sads_forward(s, features, positions, &geom, params)?;
    Ok((geom.positions, out))
}

/// Max-pooled raw neighbor features.
pub fn gds_forward<'t>(features: Var<'t>, geom: &DownsampleGeometry) -> Result<Var<'t>> {
    gather_neighbors(features, &geom.nbr)?.max(1)
}

pub fn gds_downsample<'t>(features: Var<'t>, positions: &Tensor, ratio: usize, k: usize) -> Result<(Tensor, Var<'t>)> {
    let geom = downsample_geometry(positions, ratio, k)?;
    let out = gds_forward(features, &geom)?;
    Ok((geom.positions, out))
}

/// Transition downsampling: pointwise linear, optional normalization,
/// rectifier, then grouped max.
#[derive(Debug, Clone)]
pub struct TdsParams {
    pub linear: Linear,
    pub normalize: bool,
    pub k: usize,
    pub ratio: usize,
}

impl TdsParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if ratio == 0 || k == 0 {
            return param_err(format!("ratio ({ratio}) and k ({k}) must be at least 1"));
        }
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), c_in, c_out, rng),
            normalize: true,
            k,
            ratio,
        })
    }
}

pub fn tds_forward<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    geom: &DownsampleGeometry,
    params: &TdsParams,
) -> Result<Var<'t>> {
    let mut h = params.linear.forward(s, features)?;
    if params.normalize {
        h = h.layer_norm(1e-5)?;
    }
    gather_neighbors(h.relu(), &geom.nbr)?.max(1)
}

pub fn tds_downsample<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    params: &TdsParams,
) -> Result<(Tensor, Var<'t>)> {
    let geom = downsample_geometry(positions, params.ratio, params.k)?;
    let out = tds_forward(s, features, &geom, params)?;
    Ok((geom.positions, out))
}

/// Inverse-distance interpolation stencil from a coarse to a fine cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleGeometry {
    /// `[N_fine * p]` coarse indices.
    pub idx: Vec<usize>,
    /// Normalized weights, same layout as `idx`.
    pub weights: Vec<f64>,
    pub p: usize,
    pub coarse: usize,
}

/// `w = 1 / (d + 1e-8)` over the `p` nearest coarse points, normalized.
/// A fine point that coincides with a coarse point copies it exactly.
pub fn upsample_geometry(coarse: &Tensor, fine: &Tensor, p: usize) -> Result<UpsampleGeometry> {
    let nc = coarse.shape()[0];
    if nc == 0 {
        return param_err("cannot interpolate from an empty cloud");
    }
    if p == 0 {
        return param_err("interpolation needs at least one neighbor");
    }
    let p = p.min(nc);
    let nbr = crate::cloud::knn_indices(coarse, fine, p)?;
    let mut weights = Vec::with_capacity(nbr.flat().len());
    for (i, q) in fine.data().chunks_exact(3).enumerate() {
        let row = nbr.row(i);
        let d: Vec<f64> = row.iter().map(|&j| dist2(q, coarse.row(j)).sqrt()).collect();
        if d[0] == 0.0 {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, p - 1));
            continue;
        }
        let w: Vec<f64> = d.iter().map(|d| 1.0 / (d + 1e-8)).collect();
        let total: f64 = w.iter().sum();
        weights.extend(w.iter().map(|w| w / total));
    }
    Ok(UpsampleGeometry {
        idx: nbr.flat().to_vec(),
        weights,
        p,
        coarse: nc,
    })
}

/// `out[i] = sum_t w[i, t] * coarse[idx[i, t]]`.
pub fn interpolate<'t>(coarse_features: Var<'t>, geom: &UpsampleGeometry) -> Result<Var<'t>> {
    let x = coarse_features.value();
    let s = x.shape();
    if s.len() != 2 || s[0] != geom.coarse {
        return dim_err(format!("coarse features {s:?} do not match {} coarse points", geom.coarse));
    }
    let c = s[1];
    let p = geom.p;
    let n = geom.idx.len() / p;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let dst = &mut out[i * c..(i + 1) * c];
        for t in 0..p {
            let (j, w) = (geom.idx[i * p + t], geom.weights[i * p + t]);
            dst.iter_mut().zip(x.row(j)).for_each(|(d, v)| *d += w * v);
        }
    }
    let out = Tensor::from_parts(vec![n, c], out);
    let idx = geom.idx.clone();
    let weights = geom.weights.clone();
    let nc = geom.coarse;
    Ok(coarse_features.tape().custom(&[coarse_features], out, move |g, _| {
        let mut gx = vec![0.0; nc * c];
        for i in 0..n {
            let gr = &g[i * c..(i + 1) * c];
            for t in 0..p {
                let (j, w) = (idx[i * p + t], weights[i * p + t]);
                gx[j * c..(j + 1) * c].iter_mut().zip(gr).for_each(|(d, v)| *d += w * v);
            }
        }
        vec![Some(gx)]
    }))
}

pub fn upsample_interpolate<'t>(
    coarse_positions: &Tensor,
    coarse_features: Var<'t>,
    fine_positions: &Tensor,
    p: usize,
) -> Result<Var<'t>> {
    let geom = upsample_geometry(coarse_positions, fine_positions, p)?;
    interpolate(coarse_features, &geom)
}

/// `max_j MLP(f_ij)`.
pub fn mlp_baseline_layer<'t>(s: &Session<'t, '_>, features: Var<'t>, nbr: &NeighborIndex, mlp: &Mlp) -> Result<Var<'t>> {
    nbr.validate(features.shape()[0])?;
    mlp.forward(s, gather_neighbors(features, nbr)?)?.max(1)
}
