//! Parameter-free geometric correlations and the learnable position encodings.
//!
//! * [`relation`] / [`global_correlation`]: per-point sum of the linear
//!   relation `max(0, 1 - d / sigma)` to every point of the cloud.
//! * [`local_correlation`]: the 8-channel neighbor descriptor
//!   `[p_ij, p_ij - p_i, |p_ij - p_i|, s_i - s_ij]`.
//! * [`full_position_encoding`] / [`hierarchical_features`]: the two-stage
//!   encoding `phi_local(g_i - g_ij)` with `g = [phi_global(p), p]`, and the
//!   LPE / GPE / sinusoidal variants used for ablations.

use serde::{Deserialize, Serialize};

use crate::cloud::NeighborIndex;
use crate::error::{contract_err, dim_err, param_err, Result};
use crate::nn::{Mlp, ParamStore, Session};
use crate::tensor::{Rng, Tensor, Var};

/// Above this many points the global sum uses an evenly strided subsample.
pub const DEFAULT_MAX_GLOBAL_POINTS: usize = 4096;

/// Linear relation `max(0, 1 - |p - q| / sigma)`.
pub fn relation(p: [f64; 3], q: [f64; 3], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return param_err(format!("influence coefficient must be positive, got {sigma}"));
    }
    Ok(relation_unchecked(&p, &q, sigma))
}

#[inline]
fn relation_unchecked(p: &[f64], q: &[f64], sigma: f64) -> f64 {
    let d = crate::cloud::dist2(p, q).sqrt();
    (1.0 - d / sigma).max(0.0)
}

/// Global correlation field of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCorrelation {
    /// `[N, 1]`.
    pub values: Tensor,
    pub sigma: f64,
}

impl GlobalCorrelation {
    pub fn value(&self, i: usize) -> f64 {
        self.values.data()[i]
    }
}

/// `value(i) = sum_n relation(p_i, p_n)` over all points, self included.
pub fn global_correlation(positions: &Tensor, sigma: f64) -> Result<GlobalCorrelation> {
    global_correlation_with(positions, sigma, DEFAULT_MAX_GLOBAL_POINTS)
}

/// As [`global_correlation`]; for `N > max_global_points` the sum runs over
/// `max_global_points` evenly strided points and is rescaled by `N / m`.
pub fn global_correlation_with(positions: &Tensor, sigma: f64, max_global_points: usize) -> Result<GlobalCorrelation> {
    if !(sigma > 0.0) {
        return param_err(format!("influence coefficient must be positive, got {sigma}"));
    }
    let s = positions.shape();
    if s.len() != 2 || s[1] != 3 {
        return dim_err(format!("positions must be [N, 3], got {s:?}"));
    }
    let n = s[0];
    let pts = positions.data();
    let globals: Vec<usize> = if n > max_global_points && max_global_points > 0 {
        (0..max_global_points).map(|i| i * n / max_global_points).collect()
    } else {
        (0..n).collect()
    };
    let scale = n as f64 / globals.len().max(1) as f64;
    let inv_sigma = 1.0 / sigma;
    let values = (0..n)
        .map(|i| {
            let p = &pts[i * 3..i * 3 + 3];
            let sum: f64 = globals
                .iter()
                .map(|&g| {
                    let d = crate::cloud::dist2(p, &pts[g * 3..g * 3 + 3]).sqrt();
                    (1.0 - d * inv_sigma).max(0.0)
                })
                .sum();
            sum * scale
        })
        .collect();
    Ok(GlobalCorrelation {
        values: Tensor::from_parts(vec![n, 1], values),
        sigma,
    })
}

/// `[N, K, 8]` neighbor descriptors for self-neighborhoods (query `i` is point `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCorrelation {
    pub values: Tensor,
}

pub const LOCAL_CHANNELS: usize = 8;

pub fn local_correlation(positions: &Tensor, nbr: &NeighborIndex, s1: &GlobalCorrelation) -> Result<LocalCorrelation> {
    let n = positions.shape()[0];
    if nbr.queries() != n {
        return contract_err(format!(
            "neighbor index has {} queries for {n} points",
            nbr.queries()
        ));
    }
    if s1.values.len() != n {
        return contract_err(format!("global correlation has {} values for {n} points", s1.values.len()));
    }
    nbr.validate(n)?;
    let k = nbr.k();
    let pts = positions.data();
    let sv = s1.values.data();
    let mut out = Vec::with_capacity(n * k * LOCAL_CHANNELS);
    for i in 0..n {
        let pi = &pts[i * 3..i * 3 + 3];
        for &j in nbr.row(i) {
            let pj = &pts[j * 3..j * 3 + 3];
            let d = [pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]];
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            out.extend_from_slice(pj);
            out.extend_from_slice(&d);
            out.push(dist);
            out.push(sv[i] - sv[j]);
        }
    }
    Ok(LocalCorrelation {
        values: Tensor::from_parts(vec![n, k, LOCAL_CHANNELS], out),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionVariant {
    /// Full: global embedding then local difference.
    Fpe,
    /// Local only: relative coordinates.
    Lpe,
    /// Global only: absolute embedding of the center, shared by its neighbors.
    Gpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    LearnableMlp,
    Sinusoidal,
}

/// Fixed sin/cos features of `[R, 3]` coordinates, width `c`.
///
/// Frequencies are `2^k * pi` for `k = 0 .. c/6 - 1`. For each axis and
/// frequency the pair `(sin, cos)` is emitted; the tail is zero padded.
pub fn sinusoidal_features(coords: &[f64], c: usize) -> Tensor {
    let rows = coords.len() / 3;
    let nf = c / 6;
    let mut out = vec![0.0; rows * c];
    for (r, p) in coords.chunks_exact(3).enumerate() {
        let row = &mut out[r * c..(r + 1) * c];
        let mut at = 0;
        for &x in p {
            for k in 0..nf {
                let w = (1u64 << k) as f64 * std::f64::consts::PI;
                row[at] = (w * x).sin();
                row[at + 1] = (w * x).cos();
                at += 2;
            }
        }
    }
    Tensor::from_parts(vec![rows, c], out)
}

/// Learnable (or fixed) position-encoding stages of one layer.
#[derive(Debug, Clone)]
pub struct PositionEncodingParams {
    pub variant: PositionVariant,
    pub encoder: EncoderKind,
    /// Output width `C`.
    pub channels: usize,
    /// `R^3 -> R^C`; absent when sinusoidal or unused by the variant.
    pub phi_global: Option<Mlp>,
    /// `R^{C+3} -> R^C`; absent when unused by the variant.
    pub phi_local: Option<Mlp>,
}

impl PositionEncodingParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        variant: PositionVariant,
        encoder: EncoderKind,
        rng: &mut Rng,
    ) -> Self {
        let c = channels;
        let learn = encoder == EncoderKind::LearnableMlp;
        let phi_global = match variant {
            PositionVariant::Fpe | PositionVariant::Gpe if learn => {
                Some(Mlp::new(store, &format!("{name}.phi_global"), &[3, c, c], rng))
            }
            _ => None,
        };
        let phi_local = match variant {
            PositionVariant::Fpe => Some(Mlp::new(store, &format!("{name}.phi_local"), &[c + 3, c, c], rng)),
            PositionVariant::Lpe if learn => Some(Mlp::new(store, &format!("{name}.phi_local"), &[c + 3, c, c], rng)),
            _ => None,
        };
        Self {
            variant,
            encoder,
            channels,
            phi_global,
            phi_local,
        }
    }

    /// Full encoding with learnable MLPs.
    pub fn fpe(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, channels, PositionVariant::Fpe, EncoderKind::LearnableMlp, rng)
    }

    /// Checks declared widths against the stored MLP shapes.
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if let Some(g) = &self.phi_global {
            if g.in_dim() != 3 || g.out_dim() != c {
                return dim_err(format!("phi_global is {}->{}, expected 3->{c}", g.in_dim(), g.out_dim()));
            }
        }
        if let Some(l) = &self.phi_local {
            if l.in_dim() != c + 3 || l.out_dim() != c {
                return dim_err(format!("phi_local is {}->{}, expected {}->{c}", l.in_dim(), l.out_dim(), c + 3));
            }
        }
        Ok(())
    }

    pub fn zero(&self, store: &mut ParamStore) {
        if let Some(g) = &self.phi_global {
            g.zero(store);
        }
        if let Some(l) = &self.phi_local {
            l.zero(store);
        }
    }

    /// `[N, 3] -> [N, C]` global embedding of absolute positions.
    fn global_embed<'t>(&self, s: &Session<'t, '_>, pos: Var<'t>, positions: &Tensor) -> Result<Var<'t>> {
        match (&self.phi_global, self.encoder) {
            (Some(mlp), _) => mlp.forward(s, pos),
            (None, EncoderKind::Sinusoidal) => Ok(s.tape().constant(sinusoidal_features(positions.data(), self.channels))),
            (None, EncoderKind::LearnableMlp) => contract_err("learnable encoder without phi_global"),
        }
    }
}

/// Position encoding of neighborhoods whose query `m` is point `centers[m]`
/// (or point `m` when `centers` is `None`). Returns `[M, K, C]`.
pub fn encode_neighborhoods<'t>(
    s: &Session<'t, '_>,
    positions: &Tensor,
    centers: Option<&[usize]>,
    nbr: &NeighborIndex,
    params: &PositionEncodingParams,
) -> Result<Var<'t>> {
    params.validate()?;
    let n = positions.shape()[0];
    nbr.validate(n)?;
    let m = nbr.queries();
    let k = nbr.k();
    let c = params.channels;
    let identity: Vec<usize>;
    let centers = match centers {
        Some(cs) => {
            if cs.len() != m {
                return contract_err(format!("{} centers for {m} neighbor rows", cs.len()));
            }
            if let Some(&bad) = cs.iter().find(|&&i| i >= n) {
                return contract_err(format!("center {bad} out of range for {n} points"));
            }
            cs
        }
        None => {
            if m != n {
                return contract_err(format!("{m} neighbor rows for {n} points and no centers"));
            }
            identity = (0..n).collect();
            &identity
        }
    };
    let tape = s.tape();
    let pos = tape.constant(positions.clone());
    match params.variant {
        PositionVariant::Fpe => {
            let mlp = params.phi_local.as_ref().expect("FPE has phi_local");
            let g = Var::concat(&[params.global_embed(s, pos, positions)?, pos], 1)?;
            // First local layer is linear, so W(g_i - g_ij) = W g_i - W g_ij.
            let first = &mlp.layers[0];
            let y = first.forward_no_bias(s, g)?;
            let yc = y.index_select(centers)?.expand(1, k)?;
            let yn = y.index_select(nbr.flat())?.reshape(&[m, k, first.out_dim])?;
            let h = yc.sub(yn)?.add_bias(s.param(first.bias))?;
            mlp.forward_from(s, h, 1)
        }
        PositionVariant::Lpe => {
            let pts = positions.data();
            let mut rel = Vec::with_capacity(m * k * 3);
            for (q, &ci) in centers.iter().enumerate() {
                for &j in nbr.row(q) {
                    (0..3).for_each(|a| rel.push(pts[ci * 3 + a] - pts[j * 3 + a]));
                }
            }
            match &params.phi_local {
                Some(mlp) => {
                    let rel = tape.constant(Tensor::from_parts(vec![m * k, 3], rel));
                    let pad = tape.constant(Tensor::zeros(&[m * k, c]));
                    let x = Var::concat(&[pad, rel], 1)?;
                    mlp.forward(s, x)?.reshape(&[m, k, c])
                }
                None => tape
                    .constant(sinusoidal_features(&rel, c))
                    .reshape(&[m, k, c]),
            }
        }
        PositionVariant::Gpe => {
            let cpos: Vec<f64> = centers.iter().flat_map(|&i| positions.row(i).to_vec()).collect();
            let cpos = Tensor::from_parts(vec![m, 3], cpos);
            let e = params.global_embed(s, tape.constant(cpos.clone()), &cpos)?;
            e.expand(1, k)
        }
    }
}

/// Full position encoding of self-neighborhoods: `[N, K, C]`.
pub fn full_position_encoding<'t>(
    s: &Session<'t, '_>,
    positions: &Tensor,
    nbr: &NeighborIndex,
    params: &PositionEncodingParams,
) -> Result<Var<'t>> {
    encode_neighborhoods(s, positions, None, nbr, params)
}

/// Hierarchical features `H` for sampled centers: `[M, K, C]`.
pub fn hierarchical_features<'t>(
    s: &Session<'t, '_>,
    positions: &Tensor,
    centers: &[usize],
    nbr: &NeighborIndex,
    params: &PositionEncodingParams,
) -> Result<Var<'t>> {
    encode_neighborhoods(s, positions, Some(centers), nbr, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::knn_self;
    use crate::tensor::Tape;

    #[test]
    fn relation_values() {
        let o = [0.0; 3];
        assert_eq!(relation(o, o, 1.0).unwrap(), 1.0);
        assert_eq!(relation(o, [1.2, 0.0, 0.0], 1.2).unwrap(), 0.0);
        assert_eq!(relation(o, [5.0, 0.0, 0.0], 1.2).unwrap(), 0.0);
        assert!((relation(o, [0.6, 0.0, 0.0], 1.2).unwrap() - 0.5).abs() < 1e-15);
        assert!(relation(o, o, 0.0).is_err());
    }

    #[test]
    fn global_single_and_coincident() {
        let one = Tensor::zeros(&[1, 3]);
        assert_eq!(global_correlation(&one, 0.5).unwrap().values.data(), &[1.0]);
        let two = Tensor::full(&[2, 3], 0.3);
        assert_eq!(global_correlation(&two, 0.5).unwrap().values.data(), &[2.0, 2.0]);
    }

    #[test]
    fn global_matches_double_loop() {
        let mut rng = Rng::new(21);
        let p = Tensor::uniform(&[16, 3], 0.5, &mut rng);
        let g = global_correlation(&p, 0.5).unwrap();
        for i in 0..16 {
            let mut s = 0.0;
            for j in 0..16 {
                let d: f64 = (0..3).map(|a| (p.row(i)[a] - p.row(j)[a]).powi(2)).sum::<f64>().sqrt();
                s += if d >= 0.5 { 0.0 } else { 1.0 - d / 0.5 };
            }
            assert!((g.value(i) - s).abs() <= 1e-12 * s);
        }
    }

    #[test]
    fn subsampled_global_scales() {
        let p = Tensor::zeros(&[10, 3]);
        let g = global_correlation_with(&p, 1.0, 5).unwrap();
        assert_eq!(g.values.data(), &[10.0; 10]);
    }

    #[test]
    fn local_hand_example() {
        let p = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let nbr = NeighborIndex::from_rows(vec![vec![0, 1], vec![1, 0]]).unwrap();
        let s1 = GlobalCorrelation {
            values: Tensor::new(&[2, 1], vec![2.0, 1.5]).unwrap(),
            sigma: 1.0,
        };
        let l = local_correlation(&p, &nbr, &s1).unwrap();
        assert_eq!(l.values.shape(), &[2, 2, 8]);
        let d = l.values.data();
        assert_eq!(&d[8..16], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5]);
        // self neighbor: channels 3..8 zero, 0..3 = p_i
        assert_eq!(&d[0..8], &[0.0; 8]);
        assert_eq!(&d[16..24], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn local_rejects_bad_index() {
        let p = Tensor::zeros(&[2, 3]);
        let nbr = NeighborIndex::from_rows(vec![vec![0, 2], vec![1, 0]]).unwrap();
        let s1 = global_correlation(&p, 1.0).unwrap();
        assert!(local_correlation(&p, &nbr, &s1).is_err());
    }

    #[test]
    fn sinusoidal_layout() {
        let f = sinusoidal_features(&[0.5, 0.0, 0.0], 14);
        let d = f.data();
        // two frequencies per axis, 12 live channels, 2 padded
        assert!((d[0] - 1.0).abs() < 1e-15); // sin(pi/2)
        assert!(d[1].abs() < 1e-15); // cos(pi/2)
        assert!(d[2].abs() < 1e-15); // sin(pi)
        assert!((d[3] + 1.0).abs() < 1e-15); // cos(pi)
        assert_eq!(&d[4..6], &[0.0, 1.0]);
        assert_eq!(&d[12..14], &[0.0, 0.0]);
    }

    #[test]
    fn zero_init_gives_zero_encoding() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let params = PositionEncodingParams::fpe(&mut store, "pe", 8, &mut rng);
        params.zero(&mut store);
        let p = Tensor::uniform(&[10, 3], 1.0, &mut rng);
        let nbr = knn_self(&p, 4, true).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let d = full_position_encoding(&s, &p, &nbr, &params).unwrap();
        assert_eq!(d.shape(), vec![10, 4, 8]);
        assert!(d.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variants_have_expected_shapes() {
        let mut rng = Rng::new(3);
        let p = Tensor::uniform(&[12, 3], 1.0, &mut rng);
        let nbr = knn_self(&p, 3, true).unwrap();
        for variant in [PositionVariant::Fpe, PositionVariant::Lpe, PositionVariant::Gpe] {
            for enc in [EncoderKind::LearnableMlp, EncoderKind::Sinusoidal] {
                let mut store = ParamStore::new();
                let params = PositionEncodingParams::new(&mut store, "pe", 12, variant, enc, &mut rng);
                let tape = Tape::new();
                let s = Session::new(&tape, &store);
                let d = full_position_encoding(&s, &p, &nbr, &params).unwrap();
                assert_eq!(d.shape(), vec![12, 3, 12], "{variant:?} {enc:?}");
            }
        }
    }
}
