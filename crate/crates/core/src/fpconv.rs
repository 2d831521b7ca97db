//! Full point convolution.
//!
//! The kernel applied to neighbor `j` of point `i` is
//! `W(i, j, c, o) = sum_m T2(i, j, m) * T1(c, m, o)` where `T2` is a softmax
//! over `C_m` of an MLP applied to the 8-channel local correlation and `T1`
//! is a learned `C x (C_m * C_out)` kernel. [`fpconv_forward_efficient`]
//! never materializes `W`; [`fpconv_forward_naive`] does.

use serde::{Deserialize, Serialize};

use crate::cloud::NeighborIndex;
use crate::encoding::{global_correlation, local_correlation, LocalCorrelation, LOCAL_CHANNELS};
use crate::error::{contract_err, dim_err, param_err, Result};
use crate::nn::{gather_neighbors, Mlp, ParamId, ParamStore, Session};
use crate::tensor::{ReduceKind, Rng, Tensor, Var};

/// Largest weight tensor the naive path will build.
pub const NAIVE_MAX_ENTRIES: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Max,
    Sum,
}

impl Aggregator {
    fn reduce_kind(self) -> ReduceKind {
        match self {
            Aggregator::Max => ReduceKind::Max,
            Aggregator::Sum => ReduceKind::Sum,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FPConvParams {
    /// `[C, C_m * C_out]`, column `m * C_out + o`.
    pub t_c1: ParamId,
    /// `8 -> C_m -> C_m`.
    pub weight_mlp: Mlp,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub aggregator: Aggregator,
    pub sigma: f64,
    /// Zeroes the absolute-position channels of the local correlation.
    pub mask_absolute: bool,
}

impl FPConvParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        sigma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if c_mid == 0 || c_mid > c_in {
            return param_err(format!("middle channels must be in 1..={c_in}, got {c_mid}"));
        }
        if !(sigma > 0.0) {
            return param_err(format!("influence coefficient must be positive, got {sigma}"));
        }
        let bound = (1.0 / c_in as f64).sqrt();
        let t_c1 = store.add(format!("{name}.t_c1"), Tensor::uniform(&[c_in, c_mid * c_out], bound, rng));
        let weight_mlp = Mlp::new(store, &format!("{name}.weight_mlp"), &[LOCAL_CHANNELS, c_mid, c_mid], rng);
        Ok(Self {
            t_c1,
            weight_mlp,
            c_in,
            c_mid,
            c_out,
            aggregator: Aggregator::Max,
            sigma,
            mask_absolute: false,
        })
    }

    pub fn with_aggregator(mut self, aggregator: Aggregator) -> Self {
        self.aggregator = aggregator;
        self
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        if self.c_mid == 0 || self.c_mid > self.c_in {
            return param_err(format!("middle channels {} exceed input channels {}", self.c_mid, self.c_in));
        }
        let s = store.get(self.t_c1).shape();
        if s != [self.c_in, self.c_mid * self.c_out] {
            return dim_err(format!(
                "t_c1 has shape {s:?}, expected [{}, {}]",
                self.c_in,
                self.c_mid * self.c_out
            ));
        }
        let m = &self.weight_mlp;
        if m.in_dim() != LOCAL_CHANNELS || m.out_dim() != self.c_mid {
            return dim_err(format!("weight MLP is {}->{}, expected 8->{}", m.in_dim(), m.out_dim(), self.c_mid));
        }
        Ok(())
    }
}

fn check_inputs(features: &Var<'_>, local: &LocalCorrelation, nbr: &NeighborIndex, params: &FPConvParams) -> Result<()> {
    let fs = features.shape();
    if fs.len() != 2 || fs[1] != params.c_in {
        return contract_err(format!("features {fs:?} do not match {} input channels", params.c_in));
    }
    let ls = local.values.shape();
    if ls != [nbr.queries(), nbr.k(), LOCAL_CHANNELS] {
        return contract_err(format!(
            "local correlation {ls:?} does not match neighbor index [{}, {}]",
            nbr.queries(),
            nbr.k()
        ));
    }
    nbr.validate(fs[0])
}

/// `T2 = softmax_{C_m}(phi(S2))`: `[N, K, C_m]`.
pub fn fpconv_coefficients<'t>(s: &Session<'t, '_>, local: &LocalCorrelation, params: &FPConvParams) -> Result<Var<'t>> {
    let mut s2 = local.values.clone();
    if params.mask_absolute {
        s2.data_mut().chunks_mut(LOCAL_CHANNELS).for_each(|c| c[..3].fill(0.0));
    }
    params.weight_mlp.forward(s, s.tape().constant(s2))?.softmax(2)
}

/// Lemma form: 1x1 convolution, gather, contraction with `T2`, aggregation.
pub fn fpconv_forward_efficient<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    local: &LocalCorrelation,
    nbr: &NeighborIndex,
    params: &FPConvParams,
) -> Result<Var<'t>> {
    params.validate(s.store())?;
    check_inputs(&features, local, nbr, params)?;
    let (n, k) = (nbr.queries(), nbr.k());
    let (cm, co) = (params.c_mid, params.c_out);
    // The 1x1 convolution is pointwise, so it runs before the gather.
    let y = features.matmul(s.param(params.t_c1))?;
    let m = gather_neighbors(y, nbr)?.reshape(&[n * k, cm, co])?;
    let t2 = fpconv_coefficients(s, local, params)?.reshape(&[n * k, 1, cm])?;
    let per_neighbor = t2.matmul(m)?.reshape(&[n, k, co])?;
    per_neighbor
        .reduce(1, params.aggregator.reduce_kind())?
        .check_finite("fpconv output")
}

/// Materializes `W(i, j, c, o)` and contracts it with the gathered features.
/// Sum aggregation only.
pub fn fpconv_forward_naive<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    local: &LocalCorrelation,
    nbr: &NeighborIndex,
    params: &FPConvParams,
) -> Result<Var<'t>> {
    params.validate(s.store())?;
    check_inputs(&features, local, nbr, params)?;
    if params.aggregator != Aggregator::Sum {
        return param_err("the materialized form is defined for sum aggregation only");
    }
    let (n, k) = (nbr.queries(), nbr.k());
    let (c, cm, co) = (params.c_in, params.c_mid, params.c_out);
    let entries = n * k * c * co;
    if entries > NAIVE_MAX_ENTRIES {
        return param_err(format!("weight tensor of {entries} entries exceeds the {NAIVE_MAX_ENTRIES} limit"));
    }
    let t1 = s
        .param(params.t_c1)
        .reshape(&[c, cm, co])?
        .permute(&[1, 0, 2])?
        .reshape(&[cm, c * co])?;
    let t2 = fpconv_coefficients(s, local, params)?.reshape(&[n * k, cm])?;
    let w = t2.matmul(t1)?.reshape(&[n * k, c, co])?;
    let f = gather_neighbors(features, nbr)?.reshape(&[n * k, 1, c])?;
    f.matmul(w)?.reshape(&[n, k, co])?.sum(1)?.check_finite("fpconv output")
}

/// Correlations from positions, then the efficient form.
pub fn fpconv_layer<'t>(
    s: &Session<'t, '_>,
    positions: &Tensor,
    features: Var<'t>,
    nbr: &NeighborIndex,
    params: &FPConvParams,
) -> Result<Var<'t>> {
    let s1 = global_correlation(positions, params.sigma)?;
    let local = local_correlation(positions, nbr, &s1)?;
    fpconv_forward_efficient(s, features, &local, nbr, params)
}
