//! Fixtures shared by the benchmarks.

use fullpoint_core::cloud::knn_self;
use fullpoint_core::encoding::{global_correlation, local_correlation, LocalCorrelation};
use fullpoint_core::fpconv::FPConvParams;
use fullpoint_core::fptransformer::FPTransformerParams;
use fullpoint_core::nn::ParamStore;
use fullpoint_core::{NeighborIndex, Rng, Tensor};

pub struct Fixture {
    pub positions: Tensor,
    pub features: Tensor,
    pub nbr: NeighborIndex,
}

pub fn fixture(n: usize, c: usize, k: usize, seed: u64) -> Fixture {
    let mut rng = Rng::new(seed);
    let positions = Tensor::uniform(&[n, 3], 1.0, &mut rng);
    let features = Tensor::uniform(&[n, c], 1.0, &mut rng);
    let nbr = knn_self(&positions, k, true).expect("valid k");
    Fixture {
        positions,
        features,
        nbr,
    }
}

pub fn conv_setup(f: &Fixture, c: usize, c_mid: usize) -> (ParamStore, FPConvParams, LocalCorrelation) {
    let mut store = ParamStore::new();
    let params = FPConvParams::new(&mut store, "conv", c, c_mid, c, 1.2, &mut Rng::new(1)).expect("valid sizes");
    let s1 = global_correlation(&f.positions, params.sigma).expect("finite positions");
    let local = local_correlation(&f.positions, &f.nbr, &s1).expect("matching sizes");
    (store, params, local)
}

pub fn attn_setup(c: usize, c_mid: usize) -> (ParamStore, FPTransformerParams) {
    let mut store = ParamStore::new();
    let params = FPTransformerParams::new(&mut store, "attn", c, c_mid, &mut Rng::new(2)).expect("valid sizes");
    (store, params)
}
