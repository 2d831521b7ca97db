//! Full point transformer: vector attention over kNN neighborhoods with the
//! full position encoding, where each of the `C_m` attention channels is
//! shared by `C / C_m` value channels.
//!
//! Channel `c = g * C_m + m` of the values uses attention channel `m`.

use crate::cloud::NeighborIndex;
use crate::encoding::{encode_neighborhoods, EncoderKind, PositionEncodingParams, PositionVariant};
use crate::error::{contract_err, dim_err, param_err, Result};
use crate::nn::{gather_neighbors, Linear, Mlp, ParamStore, Session};
use crate::tensor::{Rng, Tensor, Var};

#[derive(Debug, Clone)]
pub struct FPTransformerParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub pos_params: PositionEncodingParams,
    /// Separate encoding for the value branch; the attention encoding is
    /// reused when absent.
    pub value_pos_params: Option<PositionEncodingParams>,
    /// `C -> C -> C_m`.
    pub attn_mlp: Mlp,
    pub c: usize,
    pub c_mid: usize,
}

impl FPTransformerParams {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, c_mid: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_encoding(store, name, c, c_mid, PositionVariant::Fpe, EncoderKind::LearnableMlp, rng)
    }

    pub fn with_encoding(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        c_mid: usize,
        variant: PositionVariant,
        encoder: EncoderKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_groups(c, c_mid)?;
        Ok(Self {
            w_q: Linear::new(store, &format!("{name}.w_q"), c, c, rng),
            w_k: Linear::new(store, &format!("{name}.w_k"), c, c, rng),
            w_v: Linear::new(store, &format!("{name}.w_v"), c, c, rng),
            pos_params: PositionEncodingParams::new(store, &format!("{name}.pos"), c, variant, encoder, rng),
            value_pos_params: None,
            attn_mlp: Mlp::new(store, &format!("{name}.attn"), &[c, c, c_mid], rng),
            c,
            c_mid,
        })
    }

    /// Gives the value branch its own position encoding.
    pub fn separate_value_encoding(mut self, store: &mut ParamStore, name: &str, rng: &mut Rng) -> Self {
        let p = &self.pos_params;
        self.value_pos_params = Some(PositionEncodingParams::new(
            store,
            &format!("{name}.value_pos"),
            self.c,
            p.variant,
            p.encoder,
            rng,
        ));
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_groups(self.c, self.c_mid)?;
        for l in [&self.w_q, &self.w_k, &self.w_v] {
            if l.in_dim != self.c || l.out_dim != self.c {
                return dim_err(format!("projection is {}->{}, expected {}->{}", l.in_dim, l.out_dim, self.c, self.c));
            }
        }
        if self.attn_mlp.in_dim() != self.c || self.attn_mlp.out_dim() != self.c_mid {
            return dim_err("attention MLP widths do not match C -> C_m");
        }
        if self.pos_params.channels != self.c {
            return dim_err("position encoding width does not match C");
        }
        self.pos_params.validate()
    }

    pub fn groups(&self) -> usize {
        self.c / self.c_mid
    }
}

fn check_groups(c: usize, c_mid: usize) -> Result<()> {
    if c_mid == 0 || c_mid > c || c % c_mid != 0 {
        return param_err(format!("middle channels {c_mid} must divide {c}"));
    }
    Ok(())
}

pub fn qkv_project<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    params: &FPTransformerParams,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    Ok((
        params.w_q.forward(s, features)?,
        params.w_k.forward(s, features)?,
        params.w_v.forward(s, features)?,
    ))
}

/// Attention weights `[N, K, C_m]` (softmax over K) and values `[N, K, C]`.
pub fn attention_inputs<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    nbr: &NeighborIndex,
    params: &FPTransformerParams,
) -> Result<(Var<'t>, Var<'t>)> {
    params.validate()?;
    let fs = features.shape();
    if fs.len() != 2 || fs[1] != params.c {
        return contract_err(format!("features {fs:?} do not match {} channels", params.c));
    }
    if positions.shape() != [fs[0], 3] {
        return contract_err(format!("positions {:?} do not match {} points", positions.shape(), fs[0]));
    }
    nbr.validate(fs[0])?;
    let k = nbr.k();
    let (q, kk, v) = qkv_project(s, features, params)?;
    let delta = encode_neighborhoods(s, positions, None, nbr, &params.pos_params)?;
    let rel = q.expand(1, k)?.sub(gather_neighbors(kk, nbr)?)?.add(delta)?;
    let attn = params.attn_mlp.forward(s, rel)?.softmax(1)?;
    let value_delta = match &params.value_pos_params {
        Some(p) => encode_neighborhoods(s, positions, None, nbr, p)?,
        None => delta,
    };
    let values = gather_neighbors(v, nbr)?.add(value_delta)?;
    Ok((attn, values))
}

/// `out(i, g*C_m + m) = sum_j attn(i, j, m) * values(i, j, g*C_m + m)`.
pub fn group_weighted_sum<'t>(attn: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
    let a = attn.value();
    let v = values.value();
    let (sa, sv) = (a.shape(), v.shape());
    if sa.len() != 3 || sv.len() != 3 || sa[0] != sv[0] || sa[1] != sv[1] || sa[2] == 0 || sv[2] % sa[2] != 0 {
        return dim_err(format!("group_weighted_sum: attention {sa:?} and values {sv:?} are incompatible"));
    }
    let (n, k, cm, c) = (sa[0], sa[1], sa[2], sv[2]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let o = &mut out[i * c..(i + 1) * c];
        for j in 0..k {
            let ar = &a.data()[(i * k + j) * cm..(i * k + j + 1) * cm];
            let vr = &v.data()[(i * k + j) * c..(i * k + j + 1) * c];
            for (ch, (dst, val)) in o.iter_mut().zip(vr).enumerate() {
                *dst += ar[ch % cm] * val;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c], out);
    Ok(attn.tape().custom(&[attn, values], out, move |g, need| {
        let ga = need[0].then(|| {
            let mut ga = vec![0.0; n * k * cm];
            for i in 0..n {
                let gr = &g[i * c..(i + 1) * c];
                for j in 0..k {
                    let vr = &v.data()[(i * k + j) * c..(i * k + j + 1) * c];
                    let dst = &mut ga[(i * k + j) * cm..(i * k + j + 1) * cm];
                    for ch in 0..c {
                        dst[ch % cm] += gr[ch] * vr[ch];
                    }
                }
            }
            ga
        });
        let gv = need[1].then(|| {
            let mut gv = vec![0.0; n * k * c];
            for i in 0..n {
                let gr = &g[i * c..(i + 1) * c];
                for j in 0..k {
                    let ar = &a.data()[(i * k + j) * cm..(i * k + j + 1) * cm];
                    let dst = &mut gv[(i * k + j) * c..(i * k + j + 1) * c];
                    for ch in 0..c {
                        dst[ch] = gr[ch] * ar[ch % cm];
                    }
                }
            }
            gv
        });
        vec![ga, gv]
    }))
}

/// Group-shared attention without expanding the weights.
pub fn fptransformer_forward_efficient<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    nbr: &NeighborIndex,
    params: &FPTransformerParams,
) -> Result<Var<'t>> {
    let (attn, values) = attention_inputs(s, features, positions, nbr, params)?;
    group_weighted_sum(attn, values)?.check_finite("fptransformer output")
}

/// Tiles the attention to `[N, K, C]` and sums the elementwise products.
pub fn fptransformer_forward_naive<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    nbr: &NeighborIndex,
    params: &FPTransformerParams,
) -> Result<Var<'t>> {
    let (attn, values) = attention_inputs(s, features, positions, nbr, params)?;
    let w = attn.tile_last(params.groups())?;
    w.mul(values)?.sum(1)?.check_finite("fptransformer output")
}

/// `x + post(attention(pre(x)))`.
#[derive(Debug, Clone)]
pub struct FPTransformerBlock {
    pub pre: Linear,
    pub attn: FPTransformerParams,
    pub post: Linear,
}

impl FPTransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, c_mid: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_encoding(store, name, c, c_mid, PositionVariant::Fpe, EncoderKind::LearnableMlp, rng)
    }

    pub fn with_encoding(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        c_mid: usize,
        variant: PositionVariant,
        encoder: EncoderKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            pre: Linear::new(store, &format!("{name}.pre"), c, c, rng),
            attn: FPTransformerParams::with_encoding(store, &format!("{name}.attn"), c, c_mid, variant, encoder, rng)?,
            post: Linear::new(store, &format!("{name}.post"), c, c, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        features: Var<'t>,
        positions: &Tensor,
        nbr: &NeighborIndex,
    ) -> Result<Var<'t>> {
        fptransformer_block(s, features, positions, nbr, self)
    }
}

pub fn fptransformer_block<'t>(
    s: &Session<'t, '_>,
    features: Var<'t>,
    positions: &Tensor,
    nbr: &NeighborIndex,
    block: &FPTransformerBlock,
) -> Result<Var<'t>> {
    let h = block.pre.forward(s, features)?.relu();
    let h = fptransformer_forward_efficient(s, h, positions, nbr, &block.attn)?;
    let h = block.post.forward(s, h.relu())?;
    features.add(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::knn_self;
    use crate::tensor::{grad_check, Tape};

    struct Case {
        store: ParamStore,
        params: FPTransformerParams,
        pos: Tensor,
        feats: Tensor,
        nbr: NeighborIndex,
    }

    fn case(seed: u64, n: usize, k: usize, c: usize, cm: usize) -> Case {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let params = FPTransformerParams::new(&mut store, "t", c, cm, &mut rng).unwrap();
        let pos = Tensor::uniform(&[n, 3], 1.0, &mut rng);
        let feats = Tensor::uniform(&[n, c], 1.0, &mut rng);
        let nbr = knn_self(&pos, k, true).unwrap();
        Case {
            store,
            params,
            pos,
            feats,
            nbr,
        }
    }

    fn run(c: &Case, naive: bool) -> Tensor {
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let f = tape.constant(c.feats.clone());
        let out = if naive {
            fptransformer_forward_naive(&s, f, &c.pos, &c.nbr, &c.params)
        } else {
            fptransformer_forward_efficient(&s, f, &c.pos, &c.nbr, &c.params)
        };
        out.unwrap().to_tensor()
    }

    #[test]
    fn efficient_equals_naive() {
        for (seed, cm) in [(0, 2), (1, 1), (2, 4), (3, 8)] {
            let c = case(seed, 16, 4, 8, cm);
            assert!(run(&c, false).max_rel_diff(&run(&c, true)) <= 1e-10, "cm={cm}");
        }
    }

    #[test]
    fn full_width_matches_per_channel_attention() {
        let c = case(4, 12, 5, 6, 6);
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let (attn, values) = attention_inputs(&s, tape.constant(c.feats.clone()), &c.pos, &c.nbr, &c.params).unwrap();
        let (a, v) = (attn.to_tensor(), values.to_tensor());
        let mut want = vec![0.0; 12 * 6];
        for i in 0..12 {
            for ch in 0..6 {
                want[i * 6 + ch] = (0..5).map(|j| a.at(&[i, j, ch]) * v.at(&[i, j, ch])).sum();
            }
        }
        let want = Tensor::new(&[12, 6], want).unwrap();
        assert!(run(&c, false).max_rel_diff(&want) <= 1e-12);
    }

    #[test]
    fn attention_normalized_over_neighbors() {
        let c = case(5, 16, 6, 8, 2);
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let (attn, _) = attention_inputs(&s, tape.constant(c.feats.clone()), &c.pos, &c.nbr, &c.params).unwrap();
        let a = attn.to_tensor();
        for i in 0..16 {
            for m in 0..2 {
                let sum: f64 = (0..6).map(|j| a.at(&[i, j, m])).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut c = case(6, 10, 4, 4, 2);
        c.params.attn_mlp.zero(&mut c.store);
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let (_, values) = attention_inputs(&s, tape.constant(c.feats.clone()), &c.pos, &c.nbr, &c.params).unwrap();
        let mean = values.mean(1).unwrap().to_tensor();
        assert!(run(&c, false).max_abs_diff(&mean) <= 1e-14);
    }

    #[test]
    fn single_neighbor_passes_value_through() {
        let mut c = case(7, 10, 1, 4, 2);
        c.nbr = knn_self(&c.pos, 1, true).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let (_, values) = attention_inputs(&s, tape.constant(c.feats.clone()), &c.pos, &c.nbr, &c.params).unwrap();
        let v = values.reshape(&[10, 4]).unwrap().to_tensor();
        assert!(run(&c, false).max_abs_diff(&v) <= 1e-14);
    }

    #[test]
    fn qkv_matches_loops() {
        let c = case(8, 6, 2, 4, 2);
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let (q, _, _) = qkv_project(&s, tape.constant(c.feats.clone()), &c.params).unwrap();
        let w = c.store.get(c.params.w_q.weight);
        let b = c.store.get(c.params.w_q.bias);
        let q = q.to_tensor();
        for i in 0..6 {
            for o in 0..4 {
                let want: f64 = b.data()[o] + (0..4).map(|ch| c.feats.at(&[i, ch]) * w.at(&[ch, o])).sum::<f64>();
                assert!((q.at(&[i, o]) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
        let mut c = c;
        c.params.w_q.set_identity(&mut c.store).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &c.store);
        let (q, _, _) = qkv_project(&s, tape.constant(c.feats.clone()), &c.params).unwrap();
        assert_eq!(q.to_tensor(), c.feats);
    }

    #[test]
    fn rejects_indivisible_groups() {
        let mut store = ParamStore::new();
        assert!(FPTransformerParams::new(&mut store, "t", 8, 3, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_post_block_is_identity() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        let block = FPTransformerBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        block.post.zero(&mut store);
        let pos = Tensor::uniform(&[16, 3], 1.0, &mut rng);
        let feats = Tensor::uniform(&[16, 8], 1.0, &mut rng);
        let nbr = knn_self(&pos, 4, true).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let out = block.forward(&s, tape.constant(feats.clone()), &pos, &nbr).unwrap();
        assert_eq!(out.to_tensor(), feats);
    }

    #[test]
    fn block_gradients() {
        let mut rng = Rng::new(10);
        let mut store = ParamStore::new();
        let block = FPTransformerBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let pos = Tensor::uniform(&[16, 3], 1.0, &mut rng);
        let feats = Tensor::uniform(&[16, 8], 1.0, &mut rng);
        let w = Tensor::uniform(&[16, 8], 1.0, &mut rng);
        let nbr = knn_self(&pos, 4, true).unwrap();
        let err = grad_check(
            |tape, x| {
                let s = Session::new(tape, &store);
                let y = block.forward(&s, x, &pos, &nbr)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum_all())
            },
            &feats,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
        let wq = store.get(block.attn.w_q.weight).clone();
        let err = grad_check(
            |tape, x| {
                let s = Session::new(tape, &store);
                s.bind(block.attn.w_q.weight, x);
                let y = block.forward(&s, tape.constant(feats.clone()), &pos, &nbr)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum_all())
            },
            &wq,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "w_q: {err}");
    }

    #[test]
    fn permutation_equivariance() {
        let c = case(11, 20, 4, 8, 2);
        let perm = Rng::new(5).permutation(20);
        let pick = |t: &Tensor| {
            let w = t.shape()[1];
            Tensor::new(&[20, w], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
        };
        let moved = Case {
            store: c.store.clone(),
            params: c.params.clone(),
            pos: pick(&c.pos),
            feats: pick(&c.feats),
            nbr: knn_self(&pick(&c.pos), 4, true).unwrap(),
        };
        assert!(run(&moved, false).max_abs_diff(&pick(&run(&c, false))) <= 1e-12);
    }
}
