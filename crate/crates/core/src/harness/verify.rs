//! Randomized equivalence trials for the efficient layer forms and
//! finite-difference checks for every differentiable layer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    downsample_geometry, gds_forward, interpolate, mlp_baseline_layer, sads_forward, tds_forward, upsample_geometry,
    SadsParams, TdsParams,
};
use crate::cloud::knn_self;
use crate::encoding::{global_correlation, local_correlation, EncoderKind, PositionEncodingParams, PositionVariant};
use crate::error::Result;
use crate::fpconv::{fpconv_forward_efficient, fpconv_forward_naive, fpconv_layer, Aggregator, FPConvParams};
use crate::fptransformer::{
    fptransformer_forward_efficient, fptransformer_forward_naive, FPTransformerBlock, FPTransformerParams,
};
use crate::network::{LayerKind, Network, NetworkSpec, Target, Task};
use crate::nn::{Mlp, ParamStore, Session};
use crate::tensor::{grad_check_coords, Rng, Tape, Tensor, Var};

pub const LEMMA_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-6;

/// `max |a - b| / max(max |b|, tiny)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.max_abs_diff(b) / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaTrial {
    pub trial: usize,
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub c_mid: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub layer: String,
    pub trials: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Trials run with `C_m = C`.
    pub boundary_trials: usize,
    /// A perturbed efficient form was told apart from the naive form.
    pub negative_control_detected: bool,
    pub failures: Vec<LemmaTrial>,
    pub seconds: f64,
}

impl LemmaReport {
    pub fn ok(&self) -> bool {
        self.passed == self.trials && self.negative_control_detected
    }
}

struct ConvCase {
    store: ParamStore,
    params: FPConvParams,
    feats: Tensor,
    pos: Tensor,
    k: usize,
}

fn conv_case(rng: &mut Rng) -> Result<ConvCase> {
    let n = 4 + rng.below(29);
    let k = 1 + rng.below(8.min(n));
    let c = 1 + rng.below(16);
    let c_mid = 1 + rng.below(4.min(c));
    let c_out = 1 + rng.below(16);
    let mut store = ParamStore::new();
    let params = FPConvParams::new(&mut store, "conv", c, c_mid, c_out, rng.uniform(0.3, 2.0), rng)?
        .with_aggregator(Aggregator::Sum);
    Ok(ConvCase {
        store,
        params,
        feats: Tensor::uniform(&[n, c], 1.0, rng),
        pos: Tensor::uniform(&[n, 3], 1.0, rng),
        k,
    })
}

fn conv_pair(case: &ConvCase, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let nbr = knn_self(&case.pos, case.k, true)?;
    let local = local_correlation(&case.pos, &nbr, &global_correlation(&case.pos, case.params.sigma)?)?;
    let tape = Tape::new();
    let s = Session::inference(&tape, &case.store);
    let naive = fpconv_forward_naive(&s, tape.constant(case.feats.clone()), &local, &nbr, &case.params)?;
    let s = Session::inference(&tape, store);
    let eff = fpconv_forward_efficient(&s, tape.constant(case.feats.clone()), &local, &nbr, &case.params)?;
    Ok((eff.to_tensor(), naive.to_tensor()))
}

pub fn verify_fpconv_lemma(trials: usize, seed: u64) -> Result<LemmaReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed).fork(11);
    let mut report = report("fpconv", trials);
    for trial in 0..trials {
        let case = conv_case(&mut rng)?;
        let (eff, naive) = conv_pair(&case, &case.store)?;
        let p = &case.params;
        report.boundary_trials += usize::from(p.c_mid == p.c_in);
        record(&mut report, trial, case.feats.shape()[0], case.k, p.c_in, p.c_mid, relative_error(&eff, &naive));
    }
    let case = conv_case(&mut rng)?;
    let mut bad = case.store.clone();
    bad.get_mut(case.params.t_c1).data_mut()[0] += 1e-6;
    let (eff, naive) = conv_pair(&case, &bad)?;
    report.negative_control_detected = relative_error(&eff, &naive) > LEMMA_TOLERANCE;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

struct AttnCase {
    store: ParamStore,
    params: FPTransformerParams,
    feats: Tensor,
    pos: Tensor,
    k: usize,
}

fn attn_case(rng: &mut Rng, boundary: bool) -> Result<AttnCase> {
    let n = 4 + rng.below(29);
    let k = 1 + rng.below(8.min(n));
    let c = 1 + rng.below(16);
    let c_mid = if boundary {
        c
    } else {
        let divisors: Vec<usize> = (1..=4.min(c)).filter(|d| c % d == 0).collect();
        divisors[rng.below(divisors.len())]
    };
    let mut store = ParamStore::new();
    let params = FPTransformerParams::new(&mut store, "attn", c, c_mid, rng)?;
    Ok(AttnCase {
        store,
        params,
        feats: Tensor::uniform(&[n, c], 1.0, rng),
        pos: Tensor::uniform(&[n, 3], 1.0, rng),
        k,
    })
}

fn attn_pair(case: &AttnCase, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let nbr = knn_self(&case.pos, case.k, true)?;
    let tape = Tape::new();
    let s = Session::inference(&tape, &case.store);
    let naive = fptransformer_forward_naive(&s, tape.constant(case.feats.clone()), &case.pos, &nbr, &case.params)?;
    let s = Session::inference(&tape, store);
    let eff = fptransformer_forward_efficient(&s, tape.constant(case.feats.clone()), &case.pos, &nbr, &case.params)?;
    Ok((eff.to_tensor(), naive.to_tensor()))
}

pub fn verify_fptransformer_lemma(trials: usize, seed: u64) -> Result<LemmaReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed).fork(12);
    let mut report = report("fptransformer", trials);
    for trial in 0..trials {
        // every fifth trial sits on the C_m = C boundary
        let boundary = trial % 5 == 0;
        let case = attn_case(&mut rng, boundary)?;
        report.boundary_trials += usize::from(case.params.c_mid == case.params.c);
        let (eff, naive) = attn_pair(&case, &case.store)?;
        let p = &case.params;
        record(&mut report, trial, case.feats.shape()[0], case.k, p.c, p.c_mid, relative_error(&eff, &naive));
    }
    let case = attn_case(&mut rng, false)?;
    let mut bad = case.store.clone();
    bad.get_mut(case.params.w_v.weight).data_mut()[0] += 1e-6;
    let (eff, naive) = attn_pair(&case, &bad)?;
    report.negative_control_detected = relative_error(&eff, &naive) > LEMMA_TOLERANCE;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn report(layer: &str, trials: usize) -> LemmaReport {
    LemmaReport {
        layer: layer.into(),
        trials,
        passed: 0,
        max_rel_error: 0.0,
        tolerance: LEMMA_TOLERANCE,
        boundary_trials: 0,
        negative_control_detected: false,
        failures: Vec::new(),
        seconds: 0.0,
    }
}

fn record(r: &mut LemmaReport, trial: usize, n: usize, k: usize, c: usize, c_mid: usize, err: f64) {
    r.max_rel_error = r.max_rel_error.max(err);
    if err <= LEMMA_TOLERANCE {
        r.passed += 1;
    } else {
        r.failures.push(LemmaTrial {
            trial,
            n,
            k,
            c,
            c_mid,
            rel_error: err,
        });
    }
}

/// Both lemma suites.
pub fn verify_lemmas(trials: usize, seed: u64) -> Result<Vec<LemmaReport>> {
    Ok(vec![verify_fpconv_lemma(trials, seed)?, verify_fptransformer_lemma(trials, seed)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub checks: Vec<GradientCheck>,
    pub tolerance: f64,
    /// A deliberately wrong backward pass was flagged.
    pub negative_control_detected: bool,
    pub seconds: f64,
}

impl GradientReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.negative_control_detected
    }
}

type Loss<'a> = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> + 'a>;

fn run_check(name: &str, f: Loss<'_>, x: &Tensor, coords: Option<Vec<usize>>) -> Result<GradientCheck> {
    let coords = coords.unwrap_or_else(|| (0..x.len()).collect());
    let r = grad_check_coords(f, x, FD_EPS, &coords)?;
    Ok(GradientCheck {
        name: name.into(),
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        passed: r.max_rel_error <= GRADIENT_TOLERANCE,
    })
}

/// Weighted-sum probe so every output coordinate carries a distinct weight.
fn probe<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    y.mul(y.tape().constant(w.clone()))?.sum_all().check_finite("probe loss")
}

fn bound_param_check(name: &str, store: &ParamStore, id: crate::nn::ParamId, run: Loss<'_>) -> Result<GradientCheck> {
    let x = store.get(id).clone();
    run_check(name, run, &x, None)
}

pub fn verify_gradients(seed: u64) -> Result<GradientReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed).fork(13);
    let mut checks = Vec::new();
    let (n, c) = (24, 8);
    let pos = Tensor::uniform(&[n, 3], 1.0, &mut rng);
    let feats = Tensor::uniform(&[n, c], 1.0, &mut rng);
    let nbr = knn_self(&pos, 6, true)?;
    let mut store = ParamStore::new();

    let conv = FPConvParams::new(&mut store, "conv", c, 2, c, 1.0, &mut rng)?;
    let conv_sum = conv.clone().with_aggregator(Aggregator::Sum);
    let block = FPTransformerBlock::new(&mut store, "attn", c, 2, &mut rng)?;
    let sads = SadsParams::with_encoding(&mut store, "sads", c, 12, 6, 3, &mut rng, |st, nm, ch, r| {
        PositionEncodingParams::new(st, nm, ch, PositionVariant::Fpe, EncoderKind::LearnableMlp, r)
    })?;
    let tds = TdsParams::new(&mut store, "tds", c, 12, 6, 3, &mut rng)?;
    let mlp = Mlp::new(&mut store, "mlp", &[c, 10, 10], &mut rng);
    let down = downsample_geometry(&pos, 3, 6)?;
    let fine = Tensor::uniform(&[40, 3], 1.0, &mut rng);
    let up = upsample_geometry(&pos, &fine, 3)?;
    let m = down.positions.shape()[0];
    let w_nc = Tensor::uniform(&[n, c], 1.0, &mut rng);
    let w_m12 = Tensor::uniform(&[m, 12], 1.0, &mut rng);
    let w_mc = Tensor::uniform(&[m, c], 1.0, &mut rng);
    let w_n10 = Tensor::uniform(&[n, 10], 1.0, &mut rng);
    let w_up = Tensor::uniform(&[40, c], 1.0, &mut rng);

    for (name, p) in [("fpconv (max)", &conv), ("fpconv (sum)", &conv_sum)] {
        checks.push(run_check(
            name,
            Box::new(|t, x| probe(fpconv_layer(&Session::new(t, &store), &pos, x, &nbr, p)?, &w_nc)),
            &feats,
            None,
        )?);
        checks.push(bound_param_check(
            &format!("{name} t_c1"),
            &store,
            p.t_c1,
            Box::new(|t, x| {
                let s = Session::new(t, &store);
                s.bind(p.t_c1, x);
                probe(fpconv_layer(&s, &pos, t.constant(feats.clone()), &nbr, p)?, &w_nc)
            }),
        )?);
    }
    let wmlp = conv.weight_mlp.layers[0].weight;
    checks.push(bound_param_check(
        "fpconv weight function",
        &store,
        wmlp,
        Box::new(|t, x| {
            let s = Session::new(t, &store);
            s.bind(wmlp, x);
            probe(fpconv_layer(&s, &pos, t.constant(feats.clone()), &nbr, &conv_sum)?, &w_nc)
        }),
    )?);
    checks.push(run_check(
        "fptransformer block",
        Box::new(|t, x| probe(block.forward(&Session::new(t, &store), x, &pos, &nbr)?, &w_nc)),
        &feats,
        None,
    )?);
    for (label, id) in [
        ("w_q", block.attn.w_q.weight),
        ("w_k", block.attn.w_k.weight),
        ("w_v", block.attn.w_v.weight),
        ("attention mlp", block.attn.attn_mlp.layers[0].weight),
    ] {
        let (st, blk, f, p, nb, w) = (&store, &block, &feats, &pos, &nbr, &w_nc);
        checks.push(bound_param_check(
            &format!("fptransformer block {label}"),
            &store,
            id,
            Box::new(move |t, x| {
                let s = Session::new(t, st);
                s.bind(id, x);
                probe(blk.forward(&s, t.constant(f.clone()), p, nb)?, w)
            }),
        )?);
    }
    checks.push(run_check(
        "sads",
        Box::new(|t, x| probe(sads_forward(&Session::new(t, &store), x, &pos, &down, &sads)?, &w_m12)),
        &feats,
        None,
    )?);
    checks.push(run_check(
        "tds",
        Box::new(|t, x| probe(tds_forward(&Session::new(t, &store), x, &down, &tds)?, &w_m12)),
        &feats,
        None,
    )?);
    checks.push(run_check(
        "gds",
        Box::new(|_, x| probe(gds_forward(x, &down)?, &w_mc)),
        &feats,
        None,
    )?);
    checks.push(run_check(
        "upsample",
        Box::new(|_, x| probe(interpolate(x, &up)?, &w_up)),
        &feats,
        None,
    )?);
    checks.push(run_check(
        "mlp baseline",
        Box::new(|t, x| probe(mlp_baseline_layer(&Session::new(t, &store), x, &nbr, &mlp)?, &w_n10)),
        &feats,
        None,
    )?);
    checks.push(sum_loss_check(&mut rng)?);
    checks.extend(network_checks(&mut rng)?);

    Ok(GradientReport {
        checks,
        tolerance: GRADIENT_TOLERANCE,
        negative_control_detected: negative_control()?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn network_checks(rng: &mut Rng) -> Result<Vec<GradientCheck>> {
    let n = 64;
    let pos = Tensor::uniform(&[n, 3], 1.0, rng);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let normals = Tensor::uniform(&[n, 3], 1.0, rng);
    let mut out = Vec::new();
    for (task, kind) in [
        (Task::Classification, LayerKind::Fptransformer),
        (Task::Classification, LayerKind::Fpconv),
        (Task::Segmentation, LayerKind::Fptransformer),
        (Task::NormalEstimation, LayerKind::Fpconv),
    ] {
        let classes = if task == Task::NormalEstimation { 0 } else { 4 };
        let net = Network::build(&NetworkSpec::desk(task, kind, classes), rng)?;
        let geom = net.geometry(&pos)?;
        let tag = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        let name = format!("network {} {}", tag(serde_json::to_value(task)?), tag(serde_json::to_value(kind)?));
        out.push(run_check(
            &format!("{name} input"),
            Box::new(|t, x| {
                let s = Session::new(t, &net.store);
                let y = net.forward(&s, &geom, x)?;
                net.loss(y, target(task, &labels, &normals))
            }),
            &pos,
            None,
        )?);
        for label in ["stem.0.weight", "head.1.weight"] {
            let id = net.store.find(label).expect("network parameter");
            out.push(bound_param_check(
                &format!("{name} {label}"),
                &net.store,
                id,
                Box::new(|t, x| {
                    let s = Session::new(t, &net.store);
                    s.bind(id, x);
                    let y = net.forward(&s, &geom, t.constant(pos.clone()))?;
                    net.loss(y, target(task, &labels, &normals))
                }),
            )?);
        }
    }
    Ok(out)
}

fn target<'a>(task: Task, labels: &'a [usize], normals: &'a Tensor) -> Target<'a> {
    match task {
        Task::Classification => Target::Class(1),
        Task::Segmentation => Target::Labels(labels),
        Task::NormalEstimation => Target::Normals(normals),
    }
}

/// The gradient of a plain sum is exactly one everywhere.
fn sum_loss_check(rng: &mut Rng) -> Result<GradientCheck> {
    let x = Tensor::uniform(&[7, 5], 3.0, rng);
    let tape = Tape::new();
    let v = tape.leaf(x);
    let g = tape.backward(v.sum_all())?.get_or_zeros(v);
    let err = g.iter().fold(0.0f64, |m, d| m.max((d - 1.0).abs()));
    Ok(GradientCheck {
        name: "sum loss".into(),
        checked: g.len(),
        max_rel_error: err,
        passed: err == 0.0,
    })
}

/// `x^3` with the backward pass of `x^2`.
fn negative_control() -> Result<bool> {
    let x = Tensor::uniform(&[6], 2.0, &mut Rng::new(99));
    let r = grad_check_coords(
        |t, v| {
            let d = v.value();
            let y = Tensor::from_parts(d.shape().to_vec(), d.data().iter().map(|a| a * a * a).collect());
            t.custom(&[v], y, move |g, _| vec![Some(g.iter().zip(d.data()).map(|(g, a)| g * a * a).collect())])
                .sum_all()
                .check_finite("cube")
        },
        &x,
        FD_EPS,
        &(0..6).collect::<Vec<_>>(),
    )?;
    Ok(r.max_rel_error > GRADIENT_TOLERANCE)
}
