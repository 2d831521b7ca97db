use std::time::Instant;

use fullpoint_core::cloud::{farthest_point_sample, knn_self};
use fullpoint_core::encoding::{global_correlation, local_correlation, relation};
use fullpoint_core::fpconv::{fpconv_coefficients, FPConvParams};
use fullpoint_core::fptransformer::{attention_inputs, FPTransformerParams};
use fullpoint_core::harness::verify::{verify_fpconv_lemma, verify_fptransformer_lemma};
use fullpoint_core::harness::{
    ablate, gen_dataset, robustness, train, verify_gradients, AblationConfig, AblationGrid, AblationKind, Dataset, DatasetKind, SyntheticDatasetSpec, TrainConfig,
};
use fullpoint_core::network::{LayerKind, Network, NetworkSpec, Task};
use fullpoint_core::nn::{ParamStore, Session};
use fullpoint_core::{PointCloud, Rng, Tape, Tensor};

mod common;
use common::{brute_fps, brute_knn, rel};

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn lemma_fpconv() -> Outcome {
    let r = verify_fpconv_lemma(100, SEED).expect("fpconv lemma runs");
    let pass = r.ok() && r.max_rel_error <= 1e-10 && r.seconds < 60.0;
    outcome(
        pass,
        format!(
            "{}/{} trials, max rel error {:.2e}, control caught {}, {:.1}s",
            r.passed, r.trials, r.max_rel_error, r.negative_control_detected, r.seconds
        ),
    )
}

fn lemma_fptransformer() -> Outcome {
    let r = verify_fptransformer_lemma(100, SEED).expect("fptransformer lemma runs");
    let pass = r.ok() && r.max_rel_error <= 1e-10 && r.boundary_trials > 0 && r.seconds < 60.0;
    outcome(
        pass,
        format!(
            "{}/{} trials ({} with C_m = C), max rel error {:.2e}, {:.1}s",
            r.passed, r.trials, r.boundary_trials, r.max_rel_error, r.seconds
        ),
    )
}

fn gradients() -> Outcome {
    let r = verify_gradients(SEED).expect("gradient suite runs");
    let worst = r.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let pass = r.ok() && worst <= 1e-4 && r.seconds < 300.0;
    outcome(
        pass,
        format!(
            "{} checks, worst rel error {:.2e}, failed {:?}, {:.1}s",
            r.checks.len(),
            worst,
            failed,
            r.seconds
        ),
    )
}

fn invariants() -> Outcome {
    let mut rng = Rng::new(SEED);
    let mut problems = Vec::new();

    let mut worst_softmax = 0.0f64;
    for trial in 0..20 {
        let (n, k, cm, groups) = (8 + rng.below(32), 1 + rng.below(8), 1 + rng.below(4), 1 + rng.below(3));
        let c = cm * groups;
        let k = k.min(n);
        let pos = Tensor::uniform(&[n, 3], 1.0, &mut rng);
        let nbr = knn_self(&pos, k, true).unwrap();
        let mut store = ParamStore::new();
        let conv = FPConvParams::new(&mut store, "c", c, cm, 4, 1.2, &mut rng).unwrap();
        let attn = FPTransformerParams::new(&mut store, "t", c, cm, &mut rng).unwrap();
        let local = local_correlation(&pos, &nbr, &global_correlation(&pos, 1.2).unwrap()).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let t2 = fpconv_coefficients(&s, &local, &conv).unwrap().to_tensor();
        for row in t2.data().chunks_exact(cm) {
            worst_softmax = worst_softmax.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let feats = tape.constant(Tensor::randn(&[n, c], 2.0, &mut rng));
        let a = attention_inputs(&s, feats, &pos, &nbr, &attn).unwrap().0.to_tensor();
        for i in 0..n {
            for m in 0..cm {
                let total: f64 = (0..k).map(|j| a.data()[(i * k + j) * cm + m]).sum();
                worst_softmax = worst_softmax.max((total - 1.0).abs());
            }
        }
        if worst_softmax > 1e-12 {
            problems.push(format!("softmax trial {trial}"));
        }
    }

    let mut oracle_mismatches = 0;
    for _ in 0..200 {
        let n = 8 + rng.below(249);
        let k = 1 + rng.below(16.min(n));
        let pts: Vec<f64> = (0..n * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let t = Tensor::new(&[n, 3], pts.clone()).unwrap();
        let nbr = knn_self(&t, k, true).unwrap();
        if brute_knn(&pts, k).iter().enumerate().any(|(i, row)| nbr.row(i) != row.as_slice()) {
            oracle_mismatches += 1;
        }
        let m = 1 + rng.below(n);
        let seed = rng.below(n);
        let cloud = PointCloud::new(t).unwrap();
        if farthest_point_sample(&cloud, m, seed).unwrap() != brute_fps(&pts, m, seed) {
            oracle_mismatches += 1;
        }
    }
    if oracle_mismatches > 0 {
        problems.push(format!("{oracle_mismatches} kNN/FPS oracle mismatches"));
    }

    let mut worst_perm = 0.0f64;
    for kind in [LayerKind::Fptransformer, LayerKind::Fpconv] {
        for _ in 0..3 {
            let net = Network::build(&NetworkSpec::desk(Task::Classification, kind, 4), &mut rng).unwrap();
            let cloud = PointCloud::new(Tensor::uniform(&[256, 3], 1.0, &mut rng)).unwrap();
            let shuffled = cloud.select(&rng.permutation(cloud.len())).unwrap();
            worst_perm = worst_perm.max(rel(&net.predict(&shuffled).unwrap(), &net.predict(&cloud).unwrap()));
        }
    }
    if worst_perm > 1e-9 {
        problems.push(format!("permutation rel error {worst_perm:.2e}"));
    }

    let mut relation_bad = 0;
    for _ in 0..1000 {
        let p = [0; 3].map(|_| rng.uniform(-5.0, 5.0));
        let sigma = rng.uniform(0.05, 3.0);
        if relation(p, p, sigma).unwrap() != 1.0 {
            relation_bad += 1;
        }
        let dir = [0; 3].map(|_| rng.normal());
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let reach = sigma * rng.uniform(1.0, 3.0) * (1.0 + 1e-12);
        let q = [0, 1, 2].map(|a| p[a] + dir[a] / norm * reach);
        let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt();
        if d >= sigma && relation(p, q, sigma).unwrap() != 0.0 {
            relation_bad += 1;
        }
    }
    if relation_bad > 0 {
        problems.push(format!("{relation_bad} relation violations"));
    }

    outcome(
        problems.is_empty(),
        format!(
            "softmax dev {worst_softmax:.1e}, 200 kNN+FPS oracle instances, permutation rel {worst_perm:.1e}, {}",
            if problems.is_empty() { "no violations".to_string() } else { problems.join("; ") }
        ),
    )
}

fn shapes() -> Dataset {
    gen_dataset(&SyntheticDatasetSpec::new(DatasetKind::ShapesCls, 200, 80, SEED)).expect("dataset")
}

fn classify(data: &Dataset, kind: LayerKind, epochs: usize) -> (Network, f64, f64) {
    let mut net = Network::build(&NetworkSpec::desk(Task::Classification, kind, 4), &mut Rng::new(SEED)).unwrap();
    let cfg = TrainConfig {
        epochs,
        seed: SEED,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &data.train, Some(&data.test), &cfg).expect("training");
    (net, report.test.unwrap().oa, report.train_seconds)
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    record(1, "fpconv lemma equivalence", lemma_fpconv());
    record(2, "fptransformer lemma equivalence", lemma_fptransformer());
    record(3, "gradient verification", gradients());
    record(4, "structural invariants", invariants());

    let data = shapes();
    let (transformer, oa_t, secs_t) = classify(&data, LayerKind::Fptransformer, 12);
    let (_, oa_c, secs_c) = classify(&data, LayerKind::Fpconv, 12);
    record(
        5,
        "toy classification",
        outcome(
            oa_t >= 0.95 && oa_c >= 0.90 && secs_t < 1200.0 && secs_c < 1200.0,
            format!(
                "fptransformer OA {:.2}% ({secs_t:.0}s), fpconv OA {:.2}% ({secs_c:.0}s), 12 epochs",
                100.0 * oa_t,
                100.0 * oa_c
            ),
        ),
    );

    let spheres = gen_dataset(&SyntheticDatasetSpec::new(DatasetKind::SphereNormals, 40, 10, SEED)).unwrap();
    let mut net = Network::build(
        &NetworkSpec::desk(Task::NormalEstimation, LayerKind::Fpconv, 0),
        &mut Rng::new(SEED),
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        seed: SEED,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &spheres.train, Some(&spheres.test), &cfg).expect("normal training");
    let angle = report.test.unwrap().normal_angle_error.unwrap_or(f64::INFINITY);
    record(
        6,
        "toy normal estimation",
        outcome(
            angle <= 10.0 && report.train_seconds < 1200.0,
            format!("mean angle {angle:.2} deg after 40 epochs, {:.0}s", report.train_seconds),
        ),
    );

    let rob = robustness(&transformer, &data.test, SEED).expect("robustness");
    let perm = rob.transforms.iter().find(|r| r.perturbation == "permutation").expect("permutation row");
    let curve: Vec<String> = rob.density.iter().map(|(n, oa)| format!("{n}:{:.1}", 100.0 * oa)).collect();
    record(
        7,
        "robustness protocol",
        outcome(
            perm.delta_oa_pp.abs() <= 0.1 && rob.density.len() == 5,
            format!(
                "permutation dOA {:+.2}pp, density [{}], monotonicity violations {:?}",
                perm.delta_oa_pp,
                curve.join(" "),
                rob.monotonicity_violations
            ),
        ),
    );

    let t0 = Instant::now();
    let mut summaries = Vec::new();
    let mut complete = true;
    for (kind, headers, rows) in [
        (AblationKind::Sigma, vec!["sigma", "OA(%)"], 5),
        (AblationKind::CMid, vec!["case", "C_m", "mIoU(%)", "mAcc(%)", "OA(%)", "Para."], 2),
    ] {
        let table = ablate(&AblationGrid::standard(kind), &AblationConfig::desk(kind, SEED)).expect("ablation");
        let csv = table.to_csv().unwrap();
        let header_line = csv.lines().next().unwrap_or_default().to_string();
        let ok = table.headers == headers
            && table.rows.len() == rows
            && table.cells.len() == rows
            && table.rows.iter().all(|r| r.len() == headers.len() && r.iter().all(|v| !v.is_empty()))
            && csv.lines().count() == rows + 1;
        complete &= ok;
        summaries.push(format!("{kind}: {} rows [{header_line}]", table.rows.len()));
    }
    let secs = t0.elapsed().as_secs_f64();
    record(
        8,
        "ablation machinery",
        outcome(complete && secs < 7200.0, format!("{}, {secs:.0}s", summaries.join("; "))),
    );

    let bytes = transformer.to_bytes().unwrap();
    let restored = Network::from_bytes(&bytes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    transformer.save(&path).unwrap();
    let loaded = Network::load(&path).unwrap();
    let identical = data.test.iter().all(|s| {
        let a = transformer.predict(&s.cloud).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bits(&a) == bits(&restored.predict(&s.cloud).unwrap()) && bits(&a) == bits(&loaded.predict(&s.cloud).unwrap())
    });
    record(
        9,
        "checkpoint round-trip",
        outcome(identical, format!("{} clouds, {} bytes, logits bit-identical {identical}", data.test.len(), bytes.len())),
    );

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} passed in {:.0}s", results.len(), started.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
