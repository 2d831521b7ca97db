//! Minibatch SGD with momentum, evaluation and the robustness protocol.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::metrics::{argmax_rows, normal_angle_error, Confusion};
use crate::cloud::{augment, AugmentSpec, PointCloud, RandomAugment};
use crate::error::{validation_err, Error, Result};
use crate::network::{Geometry, Network, Target, Task};
use crate::nn::Session;
use crate::tensor::{Rng, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to `min_lr` over all epochs.
    Cosine { min_lr: f64 },
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { min_lr } => {
                let t = epoch as f64 / epochs.max(1) as f64;
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Schedule::Constant => "constant".into(),
            Schedule::Cosine { min_lr } => format!("cosine to {min_lr}"),
            Schedule::Step { every, gamma } => format!("x{gamma} every {every} epochs"),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

fn default_schedule() -> Schedule {
    Schedule::Cosine { min_lr: 5e-4 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Rescales the batch gradient to at most this global L2 norm.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub augment: RandomAugment,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.05,
            momentum: default_momentum(),
            weight_decay: 1e-4,
            schedule: default_schedule(),
            grad_clip: default_clip(),
            augment: RandomAugment::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return validation_err("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return validation_err("batch_size", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return validation_err("momentum", "must be in [0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return validation_err("grad_clip", "must be positive");
            }
        }
        if !(self.weight_decay >= 0.0) {
            return validation_err("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    /// Degrees, normal estimation only.
    pub normal_angle_error: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub param_count: usize,
    pub schedule: String,
    pub epochs: Vec<EpochRecord>,
    pub train_seconds: f64,
    pub test: Option<EvalMetrics>,
}

fn target(sample: &Sample) -> Result<Target<'_>> {
    if let Some(c) = sample.class {
        return Ok(Target::Class(c));
    }
    if let Some(l) = sample.cloud.labels() {
        return Ok(Target::Labels(l));
    }
    if let Some(n) = sample.cloud.normals() {
        return Ok(Target::Normals(n));
    }
    Err(Error::Contract("sample has no class, labels or normals".into()))
}

fn check_task(net: &Network, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let ok = match (net.spec.task, target(s)?) {
            (Task::Classification, Target::Class(c)) => c < net.spec.num_classes,
            (Task::Segmentation, Target::Labels(l)) => l.iter().all(|&c| c < net.spec.num_classes),
            (Task::NormalEstimation, Target::Normals(_)) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Contract(format!(
                "dataset targets do not fit a {:?} network with {} outputs",
                net.spec.task,
                net.spec.output_dim()
            )));
        }
    }
    Ok(())
}

/// Trains in place. With identity augmentation the per-cloud geometry is
/// built once and reused across epochs.
pub fn train(net: &mut Network, train_set: &[Sample], test_set: Option<&[Sample]>, cfg: &TrainConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return validation_err("train", "training set is empty");
    }
    check_task(net, train_set)?;
    let mut rng = Rng::new(cfg.seed);
    let cache_geometry = cfg.augment.is_identity();
    let mut cache: Vec<Option<(Geometry, Tensor)>> = (0..train_set.len()).map(|_| None).collect();
    let mut velocity: Vec<Vec<f64>> = net.store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let ids: Vec<_> = net.store.ids().collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let order = rng.permutation(train_set.len());
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &train_set[i];
                let fresh;
                let (geom, feats, tgt_sample) = if cache_geometry {
                    if cache[i].is_none() {
                        let g = net.geometry(sample.cloud.positions())?;
                        cache[i] = Some((g, net.input_features(&sample.cloud)?));
                    }
                    let (g, f) = cache[i].as_ref().unwrap();
                    (g, f.clone(), sample)
                } else {
                    let spec = cfg.augment.sample(&mut rng);
                    let cloud = augment(&sample.cloud, &spec, &mut rng)?;
                    let g = net.geometry(cloud.positions())?;
                    let f = net.input_features(&cloud)?;
                    fresh = (
                        g,
                        Sample {
                            cloud,
                            class: sample.class,
                        },
                    );
                    (&fresh.0, f, &fresh.1)
                };
                let tape = Tape::new();
                let s = Session::new(&tape, &net.store);
                let diverged = |e: Error| match e {
                    Error::Numeric(m) => Error::Numeric(format!("diverged at epoch {epoch}, step {step}: {m}")),
                    e => e,
                };
                let out = net.forward(&s, geom, tape.constant(feats)).map_err(diverged)?;
                let loss = net.loss(out, target(tgt_sample)?)?;
                let lv = loss.value().item();
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("loss diverged at epoch {epoch}, step {step}")));
                }
                total += lv;
                let g = tape.backward(loss)?;
                for (acc, pg) in grads.iter_mut().zip(s.param_grads(&g)) {
                    if let Some(pg) = pg {
                        acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += scale * b);
                    }
                }
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let f = clip / norm;
                    grads.iter_mut().flatten().for_each(|g| *g *= f);
                }
            }
            for ((v, g), id) in velocity.iter_mut().zip(&grads).zip(ids.iter().copied()) {
                let w = net.store.get_mut(id).data_mut();
                for ((vj, gj), wj) in v.iter_mut().zip(g).zip(w.iter_mut()) {
                    *vj = cfg.momentum * *vj + gj + cfg.weight_decay * *wj;
                    *wj -= lr * *vj;
                }
            }
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            loss: total / train_set.len() as f64,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let train_seconds = start.elapsed().as_secs_f64();
    let test = match test_set {
        Some(t) => Some(evaluate(net, t, &Perturbation::None, cfg.seed)?),
        None => None,
    };
    Ok(MetricsReport {
        task: net.spec.task,
        param_count: net.param_count(),
        schedule: cfg.schedule.describe(),
        epochs,
        train_seconds,
        test,
    })
}

/// Test-time perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    None,
    Augment(AugmentSpec),
    /// Uniformly subsample to this many points.
    Density(usize),
}

fn perturb(cloud: &PointCloud, p: &Perturbation, rng: &mut Rng) -> Result<PointCloud> {
    match p {
        Perturbation::None => Ok(cloud.clone()),
        Perturbation::Augment(spec) => augment(cloud, spec, rng),
        Perturbation::Density(m) if *m >= cloud.len() => Ok(cloud.clone()),
        Perturbation::Density(m) => {
            let mut keep = rng.permutation(cloud.len());
            keep.truncate(*m);
            keep.sort_unstable();
            cloud.select(&keep)
        }
    }
}

pub fn evaluate(net: &Network, samples: &[Sample], perturbation: &Perturbation, seed: u64) -> Result<EvalMetrics> {
    check_task(net, samples)?;
    let mut rng = Rng::new(seed ^ 0x5EED_E7A1);
    let classes = net.spec.output_dim();
    let mut conf = Confusion::new(classes.max(1));
    let mut angle = 0.0;
    let mut loss = 0.0;
    for sample in samples {
        let cloud = perturb(&sample.cloud, perturbation, &mut rng)?;
        let geom = net.geometry(cloud.positions())?;
        let tape = Tape::new();
        let s = Session::inference(&tape, &net.store);
        let out = net.forward(&s, &geom, tape.constant(net.input_features(&cloud)?))?;
        let moved = Sample {
            cloud,
            class: sample.class,
        };
        let tgt = target(&moved)?;
        loss += net.loss(out, tgt)?.value().item();
        let out = out.to_tensor();
        match tgt {
            Target::Class(c) => conf.add(c, argmax_rows(&out)[0]),
            Target::Labels(l) => l.iter().zip(argmax_rows(&out)).for_each(|(&g, p)| conf.add(g, p)),
            Target::Normals(n) => angle += normal_angle_error(&out, n)?,
        }
    }
    let count = samples.len().max(1) as f64;
    Ok(EvalMetrics {
        samples: samples.len(),
        oa: conf.overall_accuracy(),
        macc: conf.mean_accuracy(),
        miou: conf.mean_iou(),
        normal_angle_error: (net.spec.task == Task::NormalEstimation).then_some(angle / count),
        loss: loss / count,
    })
}

pub const DENSITY_LEVELS: [usize; 5] = [1024, 512, 256, 128, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub perturbation: String,
    pub oa: f64,
    pub miou: f64,
    /// Percentage points relative to the clean evaluation.
    pub delta_oa_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: EvalMetrics,
    pub transforms: Vec<RobustnessRow>,
    /// `(points, OA)` in decreasing point count.
    pub density: Vec<(usize, f64)>,
    /// Levels whose OA exceeds the OA of the denser level before them.
    pub monotonicity_violations: Vec<usize>,
}

pub fn robustness(net: &Network, samples: &[Sample], seed: u64) -> Result<RobustnessReport> {
    let clean = evaluate(net, samples, &Perturbation::None, seed)?;
    let id = AugmentSpec::identity;
    let cases = [
        ("permutation", AugmentSpec::permutation()),
        ("translate +0.2", AugmentSpec { translate: [0.2; 3], ..id() }),
        ("translate -0.2", AugmentSpec { translate: [-0.2; 3], ..id() }),
        ("scale x0.8", AugmentSpec { scale: 0.8, ..id() }),
        ("scale x1.2", AugmentSpec { scale: 1.2, ..id() }),
        ("jitter", AugmentSpec { jitter_sigma: 0.01, jitter_clip: 0.05, ..id() }),
    ];
    let mut transforms = Vec::with_capacity(cases.len());
    for (name, spec) in cases {
        let m = evaluate(net, samples, &Perturbation::Augment(spec), seed)?;
        transforms.push(RobustnessRow {
            perturbation: name.into(),
            oa: m.oa,
            miou: m.miou,
            delta_oa_pp: 100.0 * (m.oa - clean.oa),
        });
    }
    let mut density = Vec::with_capacity(DENSITY_LEVELS.len());
    for &n in &DENSITY_LEVELS {
        density.push((n, evaluate(net, samples, &Perturbation::Density(n), seed)?.oa));
    }
    let monotonicity_violations = density.windows(2).filter(|w| w[1].1 > w[0].1).map(|w| w[1].0).collect();
    Ok(RobustnessReport {
        clean,
        transforms,
        density,
        monotonicity_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_dataset, DatasetKind, SyntheticDatasetSpec};
    use crate::network::{LayerKind, NetworkSpec};

    fn small() -> (Network, Vec<Sample>) {
        let spec = SyntheticDatasetSpec {
            points_per_cloud: 48,
            ..SyntheticDatasetSpec::new(DatasetKind::ShapesCls, 8, 4, 1)
        };
        let data = gen_dataset(&spec).unwrap();
        let ns = NetworkSpec {
            encoder_channels: vec![8, 8],
            middle_channels: vec![2, 2],
            k_neighbors: vec![8, 8],
            ..NetworkSpec::desk(Task::Classification, LayerKind::Fptransformer, 4)
        };
        (Network::build(&ns, &mut Rng::new(3)).unwrap(), data.train)
    }

    #[test]
    fn schedules() {
        let c = Schedule::Cosine { min_lr: 0.0 };
        assert_eq!(c.lr_at(1.0, 0, 10), 1.0);
        assert!((c.lr_at(1.0, 5, 10) - 0.5).abs() < 1e-12);
        let s = Schedule::Step { every: 2, gamma: 0.1 };
        assert!((s.lr_at(1.0, 4, 10) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mut net, data) = small();
        let before = net.to_bytes().unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let r = train(&mut net, &data, Some(&data), &cfg).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(net.to_bytes().unwrap(), before);
        assert_eq!(r.test.unwrap(), evaluate(&net, &data, &Perturbation::None, 0).unwrap());
    }

    #[test]
    fn one_step_lowers_the_loss() {
        let (mut net, data) = small();
        let batch = &data[..4];
        let before = evaluate(&net, batch, &Perturbation::None, 0).unwrap().loss;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.01,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        train(&mut net, batch, None, &cfg).unwrap();
        let after = evaluate(&net, batch, &Perturbation::None, 0).unwrap().loss;
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            augment: RandomAugment {
                permute: true,
                jitter_sigma: 0.01,
                ..RandomAugment::default()
            },
            ..TrainConfig::default()
        };
        let (mut a, data) = small();
        let (mut b, _) = small();
        train(&mut a, &data, None, &cfg).unwrap();
        train(&mut b, &data, None, &cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn identity_and_permutation_perturbations() {
        let (net, data) = small();
        let plain = evaluate(&net, &data, &Perturbation::None, 1).unwrap();
        let ident = evaluate(&net, &data, &Perturbation::Augment(AugmentSpec::identity()), 1).unwrap();
        assert_eq!(plain, ident);
        let perm = evaluate(&net, &data, &Perturbation::Augment(AugmentSpec::permutation()), 1).unwrap();
        assert_eq!(perm.oa, plain.oa);
        assert!((perm.loss - plain.loss).abs() <= 1e-9 * plain.loss.abs().max(1.0));
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let (mut net, _) = small();
        let spec = SyntheticDatasetSpec {
            points_per_cloud: 32,
            ..SyntheticDatasetSpec::new(DatasetKind::SphereNormals, 2, 1, 1)
        };
        let d = gen_dataset(&spec).unwrap();
        assert!(train(&mut net, &d.train, None, &TrainConfig::default()).is_err());
    }
}
