//! Declarative U-Net style network over the point layers.
//!
//! Stage 0 runs a pointwise MLP stem then `block_depths[0]` aggregation
//! layers at full resolution; every later stage starts with a sampling block.
//! Classification max-pools the last stage into a 2-layer head. Dense tasks
//! decode stage by stage: interpolate, concatenate the skip, reduce with a
//! linear map, then `decoder_depth` layers.
//!
//! Geometry (neighborhoods, samples, interpolation stencils, correlations)
//! depends only on positions and is built once per cloud by
//! [`Network::geometry`].

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    downsample_geometry, gds_forward, interpolate, mlp_baseline_layer, sads_forward, tds_forward, upsample_geometry,
    DownsampleGeometry, SadsParams, TdsParams, UpsampleGeometry,
};
use crate::cloud::{knn_self, NeighborIndex, PointCloud};
use crate::encoding::{global_correlation, local_correlation, EncoderKind, LocalCorrelation, PositionEncodingParams, PositionVariant};
use crate::error::{validation_err, Error, Result};
use crate::fpconv::{fpconv_forward_efficient, Aggregator, FPConvParams};
use crate::fptransformer::FPTransformerBlock;
use crate::nn::{Linear, Mlp, ParamStore, Session};
use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Segmentation,
    NormalEstimation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Fpconv,
    Fptransformer,
    MlpBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingBlock {
    #[serde(alias = "SADS")]
    Sads,
    #[serde(alias = "TDS")]
    Tds,
    #[serde(alias = "GDS")]
    Gds,
}

fn default_in_channels() -> usize {
    3
}

fn default_decoder_depth() -> usize {
    1
}

fn default_upsample_neighbors() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub task: Task,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub middle_channels: Vec<usize>,
    pub block_depths: Vec<usize>,
    pub sampling_ratios: Vec<usize>,
    pub k_neighbors: Vec<usize>,
    pub layer_kind: LayerKind,
    pub sampling_block: SamplingBlock,
    pub sigma: f64,
    /// Classes for classification/segmentation; forced to 3 for normals.
    pub num_classes: usize,
    /// Number of stages; defaults to 5.
    #[serde(default)]
    pub stage_count: Option<usize>,
    #[serde(default = "default_variant")]
    pub position_variant: PositionVariant,
    #[serde(default = "default_encoder")]
    pub position_encoder: EncoderKind,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default = "default_decoder_depth")]
    pub decoder_depth: usize,
    #[serde(default = "default_upsample_neighbors")]
    pub upsample_neighbors: usize,
}

fn default_variant() -> PositionVariant {
    PositionVariant::Fpe
}

fn default_encoder() -> EncoderKind {
    EncoderKind::LearnableMlp
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            in_channels: 3,
            encoder_channels: vec![32, 64, 128, 256, 512],
            middle_channels: vec![4, 8, 16, 32, 64],
            block_depths: vec![1, 2, 2, 6, 2],
            sampling_ratios: vec![1, 4, 4, 4, 4],
            k_neighbors: vec![16; 5],
            layer_kind: LayerKind::Fptransformer,
            sampling_block: SamplingBlock::Sads,
            sigma: 1.2,
            num_classes: 40,
            stage_count: None,
            position_variant: PositionVariant::Fpe,
            position_encoder: EncoderKind::LearnableMlp,
            aggregator: Aggregator::Max,
            decoder_depth: 1,
            upsample_neighbors: 3,
        }
    }
}

impl NetworkSpec {
    /// Two-stage configuration sized for CPU experiments.
    pub fn desk(task: Task, layer_kind: LayerKind, num_classes: usize) -> Self {
        Self {
            task,
            encoder_channels: vec![16, 32],
            middle_channels: vec![4, 8],
            block_depths: vec![1, 1],
            sampling_ratios: vec![1, 4],
            k_neighbors: vec![16, 16],
            layer_kind,
            num_classes,
            stage_count: Some(2),
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_count.unwrap_or(5)
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::NormalEstimation => 3,
            _ => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return validation_err("stage_count", "at least one stage is required");
        }
        for (field, list) in [
            ("encoder_channels", &self.encoder_channels),
            ("middle_channels", &self.middle_channels),
            ("block_depths", &self.block_depths),
            ("sampling_ratios", &self.sampling_ratios),
            ("k_neighbors", &self.k_neighbors),
        ] {
            if list.len() != s {
                return validation_err(field, format!("has {} entries for {s} stages", list.len()));
            }
        }
        if self.in_channels == 0 {
            return validation_err("in_channels", "must be at least 1");
        }
        if self.encoder_channels.contains(&0) {
            return validation_err("encoder_channels", "channels must be positive");
        }
        if self.encoder_channels.windows(2).any(|w| w[1] < w[0]) {
            return validation_err("encoder_channels", "channels must be non-decreasing");
        }
        for (i, (&c, &m)) in self.encoder_channels.iter().zip(&self.middle_channels).enumerate() {
            if m == 0 || m > c {
                return validation_err("middle_channels", format!("stage {i}: {m} must be in 1..={c}"));
            }
            if self.layer_kind == LayerKind::Fptransformer && c % m != 0 {
                return validation_err("middle_channels", format!("stage {i}: {m} does not divide {c}"));
            }
        }
        if self.sampling_ratios[0] != 1 {
            return validation_err("sampling_ratios", "the first stage runs at full resolution (ratio 1)");
        }
        if self.sampling_ratios.contains(&0) {
            return validation_err("sampling_ratios", "ratios must be at least 1");
        }
        if self.k_neighbors.contains(&0) {
            return validation_err("k_neighbors", "neighbor counts must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return validation_err("sigma", format!("must be positive, got {}", self.sigma));
        }
        if self.task != Task::NormalEstimation && self.num_classes < 1 {
            return validation_err("num_classes", "must be at least 1");
        }
        if self.upsample_neighbors == 0 {
            return validation_err("upsample_neighbors", "must be at least 1");
        }
        Ok(())
    }
}

/// Residual point-mixing layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Transformer(FPTransformerBlock),
    /// `x + post(fpconv(pre(x)))`.
    Conv { pre: Linear, conv: FPConvParams, post: Linear },
    /// `x + max_j MLP(f_ij)`.
    Mlp(Mlp),
}

impl Layer {
    fn new(store: &mut ParamStore, name: &str, spec: &NetworkSpec, c: usize, cm: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match spec.layer_kind {
            LayerKind::Fptransformer => Layer::Transformer(FPTransformerBlock::with_encoding(
                store,
                name,
                c,
                cm,
                spec.position_variant,
                spec.position_encoder,
                rng,
            )?),
            LayerKind::Fpconv => Layer::Conv {
                pre: Linear::new(store, &format!("{name}.pre"), c, c, rng),
                conv: FPConvParams::new(store, &format!("{name}.conv"), c, cm, c, spec.sigma, rng)?
                    .with_aggregator(spec.aggregator),
                post: Linear::new(store, &format!("{name}.post"), c, c, rng),
            },
            LayerKind::MlpBaseline => Layer::Mlp(Mlp::new(store, &format!("{name}.mlp"), &[c, c, c], rng)),
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>, g: &StageGeometry) -> Result<Var<'t>> {
        match self {
            Layer::Transformer(b) => b.forward(s, x, &g.positions, &g.nbr),
            Layer::Conv { pre, conv, post } => {
                let local = g
                    .local
                    .as_ref()
                    .ok_or_else(|| Error::Contract("geometry lacks local correlations".into()))?;
                let h = pre.forward(s, x)?.relu();
                let h = fpconv_forward_efficient(s, h, local, &g.nbr, conv)?;
                x.add(post.forward(s, h.relu())?)
            }
            Layer::Mlp(mlp) => x.add(mlp_baseline_layer(s, x, &g.nbr, mlp)?),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Downsample {
    Sads(SadsParams),
    Tds(TdsParams),
    /// Parameter-free pooling followed by a pointwise width change.
    Gds { proj: Linear },
}

impl Downsample {
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>, src: &Tensor, g: &DownsampleGeometry) -> Result<Var<'t>> {
        match self {
            Downsample::Sads(p) => sads_forward(s, x, src, g, p),
            Downsample::Tds(p) => tds_forward(s, x, g, p),
            Downsample::Gds { proj } => Ok(proj.forward(s, gds_forward(x, g)?)?.relu()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Option<Downsample>,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    /// `[C_{s+1} + C_s] -> C_s`.
    pub fuse: Linear,
    pub layers: Vec<Layer>,
}

/// Position-only data of one resolution level.
#[derive(Debug, Clone)]
pub struct StageGeometry {
    pub positions: Tensor,
    pub nbr: NeighborIndex,
    pub local: Option<LocalCorrelation>,
    /// How this level was sampled from the previous one.
    pub down: Option<DownsampleGeometry>,
    /// Interpolation from this level back to the previous one.
    pub up: Option<UpsampleGeometry>,
}

#[derive(Debug, Clone)]
pub struct Geometry {
    pub stages: Vec<StageGeometry>,
}

/// What a loss compares the network output against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Labels(&'a [usize]),
    Normals(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub stem: Mlp,
    pub stages: Vec<Stage>,
    /// `decoder[s]` lifts stage `s + 1` to stage `s`; empty for classification.
    pub decoder: Vec<DecoderStage>,
    pub head: Mlp,
}

fn stage_kind_layers(
    store: &mut ParamStore,
    prefix: &str,
    spec: &NetworkSpec,
    depth: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<Vec<Layer>> {
    let (c, cm) = (spec.encoder_channels[s], spec.middle_channels[s]);
    (0..depth)
        .map(|l| Layer::new(store, &format!("{prefix}.layer{l}"), spec, c, cm, rng))
        .collect()
}

impl Network {
    pub fn build(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let ch = &spec.encoder_channels;
        let stem = Mlp::new(&mut store, "stem", &[spec.in_channels, ch[0], ch[0]], rng);
        let mut stages = Vec::with_capacity(spec.stages());
        for s in 0..spec.stages() {
            let name = format!("enc{s}");
            let down = if s == 0 {
                None
            } else {
                let (cin, cout, k, r) = (ch[s - 1], ch[s], spec.k_neighbors[s], spec.sampling_ratios[s]);
                let dname = format!("{name}.down");
                Some(match spec.sampling_block {
                    SamplingBlock::Sads => Downsample::Sads(SadsParams::with_encoding(
                        &mut store,
                        &dname,
                        cin,
                        cout,
                        k,
                        r,
                        rng,
                        |st, n, c, r| PositionEncodingParams::new(st, n, c, spec.position_variant, spec.position_encoder, r),
                    )?),
                    SamplingBlock::Tds => Downsample::Tds(TdsParams::new(&mut store, &dname, cin, cout, k, r, rng)?),
                    SamplingBlock::Gds => Downsample::Gds {
                        proj: Linear::new(&mut store, &format!("{dname}.proj"), cin, cout, rng),
                    },
                })
            };
            let layers = stage_kind_layers(&mut store, &name, spec, spec.block_depths[s], s, rng)?;
            stages.push(Stage { down, layers });
        }
        let mut decoder = Vec::new();
        let out = spec.output_dim();
        let head = if spec.task == Task::Classification {
            let c = *ch.last().unwrap();
            Mlp::new(&mut store, "head", &[c, c, out], rng)
        } else {
            for s in 0..spec.stages() - 1 {
                let name = format!("dec{s}");
                let fuse = Linear::new(&mut store, &format!("{name}.fuse"), ch[s + 1] + ch[s], ch[s], rng);
                let layers = stage_kind_layers(&mut store, &name, spec, spec.decoder_depth, s, rng)?;
                decoder.push(DecoderStage { fuse, layers });
            }
            Mlp::new(&mut store, "head", &[ch[0], ch[0], out], rng)
        };
        Ok(Self {
            spec: spec.clone(),
            store,
            stem,
            stages,
            decoder,
            head,
        })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn encoder_layer_count(&self) -> usize {
        self.stages.iter().map(|s| s.layers.len()).sum()
    }

    /// Neighbor counts are clamped to the points available at each level.
    pub fn geometry(&self, positions: &Tensor) -> Result<Geometry> {
        let spec = &self.spec;
        let dense = spec.task != Task::Classification;
        let mut stages: Vec<StageGeometry> = Vec::with_capacity(spec.stages());
        for s in 0..spec.stages() {
            let (pos, down, up) = if s == 0 {
                (positions.clone(), None, None)
            } else {
                let prev = &stages[s - 1].positions;
                let k = spec.k_neighbors[s].min(prev.shape()[0]);
                let d = downsample_geometry(prev, spec.sampling_ratios[s], k)?;
                let up = if dense {
                    Some(upsample_geometry(&d.positions, prev, spec.upsample_neighbors)?)
                } else {
                    None
                };
                (d.positions.clone(), Some(d), up)
            };
            let n = pos.shape()[0];
            let nbr = knn_self(&pos, spec.k_neighbors[s].min(n), true)?;
            let local = if spec.layer_kind == LayerKind::Fpconv {
                let s1 = global_correlation(&pos, spec.sigma)?;
                Some(local_correlation(&pos, &nbr, &s1)?)
            } else {
                None
            };
            stages.push(StageGeometry {
                positions: pos,
                nbr,
                local,
                down,
                up,
            });
        }
        Ok(Geometry { stages })
    }

    /// Input features of a cloud: its feature matrix when the width matches,
    /// otherwise its positions for 3-channel networks.
    pub fn input_features(&self, cloud: &PointCloud) -> Result<Tensor> {
        match cloud.features() {
            Some(f) if cloud.feature_dim() == self.spec.in_channels => Ok(f.clone()),
            _ if self.spec.in_channels == 3 => Ok(cloud.positions().clone()),
            _ => Err(Error::Contract(format!(
                "cloud has {} feature channels, network expects {}",
                cloud.feature_dim(),
                self.spec.in_channels
            ))),
        }
    }

    /// Classification: `[1, classes]` logits. Segmentation: `[N, classes]`.
    /// Normals: `[N, 3]` unit vectors.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, geom: &Geometry, features: Var<'t>) -> Result<Var<'t>> {
        let n = geom.stages[0].positions.shape()[0];
        if features.shape() != [n, self.spec.in_channels] {
            return Err(Error::Contract(format!(
                "features {:?}, expected [{n}, {}]",
                features.shape(),
                self.spec.in_channels
            )));
        }
        let mut x = self.stem.forward(s, features)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate() {
            let g = &geom.stages[si];
            if let Some(down) = &stage.down {
                let dg = g.down.as_ref().expect("sampled level");
                x = down.forward(s, x, &geom.stages[si - 1].positions, dg)?;
            }
            for layer in &stage.layers {
                x = layer.forward(s, x, g)?;
            }
            skips.push(x);
        }
        let out = match self.spec.task {
            Task::Classification => {
                let c = *self.spec.encoder_channels.last().unwrap();
                let pooled = x.max(0)?.reshape(&[1, c])?;
                self.head.forward(s, pooled)?
            }
            Task::Segmentation | Task::NormalEstimation => {
                for si in (0..self.decoder.len()).rev() {
                    let dec = &self.decoder[si];
                    let up = geom.stages[si + 1].up.as_ref().expect("dense geometry");
                    let lifted = interpolate(x, up)?;
                    x = dec.fuse.forward(s, Var::concat(&[lifted, skips[si]], 1)?)?.relu();
                    for layer in &dec.layers {
                        x = layer.forward(s, x, &geom.stages[si])?;
                    }
                }
                let y = self.head.forward(s, x)?;
                if self.spec.task == Task::NormalEstimation {
                    y.l2_normalize()?
                } else {
                    y
                }
            }
        };
        out.check_finite("network output")
    }

    /// Cross-entropy for labels, mean `1 - |cos|` for normals.
    pub fn loss<'t>(&self, out: Var<'t>, target: Target<'_>) -> Result<Var<'t>> {
        match (self.spec.task, target) {
            (Task::Classification, Target::Class(c)) => out.cross_entropy(&[c]),
            (Task::Segmentation, Target::Labels(l)) => out.cross_entropy(l),
            (Task::NormalEstimation, Target::Normals(gt)) => {
                let cos = out.mul(out.tape().constant(gt.clone()))?.sum(1)?.abs();
                Ok(cos.mean_all().neg().add_scalar(1.0))
            }
            (task, _) => Err(Error::Contract(format!("target does not match task {task:?}"))),
        }
    }

    /// Inference pass without gradient tracking.
    pub fn predict_with(&self, geom: &Geometry, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let s = Session::inference(&tape, &self.store);
        Ok(self.forward(&s, geom, tape.constant(features.clone()))?.to_tensor())
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<Tensor> {
        let geom = self.geometry(cloud.positions())?;
        self.predict_with(&geom, &self.input_features(cloud)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut offset = 0usize;
        for (name, t) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 8;
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let schema = |m: &str| Error::Schema(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(schema("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| schema("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(schema(&format!("unsupported format {} v{}", header.format, header.version)));
        }
        let payload = &bytes[body..];
        let mut net = Network::build(&header.spec, &mut Rng::new(0))?;
        if header.tensors.len() != net.store.len() {
            return Err(schema(&format!(
                "{} tensors stored, spec needs {}",
                header.tensors.len(),
                net.store.len()
            )));
        }
        for e in &header.tensors {
            let id = net.store.find(&e.name).ok_or_else(|| schema(&format!("unknown tensor `{}`", e.name)))?;
            let len: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + len * 8)
                .ok_or_else(|| schema(&format!("tensor `{}` runs past the payload", e.name)))?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            net.store.set(id, &Tensor::new(&e.shape, data)?)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FPNETCK\0";
const CHECKPOINT_FORMAT: &str = "fullpoint-network";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the header.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_coords;

    fn tiny(task: Task, kind: LayerKind) -> NetworkSpec {
        NetworkSpec {
            encoder_channels: vec![8, 8],
            middle_channels: vec![2, 4],
            k_neighbors: vec![6, 6],
            ..NetworkSpec::desk(task, kind, 4)
        }
    }

    fn cloud(n: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[n, 3], 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn paper_depths_give_thirteen_encoder_layers() {
        let spec = NetworkSpec {
            encoder_channels: vec![8, 8, 8, 8, 8],
            middle_channels: vec![2, 2, 2, 2, 2],
            ..NetworkSpec::default()
        };
        let net = Network::build(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.encoder_layer_count(), 13);
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = NetworkSpec::default();
        spec.block_depths.pop();
        match spec.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "block_depths"),
            other => panic!("{other:?}"),
        }
        let spec = NetworkSpec {
            encoder_channels: vec![64, 32, 128, 256, 512],
            ..NetworkSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Validation { field, .. }) if field == "encoder_channels"));
        let spec = NetworkSpec {
            middle_channels: vec![3, 8, 16, 32, 64],
            ..NetworkSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Validation { field, .. }) if field == "middle_channels"));
    }

    #[test]
    fn output_shapes() {
        let pos = cloud(40, 1);
        for kind in [LayerKind::Fptransformer, LayerKind::Fpconv, LayerKind::MlpBaseline] {
            for (task, shape) in [
                (Task::Classification, vec![1, 4]),
                (Task::Segmentation, vec![40, 4]),
                (Task::NormalEstimation, vec![40, 3]),
            ] {
                let net = Network::build(&tiny(task, kind), &mut Rng::new(1)).unwrap();
                let geom = net.geometry(&pos).unwrap();
                let out = net.predict_with(&geom, &pos).unwrap();
                assert_eq!(out.shape(), shape.as_slice(), "{kind:?} {task:?}");
                if task == Task::NormalEstimation {
                    for r in out.data().chunks(3) {
                        assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn param_count_is_a_function_of_spec() {
        let spec = tiny(Task::Segmentation, LayerKind::Fptransformer);
        let a = Network::build(&spec, &mut Rng::new(1)).unwrap();
        let b = Network::build(&spec, &mut Rng::new(2)).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn sampling_blocks_build_and_run() {
        let pos = cloud(32, 3);
        for block in [SamplingBlock::Sads, SamplingBlock::Tds, SamplingBlock::Gds] {
            let spec = NetworkSpec {
                sampling_block: block,
                ..tiny(Task::Classification, LayerKind::Fptransformer)
            };
            let net = Network::build(&spec, &mut Rng::new(1)).unwrap();
            let out = net.predict_with(&net.geometry(&pos).unwrap(), &pos).unwrap();
            assert_eq!(out.shape(), &[1, 4]);
        }
    }

    #[test]
    fn classification_is_permutation_invariant() {
        let pos = cloud(64, 4);
        for kind in [LayerKind::Fptransformer, LayerKind::Fpconv] {
            let net = Network::build(&tiny(Task::Classification, kind), &mut Rng::new(2)).unwrap();
            let a = net.predict_with(&net.geometry(&pos).unwrap(), &pos).unwrap();
            let perm = Rng::new(9).permutation(64);
            let p = Tensor::new(&[64, 3], perm.iter().flat_map(|&i| pos.row(i).to_vec()).collect()).unwrap();
            let b = net.predict_with(&net.geometry(&p).unwrap(), &p).unwrap();
            assert!(b.max_rel_diff(&a) <= 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = tiny(Task::Segmentation, LayerKind::Fpconv);
        let net = Network::build(&spec, &mut Rng::new(5)).unwrap();
        let bytes = net.to_bytes().unwrap();
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back.spec, net.spec);
        for ((n1, t1), (n2, t2)) in net.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let pos = cloud(30, 6);
        let g = net.geometry(&pos).unwrap();
        let a = net.predict_with(&g, &pos).unwrap();
        let b = back.predict_with(&g, &pos).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(Network::from_bytes(&bytes[..20]).is_err());
        assert!(Network::from_bytes(b"not a checkpoint at all").is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        let pos = cloud(64, 7);
        let feats = Tensor::uniform(&[64, 3], 1.0, &mut Rng::new(70));
        for task in [Task::Classification, Task::Segmentation] {
            let net = Network::build(&tiny(task, LayerKind::Fptransformer), &mut Rng::new(8)).unwrap();
            let geom = net.geometry(&pos).unwrap();
            let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
            let coords: Vec<usize> = (0..64 * 3).step_by(7).collect();
            let r = grad_check_coords(
                |tape, x| {
                    let s = Session::new(tape, &net.store);
                    let out = net.forward(&s, &geom, x)?;
                    match task {
                        Task::Classification => net.loss(out, Target::Class(2)),
                        _ => net.loss(out, Target::Labels(&labels)),
                    }
                },
                &feats,
                1e-6,
                &coords,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "{task:?}: {r:?}");
        }
    }

    #[test]
    fn normal_loss_ignores_sign() {
        let net = Network::build(&tiny(Task::NormalEstimation, LayerKind::MlpBaseline), &mut Rng::new(1)).unwrap();
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0]).unwrap());
        let gt = Tensor::new(&[2, 3], vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(net.loss(pred, Target::Normals(&gt)).unwrap().value().item(), 0.0);
    }
}
