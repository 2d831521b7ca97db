//! Grid sweeps that train one toy model per cell and tabulate the results
//! with the column layout of the published ablation tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{gen_dataset, DatasetKind, SyntheticDatasetSpec};
use super::train::{train, MetricsReport, TrainConfig};
use crate::encoding::{EncoderKind, PositionVariant};
use crate::error::{validation_err, Error, Result};
use crate::network::{LayerKind, Network, NetworkSpec, SamplingBlock, Task};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    PositionEncoding,
    #[serde(alias = "c_mid")]
    CMid,
    Sigma,
    SamplingBlock,
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "position-encoding" | "pe" => Ok(Self::PositionEncoding),
            "c-mid" | "cmid" => Ok(Self::CMid),
            "sigma" => Ok(Self::Sigma),
            "sampling-block" | "sampling" => Ok(Self::SamplingBlock),
            other => validation_err("what", format!("unknown ablation `{other}`")),
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PositionEncoding => "position-encoding",
            Self::CMid => "c_mid",
            Self::Sigma => "sigma",
            Self::SamplingBlock => "sampling-block",
        })
    }
}

/// One sweep: the values to try for a single knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "what", content = "values", rename_all = "kebab-case")]
pub enum AblationGrid {
    PositionEncoding(Vec<(EncoderKind, PositionVariant)>),
    /// Per-stage middle channels; longer rows are truncated to the stage count.
    CMid(Vec<Vec<usize>>),
    Sigma(Vec<f64>),
    SamplingBlock(Vec<SamplingBlock>),
}

impl AblationGrid {
    pub fn kind(&self) -> AblationKind {
        match self {
            Self::PositionEncoding(_) => AblationKind::PositionEncoding,
            Self::CMid(_) => AblationKind::CMid,
            Self::Sigma(_) => AblationKind::Sigma,
            Self::SamplingBlock(_) => AblationKind::SamplingBlock,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::PositionEncoding(v) => v.len(),
            Self::CMid(v) => v.len(),
            Self::Sigma(v) => v.len(),
            Self::SamplingBlock(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The published grid for each sweep.
    pub fn standard(kind: AblationKind) -> Self {
        use EncoderKind::*;
        use PositionVariant::*;
        match kind {
            AblationKind::PositionEncoding => Self::PositionEncoding(vec![
                (Sinusoidal, Lpe),
                (Sinusoidal, Gpe),
                (Sinusoidal, Fpe),
                (LearnableMlp, Lpe),
                (LearnableMlp, Gpe),
                (LearnableMlp, Fpe),
            ]),
            AblationKind::CMid => Self::CMid(vec![vec![8, 16, 32, 64, 128], vec![4, 8, 16, 32, 64]]),
            AblationKind::Sigma => Self::Sigma(vec![0.8, 1.0, 1.2, 1.4, 1.6]),
            AblationKind::SamplingBlock => {
                Self::SamplingBlock(vec![SamplingBlock::Gds, SamplingBlock::Tds, SamplingBlock::Sads])
            }
        }
    }
}

/// Network, data and optimizer shared by every cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub network: NetworkSpec,
    pub data: SyntheticDatasetSpec,
    pub train: TrainConfig,
}

impl AblationConfig {
    /// Reduced CPU-sized base configuration for a sweep.
    pub fn desk(kind: AblationKind, seed: u64) -> Self {
        let (task, data_kind, layer) = match kind {
            // the influence coefficient only enters the convolution's weight function
            AblationKind::Sigma => (Task::Classification, DatasetKind::ShapesCls, LayerKind::Fpconv),
            _ => (Task::Segmentation, DatasetKind::SceneSeg, LayerKind::Fptransformer),
        };
        let mut network = NetworkSpec::desk(task, layer, 4);
        if kind == AblationKind::PositionEncoding {
            network.sampling_block = SamplingBlock::Tds;
        }
        let data = SyntheticDatasetSpec {
            points_per_cloud: 512,
            ..SyntheticDatasetSpec::new(data_kind, 80, 40, seed)
        };
        let train = TrainConfig {
            epochs: 8,
            seed,
            ..TrainConfig::default()
        };
        Self { network, data, train }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub network: NetworkSpec,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub what: AblationKind,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn encoder_name(e: EncoderKind) -> &'static str {
    match e {
        EncoderKind::LearnableMlp => "MLP",
        EncoderKind::Sinusoidal => "Sinusoidal",
    }
}

fn variant_name(v: PositionVariant) -> &'static str {
    match v {
        PositionVariant::Fpe => "FPE",
        PositionVariant::Lpe => "LPE",
        PositionVariant::Gpe => "GPE",
    }
}

fn block_name(b: SamplingBlock) -> &'static str {
    match b {
        SamplingBlock::Sads => "SADS",
        SamplingBlock::Tds => "TDS",
        SamplingBlock::Gds => "GDS",
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn signed(v: f64) -> String {
    format!("{v:+.1}")
}

/// Cell variants of the base network, with their row labels.
fn variants(grid: &AblationGrid, base: &NetworkSpec) -> Result<Vec<(String, NetworkSpec)>> {
    let stages = base.stages();
    let mut out = Vec::with_capacity(grid.len());
    match grid {
        AblationGrid::PositionEncoding(v) => {
            for &(enc, var) in v {
                let spec = NetworkSpec {
                    position_encoder: enc,
                    position_variant: var,
                    ..base.clone()
                };
                out.push((format!("{} {}", encoder_name(enc), variant_name(var)), spec));
            }
        }
        AblationGrid::CMid(rows) => {
            for row in rows {
                if row.len() < stages {
                    return validation_err("grid", format!("middle channel row {row:?} has fewer than {stages} entries"));
                }
                let spec = NetworkSpec {
                    middle_channels: row[..stages].to_vec(),
                    ..base.clone()
                };
                let label = format!("{:?}", spec.middle_channels);
                out.push((label, spec));
            }
        }
        AblationGrid::Sigma(v) => {
            for &sigma in v {
                out.push((format!("{sigma}"), NetworkSpec { sigma, ..base.clone() }));
            }
        }
        AblationGrid::SamplingBlock(v) => {
            for &b in v {
                let spec = NetworkSpec {
                    sampling_block: b,
                    ..base.clone()
                };
                out.push((block_name(b).to_string(), spec));
            }
        }
    }
    for (_, spec) in &out {
        spec.validate()?;
    }
    Ok(out)
}

/// Trains one model per grid cell on a shared dataset.
pub fn ablate(grid: &AblationGrid, config: &AblationConfig) -> Result<AblationTable> {
    if grid.is_empty() {
        return validation_err("grid", "at least one value is required");
    }
    config.train.validate()?;
    let cells_spec = variants(grid, &config.network)?;
    let data = gen_dataset(&config.data)?;
    let mut cells = Vec::with_capacity(cells_spec.len());
    for (label, spec) in cells_spec {
        let mut net = Network::build(&spec, &mut Rng::new(config.train.seed).fork(7))?;
        let report = train(&mut net, &data.train, Some(&data.test), &config.train)?;
        cells.push(AblationCell {
            label,
            network: spec,
            report,
        });
    }
    let test = |c: &AblationCell| c.report.test.clone().unwrap_or_default();
    let (headers, rows): (Vec<&str>, Vec<Vec<String>>) = match grid {
        AblationGrid::Sigma(_) => (
            vec!["sigma", "OA(%)"],
            cells.iter().map(|c| vec![c.label.clone(), pct(test(c).oa)]).collect(),
        ),
        AblationGrid::CMid(_) => (
            vec!["case", "C_m", "mIoU(%)", "mAcc(%)", "OA(%)", "Para."],
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let m = test(c);
                    vec![
                        (i + 1).to_string(),
                        c.label.clone(),
                        pct(m.miou),
                        pct(m.macc),
                        pct(m.oa),
                        c.report.param_count.to_string(),
                    ]
                })
                .collect(),
        ),
        AblationGrid::PositionEncoding(v) => (
            vec!["Encoder", "Strategy", "mIoU(%)"],
            cells
                .iter()
                .zip(v)
                .map(|(c, &(e, s))| vec![encoder_name(e).into(), variant_name(s).into(), pct(test(c).miou)])
                .collect(),
        ),
        AblationGrid::SamplingBlock(_) => {
            let base = test(&cells[0]);
            let base_params = cells[0].report.param_count as f64;
            let rows = cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let m = test(c);
                    let p = c.report.param_count as f64;
                    let delta = |v: String| if i == 0 { "--".to_string() } else { v };
                    vec![
                        c.label.clone(),
                        pct(m.miou),
                        delta(signed(100.0 * (m.miou - base.miou))),
                        pct(m.macc),
                        delta(signed(100.0 * (m.macc - base.macc))),
                        pct(m.oa),
                        delta(signed(100.0 * (m.oa - base.oa))),
                        c.report.param_count.to_string(),
                        delta(format!("{:+}", p - base_params)),
                    ]
                })
                .collect();
            (
                vec!["Sampling Block", "mIoU", "ΔmIoU", "mAcc", "ΔmAcc", "OA", "ΔOA", "Para", "ΔPara"],
                rows,
            )
        }
    };
    Ok(AblationTable {
        what: grid.kind(),
        headers: headers.into_iter().map(String::from).collect(),
        rows,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: AblationKind) -> AblationConfig {
        let mut c = AblationConfig::desk(kind, 2);
        c.data.points_per_cloud = 48;
        c.data.train_count = 4;
        c.data.test_count = 2;
        c.network.encoder_channels = vec![8, 16];
        c.network.k_neighbors = vec![8, 8];
        c.train.epochs = 1;
        c
    }

    #[test]
    fn single_cell_grid_gives_one_row() {
        let t = ablate(&AblationGrid::Sigma(vec![1.2]), &tiny(AblationKind::Sigma)).unwrap();
        assert_eq!(t.headers, ["sigma", "OA(%)"]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0][0], "1.2");
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("sigma,OA(%)\n1.2,"));
    }

    #[test]
    fn c_mid_rows_are_truncated_and_checked() {
        let cfg = tiny(AblationKind::CMid);
        let t = ablate(&AblationGrid::CMid(vec![vec![4, 8, 16], vec![8, 16]]), &cfg).unwrap();
        assert_eq!(t.headers, ["case", "C_m", "mIoU(%)", "mAcc(%)", "OA(%)", "Para."]);
        assert_eq!(t.rows[0][1], "[4, 8]");
        assert_eq!(t.rows[1][0], "2");
        assert!(ablate(&AblationGrid::CMid(vec![vec![4]]), &cfg).is_err());
        assert!(ablate(&AblationGrid::CMid(vec![vec![3, 8]]), &cfg).is_err());
    }

    #[test]
    fn sampling_block_table_has_deltas() {
        let t = ablate(&AblationGrid::standard(AblationKind::SamplingBlock), &tiny(AblationKind::SamplingBlock)).unwrap();
        assert_eq!(t.headers.len(), 9);
        assert_eq!(t.rows[0][2], "--");
        assert_eq!(t.rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["GDS", "TDS", "SADS"]);
        let p: Vec<i64> = t.rows.iter().map(|r| r[7].parse().unwrap()).collect();
        assert_eq!(t.rows[2][8], format!("{:+}", p[2] - p[0]));
    }

    #[test]
    fn schemas_are_stable_and_runs_deterministic() {
        let cfg = tiny(AblationKind::PositionEncoding);
        let g = AblationGrid::PositionEncoding(vec![(EncoderKind::Sinusoidal, PositionVariant::Gpe)]);
        let a = ablate(&g, &cfg).unwrap();
        let b = ablate(&g, &cfg).unwrap();
        assert_eq!(a.headers, ["Encoder", "Strategy", "mIoU(%)"]);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows[0][..2], ["Sinusoidal", "GPE"]);
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("c_mid".parse::<AblationKind>().unwrap(), AblationKind::CMid);
        assert_eq!("sampling-block".parse::<AblationKind>().unwrap(), AblationKind::SamplingBlock);
        assert!("bogus".parse::<AblationKind>().is_err());
        assert!(ablate(&AblationGrid::Sigma(vec![]), &tiny(AblationKind::Sigma)).is_err());
    }
}
