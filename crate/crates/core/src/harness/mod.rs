//! Synthetic data, training, evaluation, verification and ablation drivers.

pub mod ablate;
pub mod data;
pub mod metrics;
pub mod train;
pub mod verify;

pub use data::{gen_dataset, load_dataset, save_dataset, Dataset, DatasetKind, Sample, SyntheticDatasetSpec};
pub use verify::{verify_gradients, verify_lemmas, GradientReport, LemmaReport};
pub use metrics::{mean_iou, ClassCounts, Confusion};
pub use ablate::{ablate, AblationConfig, AblationGrid, AblationKind, AblationTable};
pub use train::{evaluate, robustness, train, EvalMetrics, MetricsReport, Perturbation, RobustnessReport, Schedule, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::network::NetworkSpec;

/// Contents of a `--config` file. Every section is optional; missing
/// sections fall back to the command's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    #[serde(default)]
    pub data: Option<SyntheticDatasetSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> crate::Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::Schema(format!("config: {e}")))
    }
}
