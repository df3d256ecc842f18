//! Training configuration and the variant grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Variant};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Ablation variants. `Baseline` trains a single modality on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    Baseline,
    JointV1,
    JointV2,
    JointV3,
    JointV3Cr,
    V1Cr,
    V2Cr,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 7] = [
        TrainVariant::Baseline,
        TrainVariant::JointV1,
        TrainVariant::JointV2,
        TrainVariant::JointV3,
        TrainVariant::V1Cr,
        TrainVariant::V2Cr,
        TrainVariant::JointV3Cr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TrainVariant::Baseline => "baseline",
            TrainVariant::JointV1 => "joint-v1",
            TrainVariant::JointV2 => "joint-v2",
            TrainVariant::JointV3 => "joint-v3",
            TrainVariant::JointV3Cr => "joint-v3-cr",
            TrainVariant::V1Cr => "v1-cr",
            TrainVariant::V2Cr => "v2-cr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    pub fn architecture(self) -> Variant {
        match self {
            TrainVariant::JointV1 | TrainVariant::V1Cr => Variant::V1,
            TrainVariant::Baseline | TrainVariant::JointV2 | TrainVariant::V2Cr => Variant::V2,
            TrainVariant::JointV3 | TrainVariant::JointV3Cr => Variant::V3,
        }
    }

    pub fn uses_consistency(self) -> bool {
        matches!(self, TrainVariant::JointV3Cr | TrainVariant::V1Cr | TrainVariant::V2Cr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub losses: LossWeights,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    /// Images per modality per step.
    pub batch_size: usize,
    pub seed: u64,
    pub variant: TrainVariant,
    /// Training samples used per dataset modality (first `k` of the train
    /// split); absent means all.
    pub few_shot: Option<Vec<usize>>,
    /// Dataset modality trained by the baseline.
    pub baseline_modality: String,
    pub data_dir: PathBuf,
    /// Per-step loss CSV.
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            losses: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            batch_size: 4,
            seed: 0,
            variant: TrainVariant::JointV3Cr,
            few_shot: None,
            baseline_modality: "B".into(),
            data_dir: PathBuf::from("data"),
            log_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::config(format!("invalid optimizer settings {o:?}")));
        }
        self.model_config().validate()
    }

    /// Backbone configuration implied by the variant: architecture, number
    /// of modality slots.
    pub fn model_config(&self) -> BackboneConfig {
        let mut b = self.backbone.clone();
        b.variant = self.variant.architecture();
        if self.variant == TrainVariant::Baseline {
            b.modalities = 1;
        }
        b
    }

    /// Loss weights with the consistency terms disabled for non-CR variants
    /// and the single-modality baseline.
    pub fn effective_losses(&self) -> LossWeights {
        let mut w = self.losses.clone();
        if !self.variant.uses_consistency() || self.variant == TrainVariant::Baseline {
            w.beta = 0.0;
            w.gamma = 0.0;
        }
        w
    }
}
