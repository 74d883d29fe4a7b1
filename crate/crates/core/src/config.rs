//! Run configuration: one JSON document with a published schema. Unknown
//! keys are rejected; every field has a default so partial configs stay
//! valid.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::datagen::StreamSpec;
use crate::error::{DrlError, Result};
use crate::ipa::{default_bottleneck, AttentionMode, FusionMode, ReuseCollapse, StageArch};
use crate::optim::OptimizerConfig;
use crate::rng::derive;
use crate::supervision::{DasConfig, SupervisionConfig};

pub const SEED_ENV: &str = "DRL_SEED";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub stream: StreamSpec,
    pub fusion_mode: FusionMode,
    pub attention_mode: AttentionMode,
    pub collapse: ReuseCollapse,
    pub supervision: SupervisionConfig,
    /// Feature retention ratio of the gate input blend.
    pub gamma: f64,
    /// Adapter bottleneck width; defaults to `min(48, d/2)`.
    pub adapter_dim: Option<usize>,
    /// Softmax temperature of old-prototype synthesis.
    pub tau: f64,
    pub optimizer: OptimizerConfig,
    pub pretrain: OptimizerConfig,
    pub seed: u64,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            stream: StreamSpec::default(),
            fusion_mode: FusionMode::GateAdapt,
            attention_mode: AttentionMode::RAtt,
            collapse: ReuseCollapse::HeadMean,
            supervision: SupervisionConfig::default(),
            gamma: 0.9,
            adapter_dim: None,
            tau: 0.1,
            optimizer: OptimizerConfig::default(),
            pretrain: OptimizerConfig {
                epochs: 30,
                ..OptimizerConfig::default()
            },
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Named preset configurations.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            // training-details weighting
            "drl-default" => Ok(RunConfig::default()),
            // the weighting the loss-weight sweep ranks best
            "drl-table-best" => {
                let mut cfg = RunConfig::default();
                cfg.supervision.das = DasConfig {
                    lambda_pos: 1.0,
                    lambda_neg: 2.0,
                    ..DasConfig::default()
                };
                Ok(cfg)
            }
            other => Err(DrlError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["drl-default", "drl-table-best"]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| DrlError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DrlError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies the `DRL_SEED` environment override, if set.
    pub fn apply_env_override(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .parse()
                .map_err(|_| DrlError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
            self.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.stream.validate()?;
        self.optimizer.validate()?;
        self.pretrain.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(DrlError::Config(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.tau <= 0.0 {
            return Err(DrlError::Config("tau must be positive".into()));
        }
        if self.supervision.alpha < 0.0 {
            return Err(DrlError::Config("alpha must be nonnegative".into()));
        }
        self.supervision.das.anchors()?;
        let d = self.backbone.embed_dim;
        let r = self.bottleneck();
        if r == 0 || r >= d {
            return Err(DrlError::Config(format!(
                "adapter_dim {r} must satisfy 0 < r < embed_dim {d}"
            )));
        }
        if self.stream.image_side != self.backbone.image_side {
            return Err(DrlError::Config(format!(
                "stream image_side {} != backbone image_side {}",
                self.stream.image_side, self.backbone.image_side
            )));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.adapter_dim
            .unwrap_or_else(|| default_bottleneck(self.backbone.embed_dim))
    }

    pub fn arch(&self) -> StageArch {
        StageArch {
            fusion_mode: self.fusion_mode,
            attention_mode: self.attention_mode,
            collapse: self.collapse,
            gamma: self.gamma,
            bottleneck: self.bottleneck(),
        }
    }

    /// Stream spec with the data seed resolved from the run seed when the
    /// config leaves it open.
    pub fn resolved_stream(&self) -> StreamSpec {
        let mut s = self.stream.clone();
        if s.seed.is_none() {
            s.seed = Some(derive(self.seed, "data", 0));
        }
        s
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}
