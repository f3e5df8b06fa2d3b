//! Experiment configuration: TOML file, defaults, and dotted-path
//! overrides. Precedence is flags > file > defaults; the CLI funnels every
//! flag through the same override mechanism.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmtb::{CmtbSwitches, StageConfig};
use crate::error::{Error, Result};
use crate::sgm::KlAxis;
use crate::tape::Profile;

/// λ presets from the sweep wired as named choices.
pub const LAMBDA_PRESETS: [f64; 4] = [1.0, 40.0, 60.0, 80.0];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// "train" (f32) or "test" (f64).
    pub profile: String,
    pub out_dir: String,
    /// 0 = leave the thread pool at its default size.
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sgm: SgmConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: String,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub ignore_border: usize,
    pub ignore_id: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<String>,
    pub modality_channels: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub patch_kernels: Vec<usize>,
    pub decode_dim: usize,
    pub share_branch_params: bool,
    pub attn_dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub poly_exponent: f64,
    pub weight_decay: f64,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SgmConfig {
    pub enabled: bool,
    pub lambda: f64,
    /// "random" or "cosine".
    pub pairing_mode: String,
    /// "channel" or "category".
    pub kl_axis: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// "learned" or "mean".
    pub sq_hub: String,
    pub cross_attention: bool,
    pub residual_add: bool,
    pub prototype: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            profile: "train".into(),
            out_dir: "runs/default".into(),
            threads: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sgm: SgmConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: "data/synth".into(),
            height: 64,
            width: 64,
            classes: 6,
            train_samples: 64,
            val_samples: 16,
            min_objects: 3,
            max_objects: 6,
            ignore_border: 0,
            ignore_id: 255,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: vec!["rgb".into(), "depth".into(), "event".into(), "lidar".into()],
            modality_channels: vec![3, 1, 1, 1],
            embed_dims: vec![16, 32, 64, 128],
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 4, 8],
            sr_ratios: vec![8, 4, 2, 1],
            patch_strides: vec![4, 2, 2, 2],
            patch_kernels: vec![7, 3, 3, 3],
            decode_dim: 32,
            share_branch_params: false,
            attn_dropout: 0.0,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 2000,
            batch_size: 4,
            lr: 6e-5,
            warmup_fraction: 0.05,
            poly_exponent: 0.9,
            weight_decay: 0.01,
            checkpoint_every: 500,
        }
    }
}

impl Default for SgmConfig {
    fn default() -> Self {
        SgmConfig {
            enabled: true,
            lambda: 60.0,
            pairing_mode: "random".into(),
            kl_axis: "channel".into(),
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            sq_hub: "learned".into(),
            cross_attention: true,
            residual_add: true,
            prototype: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.modalities.is_empty() {
            return Err(Error::Config("at least one modality required".into()));
        }
        if m.modalities.len() != m.modality_channels.len() {
            return Err(Error::Config(
                "modalities and modality_channels disagree in length".into(),
            ));
        }
        for arr in [&m.embed_dims, &m.depths, &m.heads, &m.sr_ratios, &m.patch_strides, &m.patch_kernels] {
            if arr.len() != 4 {
                return Err(Error::Config("stage arrays must have exactly 4 entries".into()));
            }
        }
        if self.data.classes < 2 {
            return Err(Error::Config("need at least 2 categories".into()));
        }
        if self.sgm.lambda < 0.0 {
            return Err(Error::Config("lambda must be ≥ 0".into()));
        }
        if !matches!(self.profile.as_str(), "train" | "test") {
            return Err(Error::Config(format!("unknown profile {:?}", self.profile)));
        }
        if !matches!(self.sgm.pairing_mode.as_str(), "random" | "cosine") {
            return Err(Error::Config(format!(
                "unknown pairing_mode {:?}",
                self.sgm.pairing_mode
            )));
        }
        if !matches!(self.sgm.kl_axis.as_str(), "channel" | "category") {
            return Err(Error::Config(format!("unknown kl_axis {:?}", self.sgm.kl_axis)));
        }
        if !matches!(self.ablation.sq_hub.as_str(), "learned" | "mean") {
            return Err(Error::Config(format!(
                "unknown sq_hub mode {:?}",
                self.ablation.sq_hub
            )));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.model.attn_dropout) {
            return Err(Error::Config("attn_dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn stage_configs(&self) -> Vec<StageConfig> {
        (0..4)
            .map(|i| StageConfig {
                embed_dim: self.model.embed_dims[i],
                depth: self.model.depths[i],
                heads: self.model.heads[i],
                sr: self.model.sr_ratios[i],
                patch_stride: self.model.patch_strides[i],
                patch_kernel: self.model.patch_kernels[i],
            })
            .collect()
    }

    pub fn runtime_profile(&self) -> Profile {
        if self.profile == "test" {
            Profile::Test
        } else {
            Profile::Train
        }
    }

    pub fn cmtb_switches(&self) -> CmtbSwitches {
        CmtbSwitches {
            mean_hub: self.ablation.sq_hub == "mean",
            cross_attention: self.ablation.cross_attention,
            residual_add: self.ablation.residual_add,
        }
    }

    pub fn kl_axis(&self) -> KlAxis {
        if self.sgm.kl_axis == "category" {
            KlAxis::Category
        } else {
            KlAxis::Channel
        }
    }

    /// One-line switch summary printed into every report and metrics log.
    pub fn provenance(&self) -> String {
        format!(
            "seed={} profile={} sgm={} lambda={} pairing={} kl_axis={} sq_hub={} cross_attention={} residual_add={} prototype={} share_branch_params={}",
            self.seed,
            self.profile,
            if self.sgm.enabled { "on" } else { "off" },
            self.sgm.lambda,
            self.sgm.pairing_mode,
            self.sgm.kl_axis,
            self.ablation.sq_hub,
            on_off(self.ablation.cross_attention),
            on_off(self.ablation.residual_add),
            on_off(self.ablation.prototype),
            on_off(self.model.share_branch_params),
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

/// Apply `key=value` overrides (dotted paths) on top of a config. Values
/// parse as TOML fragments, falling back to bare strings.
pub fn apply_overrides(base: &ExperimentConfig, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(base.clone());
    }
    let text = base.to_toml()?;
    let mut root: toml::Value =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config reserialize: {e}")))?;
    for (key, raw) in overrides {
        let value = parse_fragment(raw);
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split produces ≥ 1 part");
        let mut cursor = &mut root;
        for part in path {
            cursor = cursor
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: not a table")))?;
        if !table.contains_key(*last) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        table.insert((*last).to_string(), value);
    }
    let merged: ExperimentConfig = root
        .try_into()
        .map_err(|e| Error::Config(format!("override produced invalid config: {e}")))?;
    merged.validate()?;
    Ok(merged)
}

fn parse_fragment(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(table) = doc.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
