//! Run configuration: nested JSON sections for the generator, fusion,
//! model, training, and evaluation. Unknown keys are rejected and every
//! default is documented on the field it belongs to.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::KalmanConfig;
use crate::synth::WorldConfig;
use crate::{Error, Result};

/// Which argument of past-time attention acts as the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtaQuery {
    Current,
    Past,
}

/// Input-fusion regime for the pipeline. `Kf` is the Hungarian+Kalman early
/// fusion; the intermediate variants merge per-view embeddings instead and
/// exist as ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    Kf,
    None,
    IntermediateAdd,
    IntermediateConcat,
}

impl FusionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Kf => "kf",
            FusionVariant::None => "none",
            FusionVariant::IntermediateAdd => "intermediate-add",
            FusionVariant::IntermediateConcat => "intermediate-concat",
        }
    }
}

/// Which observation views feed the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    Cooperative,
    VehicleOnly,
    InfraOnly,
}

impl ViewMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewMode::Cooperative => "cooperative",
            ViewMode::VehicleOnly => "vehicle-only",
            ViewMode::InfraOnly => "infra-only",
        }
    }
}

/// Regression-loss treatment of mode scores: hard winner-take-all or a
/// score-weighted mixture over all modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    Wta,
    Mixture,
}

fn default_hidden_dim() -> usize {
    64
}
fn default_num_gat_layers() -> usize {
    2
}
fn default_num_heads() -> usize {
    8
}
fn default_k_p() -> usize {
    10
}
fn default_radius_vehicle() -> f64 {
    50.0
}
fn default_radius_pedestrian() -> f64 {
    20.0
}
fn default_num_modes() -> usize {
    6
}
fn default_mode_attn_heads() -> usize {
    4
}
fn default_num_anchors() -> usize {
    2
}
fn default_mixer_blocks() -> usize {
    2
}
fn default_t_f() -> usize {
    10
}
fn default_pta_query() -> PtaQuery {
    PtaQuery::Current
}
fn default_true() -> bool {
    true
}
fn default_fusion_variant() -> FusionVariant {
    FusionVariant::Kf
}

/// Model architecture section. Stored inside checkpoints; evaluation rejects
/// checkpoints whose section disagrees with the requested configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Embedding width D (default 64).
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Graph-attention layers in the scene encoder (default 2).
    #[serde(default = "default_num_gat_layers")]
    pub num_gat_layers: usize,
    /// Attention heads in the encoder and PTA (default 8).
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    /// Past-time attention window in timesteps (default 10).
    #[serde(default = "default_k_p")]
    pub k_p: usize,
    /// Interaction radius for vehicle-class agents in meters (default 50).
    #[serde(default = "default_radius_vehicle")]
    pub radius_vehicle_m: f64,
    /// Interaction radius for pedestrian-class agents in meters (default 20).
    #[serde(default = "default_radius_pedestrian")]
    pub radius_pedestrian_m: f64,
    /// Output modes F (default 6, the evaluation mode count).
    #[serde(default = "default_num_modes")]
    pub num_modes: usize,
    /// Heads in the mode-attention layer (default 4).
    #[serde(default = "default_mode_attn_heads")]
    pub mode_attn_heads: usize,
    /// Anchors per mode: 0 none, 1 endpoint, 2 midpoint+endpoint,
    /// 3 thirds+endpoint (default 2).
    #[serde(default = "default_num_anchors")]
    pub num_anchors: usize,
    /// MLP-Mixer blocks in the decoder (default 2).
    #[serde(default = "default_mixer_blocks")]
    pub mixer_blocks: usize,
    /// Future horizon in timesteps the decoder emits (default 10).
    #[serde(default = "default_t_f")]
    pub t_f: usize,
    /// Query side of past-time attention (default `current`).
    #[serde(default = "default_pta_query")]
    pub pta_query: PtaQuery,
    /// Past-time attention on/off (default on).
    #[serde(default = "default_true")]
    pub pta: bool,
    /// Mode attention on/off (default on).
    #[serde(default = "default_true")]
    pub mode_attention: bool,
    /// Input-fusion regime (default `kf`).
    #[serde(default = "default_fusion_variant")]
    pub fusion: FusionVariant,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl ModelSection {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.mode_attn_heads == 0 {
            return Err(Error::Config(
                "hidden_dim and head counts must be >= 1".into(),
            ));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % self.mode_attn_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by mode_attn_heads {}",
                self.hidden_dim, self.mode_attn_heads
            )));
        }
        if self.num_modes == 0 || self.num_modes > 6 {
            return Err(Error::Config(format!(
                "num_modes must be in 1..=6, got {}",
                self.num_modes
            )));
        }
        if self.num_anchors > 3 {
            return Err(Error::Config(format!(
                "num_anchors must be in 0..=3, got {}",
                self.num_anchors
            )));
        }
        if self.t_f == 0 {
            return Err(Error::Config("t_f must be >= 1".into()));
        }
        if self.k_p == 0 {
            return Err(Error::Config("k_p must be >= 1".into()));
        }
        if self.num_gat_layers == 0 {
            return Err(Error::Config("num_gat_layers must be >= 1".into()));
        }
        if self.mixer_blocks == 0 {
            return Err(Error::Config("mixer_blocks must be >= 1".into()));
        }
        if !(self.radius_vehicle_m > 0.0 && self.radius_pedestrian_m > 0.0) {
            return Err(Error::Config("interaction radii must be positive".into()));
        }
        Ok(())
    }
}

fn default_epochs() -> usize {
    25
}
fn default_lr0() -> f64 {
    3e-4
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    7
}
fn default_reg_mode() -> RegMode {
    RegMode::Wta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Passes over the training scenes (default 25; one step per scene).
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Initial learning rate for the cosine schedule (default 3e-4).
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    /// Decoupled AdamW weight decay (default 1e-4).
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Dropout rate during training (default 0.1).
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Anchor-loss weight alpha (default 0.5).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seed for parameter init, dropout masks, and scene order (default 7).
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Winner-take-all or score-weighted regression (default `wta`).
    #[serde(default = "default_reg_mode")]
    pub reg_mode: RegMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.weight_decay < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config(
                "weight_decay and alpha must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn default_view() -> ViewMode {
    ViewMode::Cooperative
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Observation regime to evaluate (default `cooperative`).
    #[serde(default = "default_view")]
    pub view: ViewMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            view: default_view(),
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub synth: WorldConfig,
    #[serde(default)]
    pub fusion: KalmanConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.fusion.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<RunConfig> {
        let file = File::open(path.as_ref())?;
        let reader = BufReader::new(file);
        let cfg: RunConfig = serde_json::from_reader(reader)
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
