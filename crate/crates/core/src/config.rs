//! The experiment config file: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::DelaySpec;
use crate::error::{Error, Result};
use crate::models::{LocalSpec, RemoteSpec, PATCH};
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of `h` and `z`.
    pub features: usize,
    pub encoder_features: usize,
    pub mid_features: usize,
    /// Remote context window `K`.
    pub context: usize,
    pub max_delay: usize,
    /// On-device downsample factor for the local input.
    pub local_downsample: usize,
    /// Intensity bits kept on the uplink.
    pub uplink_quant_bits: u8,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 16,
            encoder_features: 32,
            mid_features: 16,
            context: 4,
            max_delay: 5,
            local_downsample: 2,
            uplink_quant_bits: 6,
        }
    }
}

impl ModelConfig {
    pub fn local_spec(&self, scene: &SceneConfig) -> LocalSpec {
        LocalSpec {
            input_width: scene.width / self.local_downsample,
            input_height: scene.height / self.local_downsample,
            features: self.features,
            class_count: scene.class_count as usize,
            label_upsample: PATCH * self.local_downsample,
        }
    }

    pub fn remote_spec(&self, scene: &SceneConfig, context: usize) -> RemoteSpec {
        RemoteSpec {
            input_width: scene.width,
            input_height: scene.height,
            context,
            encoder_features: self.encoder_features,
            mid_features: self.mid_features,
            features: self.features,
            max_delay: self.max_delay,
            pool_factor: self.local_downsample,
            class_count: scene.class_count as usize,
            label_upsample: PATCH * self.local_downsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Round-trip delay distribution.
    pub delay: DelaySpec,
    pub drop_prob: f64,
    /// Server model latency.
    pub server_compute_ms: f64,
    /// Local model latency.
    pub local_compute_ms: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            delay: DelaySpec::default(),
            drop_prob: 0.0,
            server_compute_ms: 0.0,
            local_compute_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// SGD with momentum.
    Sgd,
    /// Adam; `momentum` is ignored.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub optimizer: Optimizer,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub frames_per_scene: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub local_epochs: usize,
    pub image_epochs: usize,
    pub remote_warmup_epochs: usize,
    pub remote_stage1_epochs: usize,
    pub remote_stage2_epochs: usize,
    pub fused_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            train_scenes: 80,
            val_scenes: 8,
            frames_per_scene: 64,
            batch_size: 16,
            lr: 0.003,
            momentum: 0.9,
            clip_norm: 5.0,
            local_epochs: 6,
            image_epochs: 6,
            remote_warmup_epochs: 6,
            remote_stage1_epochs: 4,
            remote_stage2_epochs: 12,
            fused_epochs: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub frames: usize,
    /// Leading frames excluded from scoring.
    pub warmup_frames: usize,
    pub delays: Vec<usize>,
    pub local_delays_ms: Vec<f64>,
    pub matrix_observed: Vec<usize>,
    pub matrix_input: Vec<usize>,
    pub sigmas_ms: Vec<f64>,
    pub monte_carlo_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 16,
            frames: 72,
            warmup_frames: 12,
            delays: (0..=5).collect(),
            local_delays_ms: vec![0.0, 4.0, 8.0, 33.0],
            matrix_observed: (0..=8).collect(),
            matrix_input: (0..=5).collect(),
            sigmas_ms: vec![0.0, 5.0, 15.0],
            monte_carlo_samples: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub host: String,
    pub port: u16,
    /// How long the client waits for features after sending a frame.
    pub fuse_deadline_ms: f64,
    /// Features older than this many frames are discarded.
    pub max_feature_age_frames: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7461,
            fuse_deadline_ms: 15.0,
            max_feature_age_frames: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub net: NetConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Defaults with the high-motion scene preset.
    pub fn quickstart(seed: u64) -> Self {
        Self {
            seed,
            out_dir: default_out_dir(),
            scene: SceneConfig {
                speed_scale: 3.0,
                ..SceneConfig::default()
            },
            model: ModelConfig::default(),
            channel: ChannelConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            net: NetConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.channel.delay.validate()?;
        let m = &self.model;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if m.local_downsample == 0 || self.scene.width % (PATCH * m.local_downsample) != 0 {
            return bad("scene width must be divisible by 8 * local_downsample");
        }
        if self.scene.height % (PATCH * m.local_downsample) != 0 {
            return bad("scene height must be divisible by 8 * local_downsample");
        }
        let (gh, gw) = (self.scene.height / PATCH, self.scene.width / PATCH);
        if gh < 3 || gw < 3 {
            return bad("remote feature grid must be at least 3x3");
        }
        let (lh, lw) = (gh / m.local_downsample, gw / m.local_downsample);
        if lh < 3 || lw < 3 {
            return bad("local feature grid must be at least 3x3");
        }
        if m.context == 0 || m.features == 0 || m.encoder_features == 0 || m.mid_features == 0 {
            return bad("model sizes must be positive");
        }
        if m.max_delay < 1 || m.max_delay > 255 {
            return bad("max_delay must be in 1..=255");
        }
        if !(1..=8).contains(&m.uplink_quant_bits) {
            return bad("uplink_quant_bits must be in 1..=8");
        }
        let t = &self.training;
        if t.batch_size == 0 || t.train_scenes == 0 || t.val_scenes == 0 {
            return bad("training sizes must be positive");
        }
        if t.frames_per_scene <= m.max_delay + m.context {
            return bad("frames_per_scene must exceed max_delay + context");
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return bad("need lr > 0 and 0 <= momentum < 1");
        }
        if !(0.0..=1.0).contains(&self.channel.drop_prob) {
            return bad("drop_prob must be in [0, 1]");
        }
        let e = &self.eval;
        if e.frames <= e.warmup_frames || e.episodes == 0 {
            return bad("eval needs episodes and frames beyond warmup");
        }
        if e.matrix_observed.is_empty() || e.matrix_input.is_empty() || e.delays.is_empty() {
            return bad("eval delay grids must not be empty");
        }
        if e.matrix_observed.iter().enumerate().any(|(i, &d)| d != i) {
            return bad("matrix_observed must be 0..R");
        }
        if e.sigmas_ms.iter().any(|s| !(*s >= 0.0)) {
            return bad("sigmas must be non-negative");
        }
        Ok(())
    }

    pub fn frame_period_ms(&self) -> f64 {
        1000.0 / self.scene.fps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_needs_only_seed() {
        let cfg = ExperimentConfig::from_toml("seed = 3").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.context, 4);
        assert_eq!(cfg.model.max_delay, 5);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(ExperimentConfig::from_toml("out_dir = \"x\"").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\nsead = 2").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[scene]\nwidht = 64").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::quickstart(5);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn shapes_line_up() {
        let cfg = ExperimentConfig::quickstart(0);
        let l = cfg.model.local_spec(&cfg.scene);
        let r = cfg.model.remote_spec(&cfg.scene, 4);
        assert_eq!(l.grid(), r.output_grid());
        assert_eq!(l.grid().0 * l.label_upsample, cfg.scene.height);
    }
}
