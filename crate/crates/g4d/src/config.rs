//! Run configuration: one TOML document drives dataset generation, training,
//! prediction and evaluation. CLI flags override individual keys by dotted
//! path (`--loss.lambda 0`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainSettings;
use crate::model::{DenoiserConfig, CHANNEL_GROUPS};
use crate::synthscene::{DatasetConfig, SceneSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    /// Rendered dataset resolution.
    pub width: usize,
    pub height: usize,
    /// Spatial size the model operates on; training crops to it.
    pub crop_width: usize,
    pub crop_height: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            width: 64,
            height: 48,
            crop_width: 40,
            crop_height: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub patch: usize,
    pub horizon: usize,
    pub cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            patch: 4,
            horizon: 10,
            cross_attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "K")]
    pub k_steps: usize,
    pub sample_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            k_steps: 100,
            sample_steps: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f32,
    pub gripper_reweight: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            gripper_reweight: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfigSection {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    /// Unset means: fall back to the G4D_SEED environment variable, then 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfigSection {
    fn default() -> Self {
        TrainConfigSection {
            lr: 1e-3,
            batch: 4,
            steps: 2000,
            seed: None,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub episodes: usize,
    pub cameras: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub episode_len: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            episodes: 4,
            cameras: 16,
            train_views: 12,
            test_views: 4,
            episode_len: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image: ImageConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossConfig,
    pub train: TrainConfigSection,
    pub dataset: DatasetSection,
    pub scene: SceneSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image.crop_width > self.image.width || self.image.crop_height > self.image.height
        {
            return Err(Error::Config(format!(
                "crop {}x{} exceeds image {}x{}",
                self.image.crop_width, self.image.crop_height, self.image.width, self.image.height
            )));
        }
        if self.dataset.episode_len <= self.model.horizon {
            return Err(Error::Config(format!(
                "episode length {} must exceed horizon {}",
                self.dataset.episode_len, self.model.horizon
            )));
        }
        self.denoiser_config()?.validate()?;
        self.dataset_config(0).validate()?;
        Ok(())
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        Ok(DenoiserConfig {
            dim: self.model.dim,
            heads: self.model.heads,
            enc_blocks: self.model.enc_blocks,
            dec_blocks: self.model.dec_blocks,
            horizon: self.model.horizon,
            patch: self.model.patch,
            channel_groups: CHANNEL_GROUPS,
            width: self.image.crop_width,
            height: self.image.crop_height,
            time_levels: self.diffusion.k_steps + 1,
            cross_attention: self.model.cross_attention,
        })
    }

    pub fn dataset_config(&self, seed: u64) -> DatasetConfig {
        DatasetConfig {
            episodes: self.dataset.episodes,
            cameras: self.dataset.cameras,
            train_views: self.dataset.train_views,
            test_views: self.dataset.test_views,
            episode_len: self.dataset.episode_len,
            width: self.image.width,
            height: self.image.height,
            seed,
            scene: self.scene.clone(),
        }
    }

    pub fn train_settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            lr: self.train.lr,
            batch: self.train.batch,
            steps: self.train.steps,
            seed,
            k_steps: self.diffusion.k_steps,
            sample_steps: self.diffusion.sample_steps,
            lambda: self.loss.lambda,
            gripper_reweight: self.loss.gripper_reweight,
            checkpoint_every: self
                .train
                .checkpoint_every
                .unwrap_or_else(|| (self.train.steps / 4).max(1)),
        }
    }

    /// Seed precedence: explicit CLI flag, then the config file, then the
    /// G4D_SEED environment variable, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.train.seed)
            .or_else(|| {
                std::env::var("G4D_SEED")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(0)
    }

    /// Canonical TOML form; parsing this and re-serializing is byte-stable.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

/// Loads a config file (or the defaults) and applies dotted-key overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?
        }
        None => toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Toml(e.to_string()))?,
    };

    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }

    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_literal(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}': not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn canonical_form_round_trips_byte_identically() {
        let cfg = RunConfig::default();
        let once = cfg.to_canonical_toml().unwrap();
        let parsed: RunConfig = toml::from_str(&once).unwrap();
        assert_eq!(parsed, cfg);
        let twice = parsed.to_canonical_toml().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn overrides_apply_with_type_coercion() {
        let cfg = load_config(
            None,
            &[
                ("loss.lambda".into(), "0".into()),
                ("model.dim".into(), "32".into()),
                ("model.cross_attention".into(), "false".into()),
                ("train.lr".into(), "0.005".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.lambda, 0.0);
        assert_eq!(cfg.model.dim, 32);
        assert!(!cfg.model.cross_attention);
        assert!((cfg.train.lr - 0.005).abs() < 1e-9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_config(None, &[("loss.lambda_typo".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        // patch must divide the crop
        let err = load_config(None, &[("image.crop_width".into(), "39".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_) | Error::InvalidArgument(_)));
    }

    #[test]
    fn seed_resolution_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(Some(7)), 7);
        cfg.train.seed = Some(3);
        assert_eq!(cfg.resolve_seed(None), 3);
        assert_eq!(cfg.resolve_seed(Some(7)), 7);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = load_config(None, &[("train.seed".into(), "11".into())]).unwrap();
        std::fs::write(&path, cfg.to_canonical_toml().unwrap()).unwrap();
        let loaded = load_config(Some(&path), &[]).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(loaded.train.seed, Some(11));
    }
}
