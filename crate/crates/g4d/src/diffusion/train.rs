use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{build_batch, draw_specs, TrainData};
use super::{loss_joint, make_schedule, LossWeights, NoiseSchedule};
use crate::model::{DenoiserConfig, DenoiserParams};
use crate::synthscene::{derive_seed, Dataset, Normalizer};
use crate::tensor::{io as tio, OptimizerState, Tape, Tensor};
use crate::{Error, Result};

pub const CURVE_HEADER: &str = "step,loss_rgb_n,loss_rgb_m,loss_3d,loss_total";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub k_steps: usize,
    pub sample_steps: usize,
    pub lambda: f32,
    pub gripper_reweight: bool,
    /// Checkpoint cadence in steps; the final step always checkpoints.
    pub checkpoint_every: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch == 0 || self.steps == 0 || self.k_steps < 2 {
            return Err(Error::Config(
                "train settings must be positive (lr, batch, steps, K)".into(),
            ));
        }
        Ok(())
    }
}

/// JSON sidecar stored next to every checkpoint; everything prediction needs
/// to rebuild the model and decode its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config: DenoiserConfig,
    pub k_steps: usize,
    pub sample_steps: usize,
    pub normalizer: Normalizer,
    pub seed: u64,
    pub optimizer: OptimizerState,
}

pub struct TrainedModel {
    pub params: DenoiserParams,
    pub meta: CheckpointMeta,
}

impl TrainedModel {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.meta.k_steps)
    }
}

pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    pub curve: Vec<[f64; 5]>,
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn save_bundle(
    path: &Path,
    model: &DenoiserParams,
    opt: &OptimizerState,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in model.named_params() {
        entries.push((format!("param.{name}"), t.clone()));
    }
    for ((name, t), (m, v)) in model.named_params().iter().zip(opt.moments()) {
        entries.push((
            format!("adam.m.{name}"),
            Tensor::from_vec(t.shape().to_vec(), m.clone())?,
        ));
        entries.push((
            format!("adam.v.{name}"),
            Tensor::from_vec(t.shape().to_vec(), v.clone())?,
        ));
    }
    tio::save_checkpoint(path, &entries)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Loads a checkpoint for inference: parameters plus sidecar metadata.
pub fn load_trained(path: &Path) -> Result<TrainedModel> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(Error::MissingCheckpoint(sidecar));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar)?)?;
    let entries = tio::load_checkpoint(path)?;
    let params_entries: Vec<(String, Tensor)> = entries
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix("param.")
                .map(|stripped| (stripped.to_string(), t.clone()))
        })
        .collect();
    let mut params = DenoiserParams::new(&meta.config, 0)?;
    params.load_entries(&params_entries)?;
    Ok(TrainedModel { params, meta })
}

fn load_resume(path: &Path, model: &mut DenoiserParams) -> Result<(OptimizerState, usize)> {
    let trained = load_trained(path)?;
    let entries = tio::load_checkpoint(path)?;
    let params_entries: Vec<(String, Tensor)> = entries
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix("param.")
                .map(|stripped| (stripped.to_string(), t.clone()))
        })
        .collect();
    model.load_entries(&params_entries)?;

    let mut opt = trained.meta.optimizer.clone();
    let mut moments = Vec::new();
    for (name, t) in model.named_params() {
        let find = |prefix: &str| -> Result<Vec<f32>> {
            let key = format!("{prefix}.{name}");
            entries
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Format(format!("checkpoint missing {key}")))
        };
        let m = find("adam.m")?;
        let v = find("adam.v")?;
        if m.len() != t.numel() {
            return Err(Error::Format(format!("moment size mismatch for {name}")));
        }
        moments.push((m, v));
    }
    let step_count = trained.meta.step as u64;
    opt.restore_moments(moments, step_count);
    Ok((opt, trained.meta.step))
}

/// Trains the denoiser. One RNG stream per step (derived from the seed)
/// drives batch sampling and noise, so a fixed seed reproduces the loss
/// curve bitwise and resuming from a checkpoint continues the same
/// trajectory.
pub fn train(
    cfg: &DenoiserConfig,
    settings: &TrainSettings,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    settings.validate()?;
    fs::create_dir_all(out_dir)?;

    let data = TrainData::load(dataset)?;
    let schedule = make_schedule(settings.k_steps)?;
    let weights = LossWeights {
        lambda: settings.lambda,
        gripper_reweight: settings.gripper_reweight,
    };

    let mut model = DenoiserParams::new(cfg, derive_seed(settings.seed, &[0xA11]))?;
    let mut opt = OptimizerState::new(settings.lr);
    let mut start_step = 0usize;
    if let Some(ckpt) = resume {
        let (restored, step) = load_resume(ckpt, &mut model)?;
        opt = restored;
        start_step = step;
    }

    let csv_path = out_dir.join("loss.csv");
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    if start_step == 0 && csv.metadata()?.len() == 0 {
        writeln!(csv, "{CURVE_HEADER}")?;
    }

    let mut curve = Vec::with_capacity(settings.steps.saturating_sub(start_step));
    let mut last_ckpt = out_dir.join(format!("ckpt_step{start_step}.g4dc"));

    for step in start_step..settings.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &[1, step as u64]));
        let specs = draw_specs(&data, cfg, settings.batch, settings.k_steps, &mut rng)?;
        let batch = build_batch(&data, cfg, &schedule, &specs, &mut rng)?;

        let tape = Tape::new();
        let joint = loss_joint(&tape, &model, &batch, &weights)?;
        let total = joint.total.item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "rgb_n={} rgb_m={} pointmap={}",
                    joint.rgb_n, joint.rgb_m, joint.pointmap
                ),
            });
        }

        model.zero_grads();
        tape.backward(&joint.total)?;
        opt.step(&mut model.named_params_mut())?;

        writeln!(
            csv,
            "{step},{},{},{},{}",
            joint.rgb_n, joint.rgb_m, joint.pointmap, total
        )?;
        curve.push([
            step as f64,
            joint.rgb_n as f64,
            joint.rgb_m as f64,
            joint.pointmap as f64,
            total as f64,
        ]);

        let done = step + 1 == settings.steps;
        if done || (step + 1) % settings.checkpoint_every.max(1) == 0 {
            let meta = CheckpointMeta {
                step: step + 1,
                config: cfg.clone(),
                k_steps: settings.k_steps,
                sample_steps: settings.sample_steps,
                normalizer: data.normalizer.clone(),
                seed: settings.seed,
                optimizer: opt.clone(),
            };
            let path = out_dir.join(format!("ckpt_step{}.g4dc", step + 1));
            save_bundle(&path, &model, &opt, &meta)?;
            last_ckpt = path;
        }
    }
    csv.flush()?;

    Ok(TrainOutput {
        final_checkpoint: last_ckpt,
        curve,
    })
}
