//! Diffusion machinery: cosine cumulative noise schedule, clean-signal
//! (x0) prediction losses over both views and both modalities, the training
//! loop, and a deterministic x0-parameterized sampler.

pub mod data;
mod train;

pub use train::{
    load_trained, train, CheckpointMeta, TrainSettings, TrainedModel, CURVE_HEADER,
};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{CondBatch, Denoiser, ViewRole};
use crate::synthscene::derive_seed;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

use data::Batch;

/// Cumulative signal coefficients for k = 0..=K. alpha_bar[0] = 1 exactly,
/// strictly decreasing, alpha_bar[K] <= 0.01.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f32>,
}

/// Cosine cumulative schedule with the usual small offset, clamped away from
/// zero at the far end.
pub fn make_schedule(k_steps: usize) -> Result<NoiseSchedule> {
    if k_steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs K >= 2, got {k_steps}"
        )));
    }
    let s = 0.008f64;
    let f = |i: f64| {
        let t = (i / k_steps as f64 + s) / (1.0 + s);
        (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0.0);
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0f32);
    for i in 1..=k_steps {
        let v = ((f(i as f64) / f0).max(1e-4)) as f32;
        alpha_bar.push(v.min(alpha_bar[i - 1] - f32::EPSILON));
    }
    let sched = NoiseSchedule { alpha_bar };
    debug_assert!(sched.alpha_bar[k_steps] <= 0.01);
    Ok(sched)
}

impl NoiseSchedule {
    pub fn k_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> f32 {
        self.alpha_bar[k]
    }

    pub fn signal_scale(&self, k: usize) -> f32 {
        self.alpha_bar[k].sqrt()
    }

    pub fn noise_scale(&self, k: usize) -> f32 {
        (1.0 - self.alpha_bar[k]).sqrt()
    }
}

/// Forward noising: sqrt(alpha_bar_k) z0 + sqrt(1 - alpha_bar_k) eps.
pub fn q_sample(z0: &Tensor, k: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if k > schedule.k_steps() {
        return Err(Error::InvalidArgument(format!(
            "q_sample step {k} out of range [0, {}]",
            schedule.k_steps()
        )));
    }
    let a = schedule.signal_scale(k);
    let b = schedule.noise_scale(k);
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Tensor::from_vec(z0.shape().to_vec(), data)
}

/// Per-batch-element q_sample: element i uses step k[i].
pub fn q_sample_batched(
    z0: &Tensor,
    k: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let batch = z0.shape()[0];
    assert_eq!(k.len(), batch);
    let stride = z0.numel() / batch;
    let mut data = vec![0.0f32; z0.numel()];
    for (i, &ki) in k.iter().enumerate() {
        let a = schedule.signal_scale(ki);
        let b = schedule.noise_scale(ki);
        for j in 0..stride {
            let idx = i * stride + j;
            data[idx] = a * z0.data()[idx] + b * eps.data()[idx];
        }
    }
    Tensor::from_vec(z0.shape().to_vec(), data)
}

// ---- losses ---------------------------------------------------------------------

/// Loss configuration: pointmap weight and the gripper-region reweighting
/// switch. The binary token weight maps themselves travel with each batch.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda: f32,
    pub gripper_reweight: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            gripper_reweight: true,
        }
    }
}

/// Mean squared error, optionally with per-token weights (1 + indicator).
fn mse(tape: &Tape, pred: &Tensor, target: &Tensor, weight: Option<&Tensor>) -> Result<Tensor> {
    let r = tape.sub(pred, target)?;
    let sq = tape.square(&r)?;
    let sq = match weight {
        Some(w01) => {
            // w01 is a binary [B, N] map; factor = 1 + w01 broadcast over F
            debug_assert!(w01.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let f = sq.shape()[2];
            let factor_data: Vec<f32> = w01.data().iter().map(|&v| 1.0 + v).collect();
            let factor = Tensor::from_vec(w01.shape().to_vec(), factor_data)?;
            let factor = tape.repeat(&factor, 2, f)?;
            tape.mul(&sq, &factor)?
        }
        None => sq,
    };
    tape.mean_all(&sq)
}

/// Clean-signal prediction loss for one RGB view: || z0 - f(z_k, k, c) ||^2.
pub fn loss_rgb(
    tape: &Tape,
    model: &dyn Denoiser,
    batch: &Batch,
    view: ViewRole,
) -> Result<Tensor> {
    loss_rgb_weighted(tape, model, batch, view, None)
}

fn loss_rgb_weighted(
    tape: &Tape,
    model: &dyn Denoiser,
    batch: &Batch,
    view: ViewRole,
    weight: Option<&Tensor>,
) -> Result<Tensor> {
    let (zk, z0, cond) = match view {
        ViewRole::Reference => (&batch.zk_rgb_n, &batch.z0_rgb_n, &batch.cond_n),
        ViewRole::Secondary => (&batch.zk_rgb_m, &batch.z0_rgb_m, &batch.cond_m),
    };
    let pred = model.rgb(tape, zk, &batch.k, cond, view)?;
    mse(tape, &pred, z0, weight)
}

/// Cross-view pointmap loss: the native branch plus the projected branch,
/// each against its own clean target. The projected target must live in the
/// reference view's frame.
pub fn loss_3d(tape: &Tape, model: &dyn Denoiser, batch: &Batch) -> Result<Tensor> {
    let (n, m) = loss_3d_terms(tape, model, batch, None, None)?;
    tape.add(&n, &m)
}

fn loss_3d_terms(
    tape: &Tape,
    model: &dyn Denoiser,
    batch: &Batch,
    weight_n: Option<&Tensor>,
    weight_m: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    for (actual, expected) in &batch.pm_m_frames {
        if actual != expected {
            return Err(Error::FrameMismatch {
                expected: expected.0.clone(),
                found: actual.0.clone(),
            });
        }
    }
    let (pred_n, pred_m) = model.pointmap_pair(
        tape,
        &batch.zk_pm_n,
        &batch.zk_pm_m,
        &batch.k,
        &batch.cond_n,
        &batch.cond_m,
    )?;
    Ok((
        mse(tape, &pred_n, &batch.z0_pm_n, weight_n)?,
        mse(tape, &pred_m, &batch.z0_pm_m, weight_m)?,
    ))
}

/// Joint loss and its scalar term breakdown.
pub struct JointLoss {
    pub total: Tensor,
    pub rgb_n: f32,
    pub rgb_m: f32,
    pub pointmap: f32,
}

/// RGB losses for both views plus lambda times the pointmap pair loss, with
/// optional doubling of gripper-token contributions. With lambda = 0 the
/// pointmap term is still computed and reported but excluded from the total.
pub fn loss_joint(
    tape: &Tape,
    model: &dyn Denoiser,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<JointLoss> {
    let (w_n, w_m) = if weights.gripper_reweight {
        (Some(&batch.w_n), Some(&batch.w_m))
    } else {
        (None, None)
    };
    let rgb_n = loss_rgb_weighted(tape, model, batch, ViewRole::Reference, w_n)?;
    let rgb_m = loss_rgb_weighted(tape, model, batch, ViewRole::Secondary, w_m)?;
    let (pm_n, pm_m) = loss_3d_terms(tape, model, batch, w_n, w_m)?;
    let pm_sum = tape.add(&pm_n, &pm_m)?;

    let rgb_sum = tape.add(&rgb_n, &rgb_m)?;
    let total = if weights.lambda == 0.0 {
        rgb_sum
    } else {
        tape.add(&rgb_sum, &tape.mul_scalar(&pm_sum, weights.lambda)?)?
    };
    Ok(JointLoss {
        total,
        rgb_n: rgb_n.item(),
        rgb_m: rgb_m.item(),
        pointmap: pm_sum.item(),
    })
}

// ---- sampling --------------------------------------------------------------------

/// Sampled latent streams: RGB for both views (own frames) and pointmaps for
/// branch n and branch m->n (both in view n's frame), all [B, N, F].
pub struct SampleStreams {
    pub rgb_n: Tensor,
    pub rgb_m: Tensor,
    pub pm_n: Tensor,
    pub pm_m: Tensor,
}

/// Deterministic x0 sampler. Starting from seeded unit Gaussians at k = K,
/// each step predicts the clean signal and rescales it to the next lower
/// step's signal level (the mean of the forward noising kernel; no fresh
/// noise). If the model always returns the true clean signal, the output is
/// that signal exactly.
pub fn sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond_n: &CondBatch,
    cond_m: &CondBatch,
    steps: usize,
    seed: u64,
) -> Result<SampleStreams> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs steps >= 1".into()));
    }
    let cfg = model.config();
    let batch = cond_n.rgb.shape()[0];
    let shape = vec![batch, cfg.seq_len(), cfg.frame_features()];

    let init = |tag: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag]));
        Tensor::randn(shape.clone(), &mut rng)
    };
    let mut rgb_n = init(0);
    let mut rgb_m = init(1);
    let mut pm_n = init(2);
    let mut pm_m = init(3);

    let big_k = schedule.k_steps();
    let k_at = |i: usize| -> usize {
        ((big_k as f64) * (1.0 - i as f64 / steps as f64)).round() as usize
    };

    let tape = Tape::eval();
    for i in 0..steps {
        let k = vec![k_at(i); batch];
        let z0_rgb_n = model.rgb(&tape, &rgb_n, &k, cond_n, ViewRole::Reference)?;
        let z0_rgb_m = model.rgb(&tape, &rgb_m, &k, cond_m, ViewRole::Secondary)?;
        let (z0_pm_n, z0_pm_m) =
            model.pointmap_pair(&tape, &pm_n, &pm_m, &k, cond_n, cond_m)?;

        let scale = schedule.signal_scale(k_at(i + 1));
        rgb_n = tape.mul_scalar(&z0_rgb_n, scale)?;
        rgb_m = tape.mul_scalar(&z0_rgb_m, scale)?;
        pm_n = tape.mul_scalar(&z0_pm_n, scale)?;
        pm_m = tape.mul_scalar(&z0_pm_m, scale)?;
    }
    Ok(SampleStreams {
        rgb_n,
        rgb_m,
        pm_n,
        pm_m,
    })
}
