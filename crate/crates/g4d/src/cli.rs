//! Subcommand implementations behind the `g4d` binary. Everything here is a
//! plain function over paths and [`RunConfig`] so the test suites can drive
//! the exact code the CLI runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{load_trained, sample, train, TrainSettings};
use crate::geometry::{lift_depth, transform_pointmap, FrameId, Intrinsics, Pointmap, Pose};
use crate::metrics::{cross_view_miou, depth_stats, rgb_fidelity, MetricReport, ViewMetrics};

use crate::model::{encode_condition, CondBatch, PatchCodec};
use crate::synthscene::{generate_dataset, Dataset, GripperState, RgbImage};
use crate::tensor::{io as tio, Tensor};
use crate::trajectory::{extract_trajectory, FourDFrame, FourDVideo, GripperSpec};
use crate::{Error, Result};

/// Stable process exit codes; 0 means full success.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Toml(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::MissingCheckpoint(_) => 5,
        Error::MissingFrame(_) => 6,
        Error::TrackingLost { .. } => 7,
        _ => 1,
    }
}

// ---- gen-data -------------------------------------------------------------------

/// Renders the dataset and writes the gripper spec used by extract-traj.
pub fn gen_data(
    cfg: &RunConfig,
    out: &Path,
    episodes_override: Option<usize>,
    seed: u64,
) -> Result<()> {
    let mut ds_cfg = cfg.dataset_config(seed);
    if let Some(eps) = episodes_override {
        ds_cfg.episodes = eps;
    }
    generate_dataset(&ds_cfg, out)?;
    let gspec = cfg.scene.gripper_spec();
    fs::write(
        out.join("gripper_spec.json"),
        serde_json::to_string_pretty(&gspec)?,
    )?;
    Ok(())
}

// ---- train ----------------------------------------------------------------------

pub fn train_cmd(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: u64,
) -> Result<PathBuf> {
    let ds = Dataset::load(data)?;
    if ds.manifest.width < cfg.image.crop_width || ds.manifest.height < cfg.image.crop_height {
        return Err(Error::Config(format!(
            "dataset {}x{} smaller than crop {}x{}",
            ds.manifest.width, ds.manifest.height, cfg.image.crop_width, cfg.image.crop_height
        )));
    }
    let settings: TrainSettings = cfg.train_settings(seed);
    let result = train(&cfg.denoiser_config()?, &settings, &ds, out, resume)?;
    Ok(result.final_checkpoint)
}

// ---- prediction trees -------------------------------------------------------------

/// Sidecar describing a prediction (or exported ground-truth) tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredMeta {
    pub episode: usize,
    pub t0: usize,
    pub view_n: usize,
    pub view_m: usize,
    pub horizon: usize,
    pub width: usize,
    pub height: usize,
    pub crop_n: (usize, usize),
    pub crop_m: (usize, usize),
    pub frame_n: String,
    pub intrinsics_n: Intrinsics,
    pub intrinsics_m: Intrinsics,
    /// View n's extrinsics when the manifest carried them; prediction works
    /// without any extrinsics at all.
    pub world_from_n: Option<[f32; 12]>,
}

fn stream_path(dir: &Path, stream: &str, t: usize) -> PathBuf {
    dir.join(format!("{stream}_{t}.g4dt"))
}

fn load_stream_tensor(dir: &Path, stream: &str, t: usize) -> Result<Tensor> {
    let path = stream_path(dir, stream, t);
    if !path.exists() {
        return Err(Error::MissingFrame(format!("{stream}_{t}.g4dt")));
    }
    tio::load_tensor(path)
}

fn center_crop(full_w: usize, full_h: usize, w: usize, h: usize) -> (usize, usize) {
    ((full_w - w) / 2, (full_h - h) / 2)
}

/// Conditioning for one view from its latest observation; needs intrinsics
/// only, never extrinsics.
fn view_conditioning(
    ds: &Dataset,
    codec: &PatchCodec,
    horizon: usize,
    normalizer: &crate::synthscene::Normalizer,
    ep: usize,
    view: usize,
    t0: usize,
    crop: (usize, usize),
    w: usize,
    h: usize,
) -> Result<(crate::model::Conditioning, Intrinsics, FrameId)> {
    use crate::diffusion::data::{crop_depth, crop_rgb, pm_channels};
    let frame = FrameId::view(ep, view);
    let k = ds.intrinsics(ep, view)?.cropped(crop.0, crop.1, w, h)?;
    let rgb = crop_rgb(&ds.load_rgb(ep, view, t0)?, crop.0, crop.1, w, h);
    let depth = crop_depth(&ds.load_depth(ep, view, t0)?, crop.0, crop.1, w, h);
    let (pm, _) = pm_channels(&depth, &k, frame.clone(), None, normalizer)?;
    let cond = encode_condition(codec, horizon, &[rgb], &[pm])?;
    Ok((cond, k, frame))
}

/// Runs the sampler from a checkpoint and writes the 4-stream prediction
/// tree. View m's extrinsics are never read.
pub fn predict(
    ckpt: &Path,
    data: &Path,
    episode: usize,
    views: (usize, usize),
    t0: usize,
    out: &Path,
    seed: u64,
) -> Result<PredMeta> {
    let trained = load_trained(ckpt)?;
    let cfg = trained.meta.config.clone();
    let ds = Dataset::load(data)?;
    let entry = ds.episode(episode)?;
    let (view_n, view_m) = views;
    if view_n >= entry.cameras.len() || view_m >= entry.cameras.len() || view_n == view_m {
        return Err(Error::Config(format!(
            "views {view_n},{view_m} invalid for episode {episode}"
        )));
    }
    if t0 + cfg.horizon >= ds.manifest.episode_len {
        return Err(Error::Config(format!(
            "t0 {} + horizon {} exceeds episode length {}",
            t0, cfg.horizon, ds.manifest.episode_len
        )));
    }

    let codec = cfg.codec()?;
    let (w, h) = (cfg.width, cfg.height);
    let crop = center_crop(ds.manifest.width, ds.manifest.height, w, h);
    let normalizer = trained.meta.normalizer.clone();

    let (cond_n, k_n, frame_n) =
        view_conditioning(&ds, &codec, cfg.horizon, &normalizer, episode, view_n, t0, crop, w, h)?;
    let (cond_m, k_m, _frame_m) =
        view_conditioning(&ds, &codec, cfg.horizon, &normalizer, episode, view_m, t0, crop, w, h)?;

    let cond_n = CondBatch::stack(&[&cond_n])?;
    let cond_m = CondBatch::stack(&[&cond_m])?;
    let schedule = trained.schedule()?;
    let streams = sample(
        &trained.params,
        &schedule,
        &cond_n,
        &cond_m,
        trained.meta.sample_steps,
        seed,
    )?;

    fs::create_dir_all(out)?;
    let s = codec.tokens_per_frame();
    let f = codec.token_features();
    let write_stream = |name: &str, tokens: &Tensor, denorm: bool| -> Result<()> {
        for i in 0..cfg.horizon {
            let t = t0 + 1 + i;
            let rows = &tokens.data()[i * s * f..(i + 1) * s * f];
            let mut frame = codec.decode_frame(rows);
            if denorm {
                normalizer.denormalize_buf(&mut frame);
            }
            let tensor = Tensor::from_vec(vec![h, w, 3], frame)?;
            tio::save_tensor(stream_path(out, name, t), &tensor)?;
        }
        Ok(())
    };
    write_stream("rgb_n", &streams.rgb_n, false)?;
    write_stream("rgb_m", &streams.rgb_m, false)?;
    write_stream("pm_n", &streams.pm_n, true)?;
    write_stream("pm_m", &streams.pm_m, true)?;

    let meta = PredMeta {
        episode,
        t0,
        view_n,
        view_m,
        horizon: cfg.horizon,
        width: w,
        height: h,
        crop_n: crop,
        crop_m: crop,
        frame_n: frame_n.0.clone(),
        intrinsics_n: k_n,
        intrinsics_m: k_m,
        world_from_n: entry.cameras[view_n].world_from_cam,
    };
    fs::write(out.join("pred.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Writes a prediction-shaped tree from ground-truth frames (full dataset
/// resolution, no crop): the oracle input for eval and extract-traj.
pub fn export_gt(
    data: &Path,
    episode: usize,
    views: (usize, usize),
    t0: usize,
    horizon: usize,
    out: &Path,
) -> Result<PredMeta> {
    let ds = Dataset::load(data)?;
    let entry = ds.episode(episode)?;
    let (view_n, view_m) = views;
    if t0 + horizon >= ds.manifest.episode_len {
        return Err(Error::Config(format!(
            "t0 {} + horizon {horizon} exceeds episode length {}",
            t0, ds.manifest.episode_len
        )));
    }
    let (w, h) = (ds.manifest.width, ds.manifest.height);
    let frame_n = FrameId::view(episode, view_n);
    let k_n = ds.intrinsics(episode, view_n)?.clone();
    let k_m = ds.intrinsics(episode, view_m)?.clone();
    let pose_m_to_n = ds.pose_a_to_b(episode, view_m, view_n)?;

    fs::create_dir_all(out)?;
    for i in 0..horizon {
        let t = t0 + 1 + i;
        let rgb_n = ds.load_rgb(episode, view_n, t)?;
        let rgb_m = ds.load_rgb(episode, view_m, t)?;
        let pm_n = lift_depth(&ds.load_depth(episode, view_n, t)?, &k_n, frame_n.clone())?;
        let pm_m = lift_depth(
            &ds.load_depth(episode, view_m, t)?,
            &k_m,
            FrameId::view(episode, view_m),
        )?;
        let pm_m = transform_pointmap(&pm_m, &pose_m_to_n)?;
        let save_rgb = |name: &str, img: &RgbImage| -> Result<()> {
            tio::save_tensor(
                stream_path(out, name, t),
                &Tensor::from_vec(vec![h, w, 3], img.data.clone())?,
            )
        };
        save_rgb("rgb_n", &rgb_n)?;
        save_rgb("rgb_m", &rgb_m)?;
        let save_pm = |name: &str, pm: &Pointmap| -> Result<()> {
            tio::save_tensor(
                stream_path(out, name, t),
                &Tensor::from_vec(vec![h, w, 3], pm.points.clone())?,
            )
        };
        save_pm("pm_n", &pm_n)?;
        save_pm("pm_m", &pm_m)?;
    }

    let meta = PredMeta {
        episode,
        t0,
        view_n,
        view_m,
        horizon,
        width: w,
        height: h,
        crop_n: (0, 0),
        crop_m: (0, 0),
        frame_n: frame_n.0.clone(),
        intrinsics_n: k_n,
        intrinsics_m: k_m,
        world_from_n: entry.cameras[view_n].world_from_cam,
    };
    fs::write(out.join("pred.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_pred_meta(pred: &Path) -> Result<PredMeta> {
    let path = pred.join("pred.json");
    if !path.exists() {
        return Err(Error::MissingFrame("pred.json".into()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn load_pred_rgb(dir: &Path, stream: &str, t: usize, w: usize, h: usize) -> Result<RgbImage> {
    let tensor = load_stream_tensor(dir, stream, t)?;
    if tensor.shape() != [h, w, 3] {
        return Err(Error::Format(format!(
            "{stream}_{t}: expected [{h}, {w}, 3], got {:?}",
            tensor.shape()
        )));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: tensor.data().to_vec(),
    })
}

fn load_pred_pm(
    dir: &Path,
    stream: &str,
    t: usize,
    w: usize,
    h: usize,
    frame: FrameId,
) -> Result<Pointmap> {
    let tensor = load_stream_tensor(dir, stream, t)?;
    if tensor.shape() != [h, w, 3] {
        return Err(Error::Format(format!(
            "{stream}_{t}: expected [{h}, {w}, 3], got {:?}",
            tensor.shape()
        )));
    }
    Ok(Pointmap {
        frame,
        width: w,
        height: h,
        points: tensor.data().to_vec(),
        valid: vec![true; w * h],
    })
}

/// Loads a prediction tree as 4D video frames.
pub fn load_four_d(pred: &Path) -> Result<(PredMeta, FourDVideo)> {
    let meta = read_pred_meta(pred)?;
    let frame_n = FrameId::new(meta.frame_n.clone());
    let mut frames = Vec::with_capacity(meta.horizon);
    for i in 0..meta.horizon {
        let t = meta.t0 + 1 + i;
        frames.push(FourDFrame {
            rgb: [
                load_pred_rgb(pred, "rgb_n", t, meta.width, meta.height)?,
                load_pred_rgb(pred, "rgb_m", t, meta.width, meta.height)?,
            ],
            pm: [
                load_pred_pm(pred, "pm_n", t, meta.width, meta.height, frame_n.clone())?,
                load_pred_pm(pred, "pm_m", t, meta.width, meta.height, frame_n.clone())?,
            ],
        });
    }
    Ok((meta, FourDVideo { frames, frame_n }))
}

// ---- eval -----------------------------------------------------------------------

/// Scores a prediction tree against ground truth and writes report.json.
pub fn eval(pred: &Path, gt: &Path, report_path: &Path) -> Result<MetricReport> {
    use crate::diffusion::data::{crop_depth, crop_rgb};

    let (meta, video) = load_four_d(pred)?;
    let ds = Dataset::load(gt)?;
    let gspec = ds.manifest.scene.gripper_spec();
    let (w, h) = (meta.width, meta.height);

    let pose_m_to_n = ds.pose_a_to_b(meta.episode, meta.view_m, meta.view_n)?;
    let pose_n_to_m = pose_m_to_n.invert();

    let mut gt_rgb_n = Vec::new();
    let mut gt_rgb_m = Vec::new();
    let mut pred_rgb_n = Vec::new();
    let mut pred_rgb_m = Vec::new();
    let mut stats_n = Vec::new();
    let mut stats_m = Vec::new();
    let mut pred_pm_n = Vec::new();
    let mut pred_pm_m = Vec::new();
    let mut masks_n = Vec::new();
    let mut masks_m = Vec::new();

    for (i, frame) in video.frames.iter().enumerate() {
        let t = meta.t0 + 1 + i;
        let gt_n = crop_rgb(
            &ds.load_rgb(meta.episode, meta.view_n, t)?,
            meta.crop_n.0,
            meta.crop_n.1,
            w,
            h,
        );
        let gt_m = crop_rgb(
            &ds.load_rgb(meta.episode, meta.view_m, t)?,
            meta.crop_m.0,
            meta.crop_m.1,
            w,
            h,
        );
        gt_rgb_n.push(RgbImage { width: w, height: h, data: gt_n });
        gt_rgb_m.push(RgbImage { width: w, height: h, data: gt_m });
        pred_rgb_n.push(frame.rgb[0].clone());
        pred_rgb_m.push(frame.rgb[1].clone());

        let depth_n = crop_depth(
            &ds.load_depth(meta.episode, meta.view_n, t)?,
            meta.crop_n.0,
            meta.crop_n.1,
            w,
            h,
        );
        stats_n.push(depth_stats(&frame.pm[0], &depth_n)?);

        // branch m predicts in view n's frame; express it in m's own frame
        // before extracting z
        let depth_m = crop_depth(
            &ds.load_depth(meta.episode, meta.view_m, t)?,
            meta.crop_m.0,
            meta.crop_m.1,
            w,
            h,
        );
        let pm_m_own = transform_pointmap(&frame.pm[1], &pose_n_to_m)?;
        stats_m.push(depth_stats(&pm_m_own, &depth_m)?);

        let (body_n, left_n, right_n) = crate::trajectory::segment_gripper(&frame.rgb[0], &gspec);
        let (body_m, left_m, right_m) = crate::trajectory::segment_gripper(&frame.rgb[1], &gspec);
        masks_n.push(union_masks(&[body_n, left_n, right_n]));
        masks_m.push(union_masks(&[body_m, left_m, right_m]));
        pred_pm_n.push(frame.pm[0].clone());
        pred_pm_m.push(frame.pm[1].clone());
    }

    let mean = |xs: &[f32]| xs.iter().sum::<f32>() / xs.len() as f32;
    let absrel_n = mean(&stats_n.iter().map(|s| s.absrel).collect::<Vec<_>>());
    let absrel_m = mean(&stats_m.iter().map(|s| s.absrel).collect::<Vec<_>>());
    let delta1_n = mean(&stats_n.iter().map(|s| s.delta1).collect::<Vec<_>>());
    let delta1_m = mean(&stats_m.iter().map(|s| s.delta1).collect::<Vec<_>>());

    let fid_n = rgb_fidelity(&pred_rgb_n, &gt_rgb_n)?;
    let fid_m = rgb_fidelity(&pred_rgb_m, &gt_rgb_m)?;
    // both reprojection directions: native branch n -> m, and the
    // cross-view branch (already expressed in n's frame) -> n
    let miou_nm =
        cross_view_miou(&pred_pm_n, &masks_n, &masks_m, &pose_n_to_m, &meta.intrinsics_m)?;
    let identity_n = Pose::identity(FrameId::new(meta.frame_n.clone()));
    let miou_mn =
        cross_view_miou(&pred_pm_m, &masks_m, &masks_n, &identity_n, &meta.intrinsics_n)?;

    let report = MetricReport {
        miou: (miou_nm.miou + miou_mn.miou) / 2.0,
        absrel_n,
        absrel_m,
        delta1_n,
        delta1_m,
        fvd: None,
        fvd_substitute: "psnr+tmse".to_string(),
        view_n: ViewMetrics {
            absrel: absrel_n,
            delta1: delta1_n,
            psnr: fid_n.psnr,
            temporal_mse: fid_n.temporal_mse,
            per_frame_psnr: fid_n.per_frame_psnr,
        },
        view_m: ViewMetrics {
            absrel: absrel_m,
            delta1: delta1_m,
            psnr: fid_m.psnr,
            temporal_mse: fid_m.temporal_mse,
            per_frame_psnr: fid_m.per_frame_psnr,
        },
        miou_nm: miou_nm.into(),
        miou_mn: miou_mn.into(),
    };
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn union_masks(masks: &[crate::geometry::Mask]) -> crate::geometry::Mask {
    let mut out = masks[0].clone();
    for m in &masks[1..] {
        for (o, &v) in out.data.iter_mut().zip(&m.data) {
            *o = *o || v;
        }
    }
    out
}

// ---- extract-traj ------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct HintFile {
    pub pose: [f32; 12],
}

#[derive(Serialize, Deserialize)]
pub struct TrajectoryPointJson {
    pub t: usize,
    pub pose: [f32; 12],
    pub view: usize,
    pub residual: Option<f32>,
    pub state: GripperState,
}

#[derive(Serialize, Deserialize)]
pub struct TrajectoryFile {
    /// View-n camera frame the poses live in.
    pub frame: String,
    /// Optional extrinsics converting to the world frame; only the reference
    /// camera ever needs calibration.
    pub world_from_n: Option<[f32; 12]>,
    pub delta: f32,
    pub points: Vec<TrajectoryPointJson>,
}

pub fn extract_traj(
    pred: &Path,
    gripper_spec_path: &Path,
    hint_path: &Path,
    out: &Path,
) -> Result<TrajectoryFile> {
    let (meta, video) = load_four_d(pred)?;
    let gspec: GripperSpec = serde_json::from_slice(&fs::read(gripper_spec_path)?)?;
    let hint: HintFile = serde_json::from_slice(&fs::read(hint_path)?)?;
    let frame_n = FrameId::new(meta.frame_n.clone());
    let hint_pose = Pose::from_rt12(&hint.pose, FrameId::new("gripper"), frame_n)?;

    let estimate = extract_trajectory(&video, &gspec, &hint_pose, None)?;
    let file = TrajectoryFile {
        frame: meta.frame_n.clone(),
        world_from_n: meta.world_from_n,
        delta: estimate.delta,
        points: estimate
            .points
            .iter()
            .map(|p| TrajectoryPointJson {
                t: meta.t0 + 1 + p.t,
                pose: p.pose.to_rt12(),
                view: p.view,
                residual: p.residuals[p.view],
                state: p.state,
            })
            .collect(),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, serde_json::to_string_pretty(&file)?)?;
    Ok(file)
}

// ---- render ---------------------------------------------------------------------

fn write_ppm(path: &Path, width: usize, height: usize, rgb8: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::with_capacity(rgb8.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.extend_from_slice(rgb8);
    fs::write(path, out)?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Five-stop blue-to-red gradient for depth visualization.
fn depth_color(t: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.05, 0.05, 0.35],
        [0.05, 0.45, 0.85],
        [0.10, 0.75, 0.35],
        [0.95, 0.80, 0.10],
        [0.80, 0.10, 0.10],
    ];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f32;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let a = x - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = to_u8(STOPS[i][c] * (1.0 - a) + STOPS[i + 1][c] * a);
    }
    out
}

/// Writes one RGB and one depth-colormap image per frame of an episode view.
/// Pure function of the dataset bytes.
pub fn render(data: &Path, episode: usize, view: usize, out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    fs::create_dir_all(out)?;
    for t in 0..ds.manifest.episode_len {
        let rgb = ds.load_rgb(episode, view, t)?;
        let bytes: Vec<u8> = rgb.data.iter().map(|&v| to_u8(v)).collect();
        write_ppm(&out.join(format!("rgb_{t}.ppm")), rgb.width, rgb.height, &bytes)?;

        let depth = ds.load_depth(episode, view, t)?;
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for (v, ok) in depth.values.iter().zip(&depth.valid) {
            if *ok {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        let span = (hi - lo).max(1e-6);
        let mut img = vec![0u8; depth.values.len() * 3];
        for (i, (v, ok)) in depth.values.iter().zip(&depth.valid).enumerate() {
            if *ok {
                let c = depth_color((v - lo) / span);
                img[i * 3..i * 3 + 3].copy_from_slice(&c);
            }
        }
        write_ppm(
            &out.join(format!("depth_{t}.ppm")),
            depth.width,
            depth.height,
            &img,
        )?;
    }
    Ok(())
}
