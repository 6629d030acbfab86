//! Training data assembly: episodes loaded into memory, crops, conditioning
//! encoding, clean targets, forward-noised inputs and gripper token weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{q_sample_batched, NoiseSchedule};
use crate::geometry::{lift_depth, transform_pointmap, DepthMap, FrameId, Intrinsics, Pose};
use crate::model::{encode_condition, CondBatch, Conditioning, DenoiserConfig, PatchCodec};
use crate::synthscene::{Dataset, IdMask, Normalizer, RgbImage, Split, GRIPPER_IDS};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One episode fully resident in memory, indexed [view][t].
pub struct LoadedEpisode {
    pub rgbs: Vec<Vec<RgbImage>>,
    pub depths: Vec<Vec<DepthMap>>,
    pub masks: Vec<Vec<IdMask>>,
}

pub struct TrainData {
    pub episodes: Vec<LoadedEpisode>,
    pub train_views: Vec<Vec<usize>>,
    pub intrinsics: Vec<Vec<Intrinsics>>,
    /// pose_m_to_n[ep][m][n], None when extrinsics are unavailable
    poses: Vec<Vec<Vec<Option<Pose>>>>,
    pub normalizer: Normalizer,
    pub episode_len: usize,
    pub width: usize,
    pub height: usize,
}

impl TrainData {
    pub fn load(ds: &Dataset) -> Result<TrainData> {
        let m = &ds.manifest;
        let mut episodes = Vec::with_capacity(m.episodes.len());
        let mut train_views = Vec::new();
        let mut intrinsics = Vec::new();
        let mut poses = Vec::new();
        for (ep, entry) in m.episodes.iter().enumerate() {
            let views = entry.cameras.len();
            let mut rgbs = Vec::with_capacity(views);
            let mut depths = Vec::with_capacity(views);
            let mut masks = Vec::with_capacity(views);
            for v in 0..views {
                let mut rv = Vec::with_capacity(m.episode_len);
                let mut dv = Vec::with_capacity(m.episode_len);
                let mut mv = Vec::with_capacity(m.episode_len);
                for t in 0..m.episode_len {
                    rv.push(ds.load_rgb(ep, v, t)?);
                    dv.push(ds.load_depth(ep, v, t)?);
                    mv.push(ds.load_mask(ep, v, t)?);
                }
                rgbs.push(rv);
                depths.push(dv);
                masks.push(mv);
            }
            episodes.push(LoadedEpisode {
                rgbs,
                depths,
                masks,
            });
            train_views.push(ds.views_of(ep, Split::Train)?);
            intrinsics.push(entry.cameras.iter().map(|c| c.intrinsics.clone()).collect());
            let mut per_pair = vec![vec![None; views]; views];
            for a in 0..views {
                for b in 0..views {
                    if a != b {
                        per_pair[a][b] = ds.pose_a_to_b(ep, a, b).ok();
                    }
                }
            }
            poses.push(per_pair);
        }
        Ok(TrainData {
            episodes,
            train_views,
            intrinsics,
            poses,
            normalizer: m.normalizer.clone(),
            episode_len: m.episode_len,
            width: m.width,
            height: m.height,
        })
    }

    pub fn pose_m_to_n(&self, ep: usize, m: usize, n: usize) -> Result<&Pose> {
        self.poses[ep][m][n]
            .as_ref()
            .ok_or_else(|| Error::MissingFrame(format!("ep {ep}: extrinsics for pair {m}->{n}")))
    }
}

// ---- cropping -------------------------------------------------------------------

pub fn crop_rgb(img: &RgbImage, ox: usize, oy: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h * 3];
    for j in 0..h {
        let src = ((oy + j) * img.width + ox) * 3;
        out[j * w * 3..(j + 1) * w * 3].copy_from_slice(&img.data[src..src + w * 3]);
    }
    out
}

pub fn crop_depth(d: &DepthMap, ox: usize, oy: usize, w: usize, h: usize) -> DepthMap {
    let mut values = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    for j in 0..h {
        for i in 0..w {
            let src = (oy + j) * d.width + ox + i;
            values[j * w + i] = d.values[src];
            valid[j * w + i] = d.valid[src];
        }
    }
    DepthMap {
        width: w,
        height: h,
        values,
        valid,
    }
}

pub fn crop_mask(m: &IdMask, ox: usize, oy: usize, w: usize, h: usize) -> IdMask {
    let mut data = vec![0u8; w * h];
    for j in 0..h {
        let src = (oy + j) * m.width + ox;
        data[j * w..(j + 1) * w].copy_from_slice(&m.data[src..src + w]);
    }
    IdMask {
        width: w,
        height: h,
        data,
    }
}

/// Normalized camera-frame pointmap of a cropped depth map, optionally
/// re-expressed through `pose` first, flattened [H, W, 3].
pub fn pm_channels(
    depth: &DepthMap,
    k: &Intrinsics,
    frame: FrameId,
    pose: Option<&Pose>,
    normalizer: &Normalizer,
) -> Result<(Vec<f32>, FrameId)> {
    let pm = lift_depth(depth, k, frame)?;
    let pm = match pose {
        Some(p) => transform_pointmap(&pm, p)?,
        None => pm,
    };
    let mut buf = pm.points.clone();
    normalizer.normalize_buf(&mut buf);
    Ok((buf, pm.frame))
}

/// Token-resolution gripper weight map: a token is set when any pixel of its
/// patch belongs to the gripper.
pub fn gripper_token_map(mask: &IdMask, patch: usize) -> Vec<f32> {
    let (tx, ty) = (mask.width / patch, mask.height / patch);
    let mut out = vec![0.0f32; tx * ty];
    for (s, o) in out.iter_mut().enumerate() {
        let (sy, sx) = (s / tx, s % tx);
        'patch: for py in 0..patch {
            for px in 0..patch {
                let id = mask.data[(sy * patch + py) * mask.width + sx * patch + px];
                if GRIPPER_IDS.contains(&id) {
                    *o = 1.0;
                    break 'patch;
                }
            }
        }
    }
    out
}

// ---- batches --------------------------------------------------------------------

/// One training sample address: episode, conditioning time, ordered view
/// pair, per-view crop offsets, and the shared diffusion step.
#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub ep: usize,
    pub t0: usize,
    pub view_n: usize,
    pub view_m: usize,
    pub crop_n: (usize, usize),
    pub crop_m: (usize, usize),
    pub k: usize,
}

/// Assembled training batch: conditioning, clean targets z0, noised inputs
/// z_k and gripper token weights for all four streams.
pub struct Batch {
    pub specs: Vec<SampleSpec>,
    pub k: Vec<usize>,
    pub cond_n: CondBatch,
    pub cond_m: CondBatch,
    pub z0_rgb_n: Tensor,
    pub z0_rgb_m: Tensor,
    pub z0_pm_n: Tensor,
    pub z0_pm_m: Tensor,
    pub zk_rgb_n: Tensor,
    pub zk_rgb_m: Tensor,
    pub zk_pm_n: Tensor,
    pub zk_pm_m: Tensor,
    /// Binary [B, N] gripper token maps per view.
    pub w_n: Tensor,
    pub w_m: Tensor,
    /// Frame carried by each element's projected pointmap target, with the
    /// frame it must equal (view n's camera frame).
    pub pm_m_frames: Vec<(FrameId, FrameId)>,
}

/// Draws batch specs uniformly over episodes, valid conditioning times and
/// ordered train-view pairs.
pub fn draw_specs(
    data: &TrainData,
    cfg: &DenoiserConfig,
    batch: usize,
    k_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleSpec>> {
    let t0_max = data
        .episode_len
        .checked_sub(cfg.horizon + 1)
        .ok_or_else(|| {
            Error::Config(format!(
                "episode length {} shorter than horizon {} + 1",
                data.episode_len, cfg.horizon
            ))
        })?;
    let crop_span = (data.width - cfg.width, data.height - cfg.height);
    let mut specs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ep = rng.gen_range(0..data.episodes.len());
        let views = &data.train_views[ep];
        if views.len() < 2 {
            return Err(Error::Config(format!("episode {ep} has < 2 train views")));
        }
        let a = rng.gen_range(0..views.len());
        let mut b = rng.gen_range(0..views.len() - 1);
        if b >= a {
            b += 1;
        }
        let mut crop = || {
            (
                if crop_span.0 > 0 { rng.gen_range(0..=crop_span.0) } else { 0 },
                if crop_span.1 > 0 { rng.gen_range(0..=crop_span.1) } else { 0 },
            )
        };
        let crop_n = crop();
        let crop_m = crop();
        specs.push(SampleSpec {
            ep,
            t0: rng.gen_range(0..=t0_max),
            view_n: views[a],
            view_m: views[b],
            crop_n,
            crop_m,
            k: rng.gen_range(1..=k_steps),
        });
    }
    Ok(specs)
}

struct StreamAccum {
    z0: Vec<f32>,
    n: usize,
    f: usize,
}

impl StreamAccum {
    fn new() -> Self {
        StreamAccum {
            z0: Vec::new(),
            n: 0,
            f: 0,
        }
    }

    fn push_frames(&mut self, codec: &PatchCodec, frames: &[Vec<f32>]) {
        self.n = codec.tokens_per_frame() * frames.len();
        self.f = codec.token_features();
        for frame in frames {
            self.z0.extend_from_slice(&codec.encode_frame(frame));
        }
    }

    fn into_tensor(self, batch: usize) -> Result<Tensor> {
        Tensor::from_vec(vec![batch, self.n, self.f], self.z0)
    }
}

/// Builds a full training batch. Noise is drawn from `rng` in a fixed order
/// (per element: rgb_n, rgb_m, pm_n, pm_m).
pub fn build_batch(
    data: &TrainData,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    specs: &[SampleSpec],
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let codec = cfg.codec()?;
    let batch = specs.len();
    let (w, h) = (cfg.width, cfg.height);

    let mut cond_n_items = Vec::with_capacity(batch);
    let mut cond_m_items = Vec::with_capacity(batch);
    let mut rgb_n = StreamAccum::new();
    let mut rgb_m = StreamAccum::new();
    let mut pm_n = StreamAccum::new();
    let mut pm_m = StreamAccum::new();
    let mut w_n_map = Vec::new();
    let mut w_m_map = Vec::new();
    let mut pm_m_frames = Vec::with_capacity(batch);

    for spec in specs {
        let ep = &data.episodes[spec.ep];
        let frame_n = FrameId::view(spec.ep, spec.view_n);
        let frame_m = FrameId::view(spec.ep, spec.view_m);
        let k_n = data.intrinsics[spec.ep][spec.view_n]
            .cropped(spec.crop_n.0, spec.crop_n.1, w, h)?;
        let k_m = data.intrinsics[spec.ep][spec.view_m]
            .cropped(spec.crop_m.0, spec.crop_m.1, w, h)?;
        let pose_m_to_n = data.pose_m_to_n(spec.ep, spec.view_m, spec.view_n)?;
        pm_m_frames.push((pose_m_to_n.to_frame().clone(), frame_n.clone()));

        // conditioning from the latest observation of each view
        for (view, crop, k_cam, frame, items) in [
            (spec.view_n, spec.crop_n, &k_n, &frame_n, &mut cond_n_items),
            (spec.view_m, spec.crop_m, &k_m, &frame_m, &mut cond_m_items),
        ] {
            let rgb = crop_rgb(&ep.rgbs[view][spec.t0], crop.0, crop.1, w, h);
            let depth = crop_depth(&ep.depths[view][spec.t0], crop.0, crop.1, w, h);
            let (pm, _) = pm_channels(&depth, k_cam, frame.clone(), None, &data.normalizer)?;
            items.push(encode_condition(&codec, cfg.horizon, &[rgb], &[pm])?);
        }

        // clean targets over the horizon
        let mut frames_rgb_n = Vec::with_capacity(cfg.horizon);
        let mut frames_rgb_m = Vec::with_capacity(cfg.horizon);
        let mut frames_pm_n = Vec::with_capacity(cfg.horizon);
        let mut frames_pm_m = Vec::with_capacity(cfg.horizon);
        for t in spec.t0 + 1..=spec.t0 + cfg.horizon {
            frames_rgb_n.push(crop_rgb(&ep.rgbs[spec.view_n][t], spec.crop_n.0, spec.crop_n.1, w, h));
            frames_rgb_m.push(crop_rgb(&ep.rgbs[spec.view_m][t], spec.crop_m.0, spec.crop_m.1, w, h));

            let depth_n = crop_depth(&ep.depths[spec.view_n][t], spec.crop_n.0, spec.crop_n.1, w, h);
            let (pm, _) = pm_channels(&depth_n, &k_n, frame_n.clone(), None, &data.normalizer)?;
            frames_pm_n.push(pm);

            let depth_m = crop_depth(&ep.depths[spec.view_m][t], spec.crop_m.0, spec.crop_m.1, w, h);
            let (pm, _) = pm_channels(
                &depth_m,
                &k_m,
                frame_m.clone(),
                Some(pose_m_to_n),
                &data.normalizer,
            )?;
            frames_pm_m.push(pm);

            let mask_n = crop_mask(&ep.masks[spec.view_n][t], spec.crop_n.0, spec.crop_n.1, w, h);
            let mask_m = crop_mask(&ep.masks[spec.view_m][t], spec.crop_m.0, spec.crop_m.1, w, h);
            w_n_map.extend_from_slice(&gripper_token_map(&mask_n, cfg.patch));
            w_m_map.extend_from_slice(&gripper_token_map(&mask_m, cfg.patch));
        }
        rgb_n.push_frames(&codec, &frames_rgb_n);
        rgb_m.push_frames(&codec, &frames_rgb_m);
        pm_n.push_frames(&codec, &frames_pm_n);
        pm_m.push_frames(&codec, &frames_pm_m);
    }

    let z0_rgb_n = rgb_n.into_tensor(batch)?;
    let z0_rgb_m = rgb_m.into_tensor(batch)?;
    let z0_pm_n = pm_n.into_tensor(batch)?;
    let z0_pm_m = pm_m.into_tensor(batch)?;

    let ks: Vec<usize> = specs.iter().map(|s| s.k).collect();
    let shape = z0_rgb_n.shape().to_vec();
    let mut noise = |_| Tensor::randn(shape.clone(), rng);
    let eps_rgb_n = noise(0);
    let eps_rgb_m = noise(1);
    let eps_pm_n = noise(2);
    let eps_pm_m = noise(3);

    Ok(Batch {
        k: ks.clone(),
        cond_n: CondBatch::stack(&cond_n_items.iter().collect::<Vec<&Conditioning>>())?,
        cond_m: CondBatch::stack(&cond_m_items.iter().collect::<Vec<&Conditioning>>())?,
        zk_rgb_n: q_sample_batched(&z0_rgb_n, &ks, &eps_rgb_n, schedule)?,
        zk_rgb_m: q_sample_batched(&z0_rgb_m, &ks, &eps_rgb_m, schedule)?,
        zk_pm_n: q_sample_batched(&z0_pm_n, &ks, &eps_pm_n, schedule)?,
        zk_pm_m: q_sample_batched(&z0_pm_m, &ks, &eps_pm_m, schedule)?,
        z0_rgb_n,
        z0_rgb_m,
        z0_pm_n,
        z0_pm_m,
        w_n: Tensor::from_vec(vec![batch, cfg.seq_len()], w_n_map)?,
        w_m: Tensor::from_vec(vec![batch, cfg.seq_len()], w_m_map)?,
        pm_m_frames,
        specs: specs.to_vec(),
    })
}
