//! The two-view denoiser: a token/attention network with one trunk per
//! modality (RGB, pointmap), an RGB decoder shared across views, and two
//! pointmap decoders (native view n, projected view m->n). Branch m reads
//! branch n's decoder features through one cross-attention layer after each
//! of its decoder blocks; that coupling is the mechanism under test and can
//! be disabled for ablations.
//!
//! Frames enter the network through an exactly invertible space-to-depth
//! patch codec; there is no learned encoder/decoder around the latent space.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

const NORM_EPS: f32 = 1e-5;

/// Space-to-depth tokenizer: decode(encode(x)) == x bitwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCodec {
    pub patch: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl PatchCodec {
    pub fn new(patch: usize, width: usize, height: usize, channels: usize) -> Result<Self> {
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {patch} must divide {width}x{height}"
            )));
        }
        Ok(PatchCodec {
            patch,
            width,
            height,
            channels,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    /// Features per token: patch^2 * channels.
    pub fn token_features(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// [H, W, C] row-major -> [S, F] row-major token features.
    pub fn encode_frame(&self, hwc: &[f32]) -> Vec<f32> {
        assert_eq!(hwc.len(), self.width * self.height * self.channels);
        let (p, w, c) = (self.patch, self.width, self.channels);
        let tx_count = self.width / p;
        let mut out = vec![0.0f32; hwc.len()];
        let f = self.token_features();
        for s in 0..self.tokens_per_frame() {
            let (ty, tx) = (s / tx_count, s % tx_count);
            for py in 0..p {
                for px in 0..p {
                    let src = ((ty * p + py) * w + tx * p + px) * c;
                    let dst = s * f + (py * p + px) * c;
                    out[dst..dst + c].copy_from_slice(&hwc[src..src + c]);
                }
            }
        }
        out
    }

    /// [S, F] token features -> [H, W, C], exact inverse of encode.
    pub fn decode_frame(&self, tokens: &[f32]) -> Vec<f32> {
        assert_eq!(tokens.len(), self.width * self.height * self.channels);
        let (p, w, c) = (self.patch, self.width, self.channels);
        let tx_count = self.width / p;
        let mut out = vec![0.0f32; tokens.len()];
        let f = self.token_features();
        for s in 0..self.tokens_per_frame() {
            let (ty, tx) = (s / tx_count, s % tx_count);
            for py in 0..p {
                for px in 0..p {
                    let dst = ((ty * p + py) * w + tx * p + px) * c;
                    let src = s * f + (py * p + px) * c;
                    out[dst..dst + c].copy_from_slice(&tokens[src..src + c]);
                }
            }
        }
        out
    }
}

/// Input channel-group slots of the combined token features.
pub const GROUP_COND_RGB: usize = 0;
pub const GROUP_COND_PM: usize = 1;
pub const GROUP_NOISY_RGB: usize = 2;
pub const GROUP_NOISY_PM: usize = 3;
pub const CHANNEL_GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Token embedding dim.
    pub dim: usize,
    pub heads: usize,
    /// Trunk depth (shared per modality).
    pub enc_blocks: usize,
    /// Decoder depth (per output stream).
    pub dec_blocks: usize,
    /// Future horizon h: frames predicted per call.
    pub horizon: usize,
    pub patch: usize,
    /// Input channel-group multiplicity (conditioning RGB + conditioning
    /// pointmap + noisy RGB slot + noisy pointmap slot).
    pub channel_groups: usize,
    /// Spatial dims the model operates on (the training crop).
    pub width: usize,
    pub height: usize,
    /// Number of distinct diffusion steps the timestep table covers (K + 1).
    pub time_levels: usize,
    /// Multi-view cross-attention in the m-branch decoder (ablation switch).
    pub cross_attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 128,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            horizon: 10,
            patch: 4,
            channel_groups: CHANNEL_GROUPS,
            width: 40,
            height: 32,
            time_levels: 101,
            cross_attention: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.channel_groups != CHANNEL_GROUPS {
            return Err(Error::Config(format!(
                "channel_groups must be {CHANNEL_GROUPS}, got {}",
                self.channel_groups
            )));
        }
        if self.horizon == 0 || self.time_levels < 2 {
            return Err(Error::Config("horizon and time_levels must be positive".into()));
        }
        self.codec()?;
        Ok(())
    }

    pub fn codec(&self) -> Result<PatchCodec> {
        PatchCodec::new(self.patch, self.width, self.height, 3)
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    /// Sequence length: horizon frames of tokens.
    pub fn seq_len(&self) -> usize {
        self.horizon * self.tokens_per_frame()
    }

    /// Per-stream token feature width (one channel group).
    pub fn frame_features(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn in_features(&self) -> usize {
        self.channel_groups * self.frame_features()
    }
}

/// Latest-observation conditioning for one view: the newest RGB frame and
/// (normalized) pointmap, patch-encoded and repeated over the horizon.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// [seq_len, F]
    pub rgb: Tensor,
    /// [seq_len, F]
    pub pm: Tensor,
}

/// Builds conditioning from per-view history. Only the latest frame is used,
/// tiled `horizon` times along the time axis.
pub fn encode_condition(
    codec: &PatchCodec,
    horizon: usize,
    history_rgb: &[Vec<f32>],
    history_pm: &[Vec<f32>],
) -> Result<Conditioning> {
    let latest_rgb = history_rgb
        .last()
        .ok_or_else(|| Error::InvalidArgument("conditioning: empty RGB history".into()))?;
    let latest_pm = history_pm
        .last()
        .ok_or_else(|| Error::InvalidArgument("conditioning: empty pointmap history".into()))?;
    let s = codec.tokens_per_frame();
    let f = codec.token_features();
    let tile = |frame: &[f32]| -> Result<Tensor> {
        let tokens = codec.encode_frame(frame);
        let mut data = Vec::with_capacity(horizon * tokens.len());
        for _ in 0..horizon {
            data.extend_from_slice(&tokens);
        }
        Tensor::from_vec(vec![horizon * s, f], data)
    };
    Ok(Conditioning {
        rgb: tile(latest_rgb)?,
        pm: tile(latest_pm)?,
    })
}

/// Batched conditioning: [B, seq_len, F] per stream.
#[derive(Clone, Debug)]
pub struct CondBatch {
    pub rgb: Tensor,
    pub pm: Tensor,
}

impl CondBatch {
    /// Stacks per-element conditioning into batch tensors.
    pub fn stack(items: &[&Conditioning]) -> Result<CondBatch> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty conditioning batch".into()));
        }
        let (n, f) = (items[0].rgb.shape()[0], items[0].rgb.shape()[1]);
        let mut rgb = Vec::with_capacity(items.len() * n * f);
        let mut pm = Vec::with_capacity(items.len() * n * f);
        for c in items {
            rgb.extend_from_slice(c.rgb.data());
            pm.extend_from_slice(c.pm.data());
        }
        Ok(CondBatch {
            rgb: Tensor::from_vec(vec![items.len(), n, f], rgb)?,
            pm: Tensor::from_vec(vec![items.len(), n, f], pm)?,
        })
    }
}

/// Which view an RGB forward is serving. The RGB branch weights are shared
/// across views, so the label never changes the output; it exists to keep
/// call sites explicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewRole {
    Reference,
    Secondary,
}

// ---- parameters ----------------------------------------------------------------

#[derive(Clone, Debug)]
struct Block {
    norm1: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    norm2: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Clone, Debug)]
struct CrossBlock {
    norm_q: Tensor,
    norm_kv: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

#[derive(Clone, Debug)]
struct Proj {
    w: Tensor,
    b: Tensor,
}

#[derive(Clone, Debug)]
struct OutHead {
    norm: Tensor,
    w: Tensor,
    b: Tensor,
}

/// All learnable weights of the denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    cfg: DenoiserConfig,
    time_embed: Tensor,
    pos_time: Tensor,
    pos_space: Tensor,
    rgb_in: Proj,
    rgb_trunk: Vec<Block>,
    rgb_decoder: Vec<Block>,
    rgb_out: OutHead,
    pm_in: Proj,
    pm_trunk: Vec<Block>,
    pm_dec_n: Vec<Block>,
    pm_dec_m: Vec<Block>,
    pm_cross: Vec<CrossBlock>,
    pm_out_n: OutHead,
    pm_out_m: OutHead,
}

struct Init {
    rng: ChaCha8Rng,
    residual_scale: f32,
}

impl Init {
    fn weight(&mut self, rows: usize, cols: usize, scale: f32) -> Tensor {
        let std = scale / (rows as f32).sqrt();
        let data = (0..rows * cols)
            .map(|_| normal(&mut self.rng) * std)
            .collect();
        Tensor::from_vec(vec![rows, cols], data)
            .expect("init buffer matches dims")
            .with_requires_grad()
    }

    fn embed(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| normal(&mut self.rng) * 0.02)
            .collect();
        Tensor::from_vec(vec![rows, cols], data)
            .expect("init buffer matches dims")
            .with_requires_grad()
    }

    fn ones(&mut self, n: usize) -> Tensor {
        Tensor::full(vec![n], 1.0).with_requires_grad()
    }

    fn zeros(&mut self, n: usize) -> Tensor {
        Tensor::zeros(vec![n]).with_requires_grad()
    }

    fn block(&mut self, d: usize) -> Block {
        let hidden = 4 * d;
        let rs = self.residual_scale;
        Block {
            norm1: self.ones(d),
            wq: self.weight(d, d, 1.0),
            wk: self.weight(d, d, 1.0),
            wv: self.weight(d, d, 1.0),
            wo: self.weight(d, d, rs),
            norm2: self.ones(d),
            w1: self.weight(d, hidden, 1.0),
            b1: self.zeros(hidden),
            w2: self.weight(hidden, d, rs),
            b2: self.zeros(d),
        }
    }

    fn cross_block(&mut self, d: usize) -> CrossBlock {
        let rs = self.residual_scale;
        CrossBlock {
            norm_q: self.ones(d),
            norm_kv: self.ones(d),
            wq: self.weight(d, d, 1.0),
            wk: self.weight(d, d, 1.0),
            wv: self.weight(d, d, 1.0),
            wo: self.weight(d, d, rs),
        }
    }

    fn out_head(&mut self, d: usize, f: usize) -> OutHead {
        OutHead {
            norm: self.ones(d),
            w: self.weight(d, f, 0.1),
            b: self.zeros(f),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

impl DenoiserParams {
    pub fn new(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let f_in = cfg.in_features();
        let f_out = cfg.frame_features();
        let total_blocks = 2 * (cfg.enc_blocks + cfg.dec_blocks);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            residual_scale: 1.0 / (2.0 * total_blocks as f32).sqrt(),
        };

        Ok(DenoiserParams {
            cfg: cfg.clone(),
            time_embed: init.embed(cfg.time_levels, d),
            pos_time: init.embed(cfg.horizon, d),
            pos_space: init.embed(cfg.tokens_per_frame(), d),
            rgb_in: Proj {
                w: init.weight(f_in, d, 1.0),
                b: init.zeros(d),
            },
            rgb_trunk: (0..cfg.enc_blocks).map(|_| init.block(d)).collect(),
            rgb_decoder: (0..cfg.dec_blocks).map(|_| init.block(d)).collect(),
            rgb_out: init.out_head(d, f_out),
            pm_in: Proj {
                w: init.weight(f_in, d, 1.0),
                b: init.zeros(d),
            },
            pm_trunk: (0..cfg.enc_blocks).map(|_| init.block(d)).collect(),
            pm_dec_n: (0..cfg.dec_blocks).map(|_| init.block(d)).collect(),
            pm_dec_m: (0..cfg.dec_blocks).map(|_| init.block(d)).collect(),
            pm_cross: if cfg.cross_attention {
                (0..cfg.dec_blocks).map(|_| init.cross_block(d)).collect()
            } else {
                Vec::new()
            },
            pm_out_n: init.out_head(d, f_out),
            pm_out_m: init.out_head(d, f_out),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("time_embed".into(), &self.time_embed));
        out.push(("pos_time".into(), &self.pos_time));
        out.push(("pos_space".into(), &self.pos_space));
        push_proj(&mut out, "rgb.in", &self.rgb_in);
        push_blocks(&mut out, "rgb.trunk", &self.rgb_trunk);
        push_blocks(&mut out, "rgb.dec", &self.rgb_decoder);
        push_head(&mut out, "rgb.out", &self.rgb_out);
        push_proj(&mut out, "pm.in", &self.pm_in);
        push_blocks(&mut out, "pm.trunk", &self.pm_trunk);
        push_blocks(&mut out, "pm.dec_n", &self.pm_dec_n);
        push_blocks(&mut out, "pm.dec_m", &self.pm_dec_m);
        for (i, cb) in self.pm_cross.iter().enumerate() {
            for (suffix, t) in [
                ("norm_q", &cb.norm_q),
                ("norm_kv", &cb.norm_kv),
                ("wq", &cb.wq),
                ("wk", &cb.wk),
                ("wv", &cb.wv),
                ("wo", &cb.wo),
            ] {
                out.push((format!("pm.cross.{i}.{suffix}"), t));
            }
        }
        push_head(&mut out, "pm.out_n", &self.pm_out_n);
        push_head(&mut out, "pm.out_m", &self.pm_out_m);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("time_embed".into(), &mut self.time_embed));
        out.push(("pos_time".into(), &mut self.pos_time));
        out.push(("pos_space".into(), &mut self.pos_space));
        push_proj_mut(&mut out, "rgb.in", &mut self.rgb_in);
        push_blocks_mut(&mut out, "rgb.trunk", &mut self.rgb_trunk);
        push_blocks_mut(&mut out, "rgb.dec", &mut self.rgb_decoder);
        push_head_mut(&mut out, "rgb.out", &mut self.rgb_out);
        push_proj_mut(&mut out, "pm.in", &mut self.pm_in);
        push_blocks_mut(&mut out, "pm.trunk", &mut self.pm_trunk);
        push_blocks_mut(&mut out, "pm.dec_n", &mut self.pm_dec_n);
        push_blocks_mut(&mut out, "pm.dec_m", &mut self.pm_dec_m);
        for (i, cb) in self.pm_cross.iter_mut().enumerate() {
            for (suffix, t) in [
                ("norm_q", &mut cb.norm_q),
                ("norm_kv", &mut cb.norm_kv),
                ("wq", &mut cb.wq),
                ("wk", &mut cb.wk),
                ("wv", &mut cb.wv),
                ("wo", &mut cb.wo),
            ] {
                out.push((format!("pm.cross.{i}.{suffix}"), t));
            }
        }
        push_head_mut(&mut out, "pm.out_n", &mut self.pm_out_n);
        push_head_mut(&mut out, "pm.out_m", &mut self.pm_out_m);
        out
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.named_params()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Overwrites every parameter from named checkpoint entries.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut params = self.named_params_mut();
        for (name, param) in params.iter_mut() {
            let src = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))?;
            if src.1.shape() != param.shape() {
                return Err(Error::Format(format!(
                    "checkpoint entry {name}: shape {:?} vs expected {:?}",
                    src.1.shape(),
                    param.shape()
                )));
            }
            param.replace_data(src.1.data().to_vec());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    // ---- forward ----------------------------------------------------------

    fn check_tokens(&self, label: &'static str, z: &Tensor) -> Result<usize> {
        let want_n = self.cfg.seq_len();
        let want_f = self.cfg.frame_features();
        if z.rank() != 3 || z.shape()[1] != want_n || z.shape()[2] != want_f {
            return Err(Error::ShapeMismatch {
                op: label,
                lhs: z.shape().to_vec(),
                rhs: vec![z.shape().first().copied().unwrap_or(0), want_n, want_f],
            });
        }
        Ok(z.shape()[0])
    }

    fn check_steps(&self, k: &[usize], batch: usize) -> Result<()> {
        if k.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "got {} diffusion steps for batch {batch}",
                k.len()
            )));
        }
        for &ki in k {
            if ki >= self.cfg.time_levels {
                return Err(Error::InvalidArgument(format!(
                    "diffusion step {ki} out of range [0, {})",
                    self.cfg.time_levels
                )));
            }
        }
        Ok(())
    }

    /// Shared position + timestep embedding added to projected input tokens.
    fn embed(
        &self,
        tape: &Tape,
        proj: &Proj,
        groups: [&Tensor; CHANNEL_GROUPS],
        k: &[usize],
    ) -> Result<Tensor> {
        let x = tape.concat(&[groups[0], groups[1], groups[2], groups[3]], 2)?;
        let x = tape.matmul(&x, &proj.w)?;
        let x = tape.add(&x, &proj.b)?;

        let s = self.cfg.tokens_per_frame();
        let h = self.cfg.horizon;
        let d = self.cfg.dim;
        let n = self.cfg.seq_len();
        // time-major token order: position = pos_time[t] + pos_space[s]
        let pt = tape.repeat(&self.pos_time, 1, s)?;
        let pt = tape.reshape(&pt, vec![n, d])?;
        let ps = tape.repeat(&self.pos_space, 0, h)?;
        let ps = tape.reshape(&ps, vec![n, d])?;
        let pos = tape.add(&pt, &ps)?;
        let x = tape.add(&x, &pos)?;

        let temb = tape.index_rows(&self.time_embed, k)?;
        let temb = tape.repeat(&temb, 1, n)?;
        tape.add(&x, &temb)
    }

    fn heads_split(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let (heads, dh) = (self.cfg.heads, self.cfg.dim / self.cfg.heads);
        let x = tape.reshape(x, vec![b, n, heads, dh])?;
        let x = tape.transpose(&x, 1, 2)?;
        tape.reshape(&x, vec![b * heads, n, dh])
    }

    fn heads_merge(&self, tape: &Tape, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.shape()[1];
        let (heads, dh) = (self.cfg.heads, self.cfg.dim / self.cfg.heads);
        let x = tape.reshape(x, vec![batch, heads, n, dh])?;
        let x = tape.transpose(&x, 1, 2)?;
        tape.reshape(&x, vec![batch, n, heads * dh])
    }

    fn self_block(&self, tape: &Tape, blk: &Block, x: &Tensor) -> Result<Tensor> {
        let batch = x.shape()[0];
        let a = tape.rms_norm(x, NORM_EPS)?;
        let a = tape.mul(&a, &blk.norm1)?;
        let q = self.heads_split(tape, &tape.matmul(&a, &blk.wq)?)?;
        let k = self.heads_split(tape, &tape.matmul(&a, &blk.wk)?)?;
        let v = self.heads_split(tape, &tape.matmul(&a, &blk.wv)?)?;
        let att = tape.attention(&q, &k, &v)?;
        let att = self.heads_merge(tape, &att, batch)?;
        let x = tape.add(x, &tape.matmul(&att, &blk.wo)?)?;

        let m = tape.rms_norm(&x, NORM_EPS)?;
        let m = tape.mul(&m, &blk.norm2)?;
        let hidden = tape.matmul(&m, &blk.w1)?;
        let hidden = tape.silu(&tape.add(&hidden, &blk.b1)?)?;
        let mlp = tape.add(&tape.matmul(&hidden, &blk.w2)?, &blk.b2)?;
        tape.add(&x, &mlp)
    }

    /// Query tokens read key/value tokens from the other branch; residual on
    /// the query side only, so zeroing `wo` severs the coupling entirely.
    fn cross(&self, tape: &Tape, cb: &CrossBlock, x_q: &Tensor, x_kv: &Tensor) -> Result<Tensor> {
        let batch = x_q.shape()[0];
        let q_in = tape.mul(&tape.rms_norm(x_q, NORM_EPS)?, &cb.norm_q)?;
        let kv_in = tape.mul(&tape.rms_norm(x_kv, NORM_EPS)?, &cb.norm_kv)?;
        let q = self.heads_split(tape, &tape.matmul(&q_in, &cb.wq)?)?;
        let k = self.heads_split(tape, &tape.matmul(&kv_in, &cb.wk)?)?;
        let v = self.heads_split(tape, &tape.matmul(&kv_in, &cb.wv)?)?;
        let att = tape.attention(&q, &k, &v)?;
        let att = self.heads_merge(tape, &att, batch)?;
        tape.add(x_q, &tape.matmul(&att, &cb.wo)?)
    }

    fn head(&self, tape: &Tape, head: &OutHead, x: &Tensor) -> Result<Tensor> {
        let x = tape.mul(&tape.rms_norm(x, NORM_EPS)?, &head.norm)?;
        tape.add(&tape.matmul(&x, &head.w)?, &head.b)
    }

    /// Predicts clean RGB tokens from noisy ones. Both views run through the
    /// same weights; `view` is a call-site label only.
    pub fn denoise_rgb(
        &self,
        tape: &Tape,
        z_k: &Tensor,
        k: &[usize],
        cond: &CondBatch,
        _view: ViewRole,
    ) -> Result<Tensor> {
        let b = self.check_tokens("denoise_rgb", z_k)?;
        self.check_steps(k, b)?;
        let zeros = Tensor::zeros(z_k.shape().to_vec());
        let mut x = self.embed(
            tape,
            &self.rgb_in,
            [&cond.rgb, &cond.pm, z_k, &zeros],
            k,
        )?;
        for blk in self.rgb_trunk.iter().chain(&self.rgb_decoder) {
            x = self.self_block(tape, blk, &x)?;
        }
        self.head(tape, &self.rgb_out, &x)
    }

    /// Predicts clean pointmap tokens for both branches. Branch n is the
    /// native view; branch m predicts in n's frame and, when enabled, reads
    /// n's decoder features after each of its own decoder blocks.
    pub fn denoise_pointmap_pair(
        &self,
        tape: &Tape,
        z_n: &Tensor,
        z_m: &Tensor,
        k: &[usize],
        cond_n: &CondBatch,
        cond_m: &CondBatch,
    ) -> Result<(Tensor, Tensor)> {
        let b = self.check_tokens("denoise_pointmap_pair", z_n)?;
        if z_n.shape() != z_m.shape() {
            return Err(Error::ShapeMismatch {
                op: "denoise_pointmap_pair",
                lhs: z_n.shape().to_vec(),
                rhs: z_m.shape().to_vec(),
            });
        }
        self.check_steps(k, b)?;
        let zeros = Tensor::zeros(z_n.shape().to_vec());
        let mut xn = self.embed(
            tape,
            &self.pm_in,
            [&cond_n.rgb, &cond_n.pm, &zeros, z_n],
            k,
        )?;
        let mut xm = self.embed(
            tape,
            &self.pm_in,
            [&cond_m.rgb, &cond_m.pm, &zeros, z_m],
            k,
        )?;
        for blk in &self.pm_trunk {
            xn = self.self_block(tape, blk, &xn)?;
            xm = self.self_block(tape, blk, &xm)?;
        }
        for i in 0..self.cfg.dec_blocks {
            xn = self.self_block(tape, &self.pm_dec_n[i], &xn)?;
            xm = self.self_block(tape, &self.pm_dec_m[i], &xm)?;
            if let Some(cb) = self.pm_cross.get(i) {
                xm = self.cross(tape, cb, &xm, &xn)?;
            }
        }
        Ok((
            self.head(tape, &self.pm_out_n, &xn)?,
            self.head(tape, &self.pm_out_m, &xm)?,
        ))
    }
}

fn push_proj<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a Proj) {
    out.push((format!("{prefix}.w"), &p.w));
    out.push((format!("{prefix}.b"), &p.b));
}

fn push_proj_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, p: &'a mut Proj) {
    out.push((format!("{prefix}.w"), &mut p.w));
    out.push((format!("{prefix}.b"), &mut p.b));
}

fn push_blocks<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, blocks: &'a [Block]) {
    for (i, blk) in blocks.iter().enumerate() {
        for (suffix, t) in [
            ("norm1", &blk.norm1),
            ("wq", &blk.wq),
            ("wk", &blk.wk),
            ("wv", &blk.wv),
            ("wo", &blk.wo),
            ("norm2", &blk.norm2),
            ("w1", &blk.w1),
            ("b1", &blk.b1),
            ("w2", &blk.w2),
            ("b2", &blk.b2),
        ] {
            out.push((format!("{prefix}.{i}.{suffix}"), t));
        }
    }
}

fn push_blocks_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    blocks: &'a mut [Block],
) {
    for (i, blk) in blocks.iter_mut().enumerate() {
        for (suffix, t) in [
            ("norm1", &mut blk.norm1),
            ("wq", &mut blk.wq),
            ("wk", &mut blk.wk),
            ("wv", &mut blk.wv),
            ("wo", &mut blk.wo),
            ("norm2", &mut blk.norm2),
            ("w1", &mut blk.w1),
            ("b1", &mut blk.b1),
            ("w2", &mut blk.w2),
            ("b2", &mut blk.b2),
        ] {
            out.push((format!("{prefix}.{i}.{suffix}"), t));
        }
    }
}

fn push_head<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, h: &'a OutHead) {
    out.push((format!("{prefix}.norm"), &h.norm));
    out.push((format!("{prefix}.w"), &h.w));
    out.push((format!("{prefix}.b"), &h.b));
}

fn push_head_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, h: &'a mut OutHead) {
    out.push((format!("{prefix}.norm"), &mut h.norm));
    out.push((format!("{prefix}.w"), &mut h.w));
    out.push((format!("{prefix}.b"), &mut h.b));
}

/// Denoising interface for the sampler; test oracles provide fixed-point
/// implementations.
pub trait Denoiser {
    fn config(&self) -> &DenoiserConfig;
    fn rgb(
        &self,
        tape: &Tape,
        z_k: &Tensor,
        k: &[usize],
        cond: &CondBatch,
        view: ViewRole,
    ) -> Result<Tensor>;
    fn pointmap_pair(
        &self,
        tape: &Tape,
        z_n: &Tensor,
        z_m: &Tensor,
        k: &[usize],
        cond_n: &CondBatch,
        cond_m: &CondBatch,
    ) -> Result<(Tensor, Tensor)>;
}

impl Denoiser for DenoiserParams {
    fn config(&self) -> &DenoiserConfig {
        DenoiserParams::config(self)
    }

    fn rgb(
        &self,
        tape: &Tape,
        z_k: &Tensor,
        k: &[usize],
        cond: &CondBatch,
        view: ViewRole,
    ) -> Result<Tensor> {
        self.denoise_rgb(tape, z_k, k, cond, view)
    }

    fn pointmap_pair(
        &self,
        tape: &Tape,
        z_n: &Tensor,
        z_m: &Tensor,
        k: &[usize],
        cond_n: &CondBatch,
        cond_m: &CondBatch,
    ) -> Result<(Tensor, Tensor)> {
        self.denoise_pointmap_pair(tape, z_n, z_m, k, cond_n, cond_m)
    }
}

#[cfg(test)]
mod tests;
