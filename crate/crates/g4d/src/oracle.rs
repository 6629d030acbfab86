//! Independent f64 reference implementations used as oracles by the test
//! suites. Nothing here shares code with the f32 kernels: gradients are
//! checked by central finite differences of these references, scalar metric
//! loops are re-derived from their definitions, and the full denoiser has a
//! straight-line f64 forward that reads weights through the public API.

use crate::tensor::Tensor;

/// Central finite differences of a scalar f64 function.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max absolute deviation normalized by the reference's sup-norm.
pub fn max_rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &r)| m.max((a as f64 - r).abs()))
        / scale
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

// ---- f64 reference ops ------------------------------------------------------

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

pub fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softmax_row64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// softmax(q k^T / sqrt(d)) v over one batch element.
pub fn attention64(q: &[f64], k: &[f64], v: &[f64], tq: usize, tk: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    for r in 0..tq {
        let q_row = &q[r * d..(r + 1) * d];
        let logits: Vec<f64> = (0..tk)
            .map(|c| {
                let k_row = &k[c * d..(c + 1) * d];
                q_row.iter().zip(k_row).map(|(&x, &y)| x * y).sum::<f64>() * scale
            })
            .collect();
        let probs = softmax_row64(&logits);
        for (c, &p) in probs.iter().enumerate() {
            let v_row = &v[c * d..(c + 1) * d];
            for (o, &vv) in out[r * d..(r + 1) * d].iter_mut().zip(v_row) {
                *o += p * vv;
            }
        }
    }
    out
}

/// x / sqrt(mean(x^2) + eps), rows of width d.
pub fn rms_norm64(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<f64>() / d as f64 + eps;
        let ir = 1.0 / ms.sqrt();
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v * ir;
        }
    }
    out
}

// ---- f64 reference denoiser ---------------------------------------------------

use std::collections::HashMap;

use crate::model::{DenoiserConfig, DenoiserParams, CHANNEL_GROUPS};

/// Straight-line f64 re-implementation of the denoiser forward pass, built
/// from a model's named parameters. Used to finite-difference the full
/// network without f32 evaluation noise.
pub struct RefDenoiser {
    cfg: DenoiserConfig,
    params: HashMap<String, Vec<f64>>,
    shapes: HashMap<String, Vec<usize>>,
}

impl RefDenoiser {
    pub fn from_model(model: &DenoiserParams) -> Self {
        let mut params = HashMap::new();
        let mut shapes = HashMap::new();
        for (name, t) in model.named_params() {
            params.insert(name.clone(), to_f64(t));
            shapes.insert(name, t.shape().to_vec());
        }
        RefDenoiser {
            cfg: model.config().clone(),
            params,
            shapes,
        }
    }

    /// Overwrites one scalar inside a named parameter (for FD probing).
    pub fn set_scalar(&mut self, name: &str, index: usize, value: f64) {
        self.params.get_mut(name).expect("known param")[index] = value;
    }

    pub fn get_scalar(&self, name: &str, index: usize) -> f64 {
        self.params[name][index]
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params[name]
    }

    fn rows(&self, name: &str) -> usize {
        self.shapes[name][0]
    }

    fn cols(&self, name: &str) -> usize {
        self.shapes[name][1]
    }

    fn rms_norm_gain(&self, x: &[f64], d: usize, gain: &str) -> Vec<f64> {
        let g = self.p(gain);
        let mut out = rms_norm64(x, d, 1e-5_f32 as f64);
        for row in out.chunks_exact_mut(d) {
            for (v, &gv) in row.iter_mut().zip(g) {
                *v *= gv;
            }
        }
        out
    }

    /// Multi-head self/cross attention matching the f32 head split.
    fn mha(&self, q_in: &[f64], kv_in: &[f64], n_q: usize, n_kv: usize, prefix: &str, names: [&str; 4]) -> Vec<f64> {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let q = matmul64(q_in, self.p(&format!("{prefix}.{}", names[0])), n_q, d, d);
        let k = matmul64(kv_in, self.p(&format!("{prefix}.{}", names[1])), n_kv, d, d);
        let v = matmul64(kv_in, self.p(&format!("{prefix}.{}", names[2])), n_kv, d, d);
        let mut merged = vec![0.0; n_q * d];
        for h in 0..heads {
            let gather = |src: &[f64], n: usize| -> Vec<f64> {
                let mut out = vec![0.0; n * dh];
                for r in 0..n {
                    out[r * dh..(r + 1) * dh]
                        .copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
                }
                out
            };
            let att = attention64(&gather(&q, n_q), &gather(&k, n_kv), &gather(&v, n_kv), n_q, n_kv, dh);
            for r in 0..n_q {
                merged[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&att[r * dh..(r + 1) * dh]);
            }
        }
        matmul64(&merged, self.p(&format!("{prefix}.{}", names[3])), n_q, d, d)
    }

    fn block(&self, x: &mut Vec<f64>, n: usize, prefix: &str) {
        let d = self.cfg.dim;
        let a = self.rms_norm_gain(x, d, &format!("{prefix}.norm1"));
        let att = self.mha(&a, &a, n, n, prefix, ["wq", "wk", "wv", "wo"]);
        for (xv, av) in x.iter_mut().zip(&att) {
            *xv += av;
        }
        let m = self.rms_norm_gain(x, d, &format!("{prefix}.norm2"));
        let hidden_dim = self.cols(&format!("{prefix}.w1"));
        let mut h1 = matmul64(&m, self.p(&format!("{prefix}.w1")), n, d, hidden_dim);
        let b1 = self.p(&format!("{prefix}.b1"));
        for row in h1.chunks_exact_mut(hidden_dim) {
            for (v, &b) in row.iter_mut().zip(b1) {
                *v = silu64(*v + b);
            }
        }
        let mut mlp = matmul64(&h1, self.p(&format!("{prefix}.w2")), n, hidden_dim, d);
        let b2 = self.p(&format!("{prefix}.b2"));
        for row in mlp.chunks_exact_mut(d) {
            for (v, &b) in row.iter_mut().zip(b2) {
                *v += b;
            }
        }
        for (xv, mv) in x.iter_mut().zip(&mlp) {
            *xv += mv;
        }
    }

    fn cross(&self, x_q: &mut Vec<f64>, x_kv: &[f64], n: usize, prefix: &str) {
        let d = self.cfg.dim;
        let q_in = self.rms_norm_gain(x_q, d, &format!("{prefix}.norm_q"));
        let kv_in = self.rms_norm_gain(x_kv, d, &format!("{prefix}.norm_kv"));
        let att = self.mha(&q_in, &kv_in, n, n, prefix, ["wq", "wk", "wv", "wo"]);
        for (xv, av) in x_q.iter_mut().zip(&att) {
            *xv += av;
        }
    }

    fn head(&self, x: &[f64], n: usize, prefix: &str) -> Vec<f64> {
        let d = self.cfg.dim;
        let f = self.cols(&format!("{prefix}.w"));
        let normed = self.rms_norm_gain(x, d, &format!("{prefix}.norm"));
        let mut out = matmul64(&normed, self.p(&format!("{prefix}.w")), n, d, f);
        let b = self.p(&format!("{prefix}.b"));
        for row in out.chunks_exact_mut(f) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        out
    }

    /// One batch element: groups are [cond_rgb, cond_pm, noisy_rgb, noisy_pm]
    /// each [N, F]; missing slots are zero.
    fn embed(&self, groups: [&[f64]; CHANNEL_GROUPS], k: usize, in_prefix: &str) -> Vec<f64> {
        let n = self.cfg.seq_len();
        let f = self.cfg.frame_features();
        let d = self.cfg.dim;
        let f_in = self.cfg.in_features();
        let mut cat = vec![0.0; n * f_in];
        for r in 0..n {
            for (g, src) in groups.iter().enumerate() {
                cat[r * f_in + g * f..r * f_in + (g + 1) * f]
                    .copy_from_slice(&src[r * f..(r + 1) * f]);
            }
        }
        let mut x = matmul64(&cat, self.p(&format!("{in_prefix}.w")), n, f_in, d);
        let b = self.p(&format!("{in_prefix}.b"));
        let s = self.cfg.tokens_per_frame();
        let pt = self.p("pos_time");
        let ps = self.p("pos_space");
        let te = self.p("time_embed");
        for r in 0..n {
            let (t_idx, s_idx) = (r / s, r % s);
            for c in 0..d {
                x[r * d + c] +=
                    b[c] + pt[t_idx * d + c] + ps[s_idx * d + c] + te[k * d + c];
            }
        }
        x
    }

    /// RGB forward for one batch element.
    pub fn rgb_forward(&self, z: &[f64], k: usize, cond_rgb: &[f64], cond_pm: &[f64]) -> Vec<f64> {
        let n = self.cfg.seq_len();
        let zeros = vec![0.0; z.len()];
        let mut x = self.embed([cond_rgb, cond_pm, z, &zeros], k, "rgb.in");
        for i in 0..self.cfg.enc_blocks {
            self.block(&mut x, n, &format!("rgb.trunk.{i}"));
        }
        for i in 0..self.cfg.dec_blocks {
            self.block(&mut x, n, &format!("rgb.dec.{i}"));
        }
        self.head(&x, n, "rgb.out")
    }

    /// Pointmap pair forward for one batch element.
    pub fn pm_pair_forward(
        &self,
        z_n: &[f64],
        z_m: &[f64],
        k: usize,
        cond_n: (&[f64], &[f64]),
        cond_m: (&[f64], &[f64]),
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.cfg.seq_len();
        let zeros = vec![0.0; z_n.len()];
        let mut xn = self.embed([cond_n.0, cond_n.1, &zeros, z_n], k, "pm.in");
        let mut xm = self.embed([cond_m.0, cond_m.1, &zeros, z_m], k, "pm.in");
        for i in 0..self.cfg.enc_blocks {
            self.block(&mut xn, n, &format!("pm.trunk.{i}"));
            self.block(&mut xm, n, &format!("pm.trunk.{i}"));
        }
        for i in 0..self.cfg.dec_blocks {
            self.block(&mut xn, n, &format!("pm.dec_n.{i}"));
            self.block(&mut xm, n, &format!("pm.dec_m.{i}"));
            if self.cfg.cross_attention {
                let snapshot = xn.clone();
                self.cross(&mut xm, &snapshot, n, &format!("pm.cross.{i}"));
            }
        }
        (self.head(&xn, n, "pm.out_n"), self.head(&xm, n, "pm.out_m"))
    }

    /// Number of f64 scalars stored for `name`.
    pub fn param_len(&self, name: &str) -> usize {
        self.params[name].len()
    }

    /// Names in model order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn rows_of(&self, name: &str) -> usize {
        self.rows(name)
    }
}

// ---- geometric sampling oracles ------------------------------------------------

/// Uniform-by-area samples on the surface of an axis-aligned box with the
/// given half extents, in body coordinates.
pub fn sample_cuboid_surface(
    half: [f64; 3],
    count: usize,
    rng: &mut impl rand::Rng,
) -> Vec<[f64; 3]> {
    let areas = [
        half[1] * half[2], // +-x faces
        half[0] * half[2], // +-y faces
        half[0] * half[1], // +-z faces
    ];
    let total: f64 = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.gen_range(0.0..total);
        let mut axis = 2;
        for (a, &area) in areas.iter().enumerate() {
            if pick < 2.0 * area {
                axis = a;
                break;
            }
            pick -= 2.0 * area;
        }
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut p = [0.0f64; 3];
        p[axis] = sign * half[axis];
        let others = [(axis + 1) % 3, (axis + 2) % 3];
        for &o in &others {
            p[o] = rng.gen_range(-half[o]..half[o]);
        }
        out.push(p);
    }
    out
}
