//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line (visible with `cargo test --test acceptance -- --nocapture`).
//! The training-based criteria use deliberately small configurations; their
//! wall-clock budgets are asserted.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use g4d::config::load_config;
use g4d::diffusion::{self, make_schedule, q_sample, sample, LossWeights};
use g4d::geometry::{
    lift_depth, project_points, reproject_mask, transform_pointmap, FrameId, Intrinsics, Mask,
    Pose,
};
use g4d::metrics;
use g4d::model::{
    CondBatch, Denoiser, DenoiserConfig, DenoiserParams, ViewRole, CHANNEL_GROUPS,
};
use g4d::oracle::{self, finite_diff, max_rel_err, RefDenoiser};
use g4d::synthscene::{
    generate_dataset, render_frame, sample_cameras, script_trajectory, Dataset, DatasetConfig,
    GripperState, SceneSpec, SceneState, Split, GRIPPER_IDS,
};
use g4d::tensor::{Tape, Tensor};
use g4d::trajectory::{extract_trajectory, FourDFrame, FourDVideo};
use g4d::cli;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn leaf(shape: &[usize], lo: f32, hi: f32, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, r).with_requires_grad()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

// =============================================================================
// Criterion 1: gradient integrity
// =============================================================================

/// Checks one op: analytic f32 gradients of a weighted-sum projection vs
/// central finite differences of the f64 reference, for every input.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    out: Tensor,
    tape: &Tape,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    seed: u64,
) {
    let mut r = rng(seed ^ 0xC0FFEE);
    let c = Tensor::rand_uniform(out.shape().to_vec(), -1.0, 1.0, &mut r);
    let c64 = oracle::to_f64(&c);
    let weighted = tape.mul(&out, &c).unwrap();
    let axes: Vec<usize> = (0..weighted.rank()).collect();
    let loss = tape.sum(&weighted, &axes).unwrap();
    tape.backward(&loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(oracle::to_f64).collect();
    for (i, input) in inputs.iter().enumerate() {
        let f = |xs: &[f64]| -> f64 {
            let mut probe = base.clone();
            probe[i] = xs.to_vec();
            dot64(&reference(&probe), &c64)
        };
        let fd = finite_diff(f, &base[i], 1e-3);
        let analytic = input.grad().unwrap_or_else(|| vec![0.0; input.numel()]);
        let err = max_rel_err(&analytic, &fd);
        assert!(
            err < 1e-4,
            "{name} input {i} seed {seed}: rel err {err:.3e}"
        );
    }
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();

    for seed in 0..10u64 {
        // elementwise binary ops, same shape and broadcast
        for kind in 0..4usize {
            let tape = Tape::new();
            let mut r = rng(seed * 31 + kind as u64);
            let a = leaf(&[2, 3], -1.0, 1.0, &mut r);
            let b = leaf(&[2, 3], 0.6, 1.6, &mut r);
            let out = match kind {
                0 => tape.add(&a, &b),
                1 => tape.sub(&a, &b),
                2 => tape.mul(&a, &b),
                _ => tape.div(&a, &b),
            }
            .unwrap();
            let f = move |xs: &[Vec<f64>]| -> Vec<f64> {
                xs[0]
                    .iter()
                    .zip(&xs[1])
                    .map(|(&x, &y)| match kind {
                        0 => x + y,
                        1 => x - y,
                        2 => x * y,
                        _ => x / y,
                    })
                    .collect()
            };
            check_op("binary", &[a, b], out, &tape, &f, seed);

            let tape = Tape::new();
            let a = leaf(&[2, 3, 4], -1.0, 1.0, &mut r);
            let b = leaf(&[4], 0.6, 1.6, &mut r);
            let out = tape.mul(&a, &b).unwrap();
            let f = |xs: &[Vec<f64>]| -> Vec<f64> {
                xs[0]
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * xs[1][i % 4])
                    .collect()
            };
            check_op("mul broadcast", &[a, b], out, &tape, &f, seed);
        }

        // unary ops
        let tape = Tape::new();
        let mut r = rng(seed * 77 + 1);
        let x = leaf(&[6], -1.0, 1.0, &mut r);
        let out = tape.silu(&x).unwrap();
        check_op(
            "silu",
            &[x],
            out,
            &tape,
            &|xs| xs[0].iter().map(|&v| oracle::silu64(v)).collect(),
            seed,
        );

        let tape = Tape::new();
        let x = leaf(&[6], 0.5, 2.0, &mut r);
        let out = tape.sqrt(&x).unwrap();
        check_op(
            "sqrt",
            &[x],
            out,
            &tape,
            &|xs| xs[0].iter().map(|&v| v.sqrt()).collect(),
            seed,
        );

        let tape = Tape::new();
        let x = leaf(&[6], -1.0, 1.0, &mut r);
        let out = tape.square(&x).unwrap();
        check_op(
            "square",
            &[x],
            out,
            &tape,
            &|xs| xs[0].iter().map(|&v| v * v).collect(),
            seed,
        );

        // matmul, plain and batch-shared
        let tape = Tape::new();
        let a = leaf(&[3, 4], -1.0, 1.0, &mut r);
        let b = leaf(&[4, 2], -1.0, 1.0, &mut r);
        let out = tape.matmul(&a, &b).unwrap();
        check_op(
            "matmul",
            &[a, b],
            out,
            &tape,
            &|xs| oracle::matmul64(&xs[0], &xs[1], 3, 4, 2),
            seed,
        );

        let tape = Tape::new();
        let a = leaf(&[2, 3, 4], -1.0, 1.0, &mut r);
        let w = leaf(&[4, 2], -1.0, 1.0, &mut r);
        let out = tape.matmul(&a, &w).unwrap();
        check_op(
            "matmul shared",
            &[a, w],
            out,
            &tape,
            &|xs| {
                let mut out = oracle::matmul64(&xs[0][..12], &xs[1], 3, 4, 2);
                out.extend(oracle::matmul64(&xs[0][12..], &xs[1], 3, 4, 2));
                out
            },
            seed,
        );

        // reductions
        let tape = Tape::new();
        let x = leaf(&[2, 3, 4], -1.0, 1.0, &mut r);
        let out = tape.mean(&x, &[1]).unwrap();
        check_op(
            "mean",
            &[x],
            out,
            &tape,
            &|xs| {
                let mut out = vec![0.0; 8];
                for b in 0..2 {
                    for j in 0..4 {
                        out[b * 4 + j] =
                            (0..3).map(|m| xs[0][(b * 3 + m) * 4 + j]).sum::<f64>() / 3.0;
                    }
                }
                out
            },
            seed,
        );

        let tape = Tape::new();
        let x = leaf(&[2, 3, 4], -1.0, 1.0, &mut r);
        let out = tape.sum(&x, &[0, 2]).unwrap();
        check_op(
            "sum",
            &[x],
            out,
            &tape,
            &|xs| {
                let mut out = vec![0.0; 3];
                for b in 0..2 {
                    for m in 0..3 {
                        for j in 0..4 {
                            out[m] += xs[0][(b * 3 + m) * 4 + j];
                        }
                    }
                }
                out
            },
            seed,
        );

        let tape = Tape::new();
        let x = leaf(&[3, 5], -1.0, 1.0, &mut r);
        let out = tape.max(&x, &[0]).unwrap();
        check_op(
            "max",
            &[x],
            out,
            &tape,
            &|xs| {
                (0..5)
                    .map(|j| {
                        (0..3)
                            .map(|i| xs[0][i * 5 + j])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            },
            seed,
        );

        // attention
        let tape = Tape::new();
        let q = leaf(&[2, 3, 5], -1.0, 1.0, &mut r);
        let k = leaf(&[2, 4, 5], -1.0, 1.0, &mut r);
        let v = leaf(&[2, 4, 5], -1.0, 1.0, &mut r);
        let out = tape.attention(&q, &k, &v).unwrap();
        check_op(
            "attention",
            &[q, k, v],
            out,
            &tape,
            &|xs| {
                let mut out = Vec::new();
                for b in 0..2 {
                    out.extend(oracle::attention64(
                        &xs[0][b * 15..(b + 1) * 15],
                        &xs[1][b * 20..(b + 1) * 20],
                        &xs[2][b * 20..(b + 1) * 20],
                        3,
                        4,
                        5,
                    ));
                }
                out
            },
            seed,
        );

        // rms norm
        let tape = Tape::new();
        let x = leaf(&[3, 4], -1.0, 1.0, &mut r);
        let out = tape.rms_norm(&x, 1e-5).unwrap();
        check_op(
            "rms_norm",
            &[x],
            out,
            &tape,
            &|xs| oracle::rms_norm64(&xs[0], 4, 1e-5_f32 as f64),
            seed,
        );

        // shape plumbing: transpose, concat, narrow, repeat, index_rows
        let tape = Tape::new();
        let x = leaf(&[2, 3, 4], -1.0, 1.0, &mut r);
        let out = tape.transpose(&x, 0, 2).unwrap();
        check_op(
            "transpose",
            &[x],
            out,
            &tape,
            &|xs| {
                let mut out = vec![0.0; 24];
                for i in 0..2 {
                    for j in 0..3 {
                        for k in 0..4 {
                            out[(k * 3 + j) * 2 + i] = xs[0][(i * 3 + j) * 4 + k];
                        }
                    }
                }
                out
            },
            seed,
        );

        let tape = Tape::new();
        let a = leaf(&[2, 2], -1.0, 1.0, &mut r);
        let b = leaf(&[2, 3], -1.0, 1.0, &mut r);
        let out = tape.concat(&[&a, &b], 1).unwrap();
        check_op(
            "concat",
            &[a, b],
            out,
            &tape,
            &|xs| {
                let mut out = Vec::new();
                for i in 0..2 {
                    out.extend_from_slice(&xs[0][i * 2..(i + 1) * 2]);
                    out.extend_from_slice(&xs[1][i * 3..(i + 1) * 3]);
                }
                out
            },
            seed,
        );

        let tape = Tape::new();
        let x = leaf(&[2, 5], -1.0, 1.0, &mut r);
        let out = tape.narrow(&x, 1, 1, 2).unwrap();
        check_op(
            "narrow",
            &[x],
            out,
            &tape,
            &|xs| {
                let mut out = Vec::new();
                for i in 0..2 {
                    out.extend_from_slice(&xs[0][i * 5 + 1..i * 5 + 3]);
                }
                out
            },
            seed,
        );

        let tape = Tape::new();
        let x = leaf(&[2, 3], -1.0, 1.0, &mut r);
        let out = tape.repeat(&x, 1, 4).unwrap();
        check_op(
            "repeat",
            &[x],
            out,
            &tape,
            &|xs| {
                let mut out = Vec::new();
                for i in 0..2 {
                    for _ in 0..4 {
                        out.extend_from_slice(&xs[0][i * 3..(i + 1) * 3]);
                    }
                }
                out
            },
            seed,
        );

        let tape = Tape::new();
        let table = leaf(&[4, 3], -1.0, 1.0, &mut r);
        let out = tape.index_rows(&table, &[2, 0, 2]).unwrap();
        check_op(
            "index_rows",
            &[table],
            out,
            &tape,
            &|xs| {
                let mut out = Vec::new();
                for &row in &[2usize, 0, 2] {
                    out.extend_from_slice(&xs[0][row * 3..(row + 1) * 3]);
                }
                out
            },
            seed,
        );
    }

    // end-to-end: full denoiser forward + backward vs the f64 reference on
    // 20 randomly selected scalar parameters
    let cfg = DenoiserConfig {
        dim: 16,
        heads: 2,
        enc_blocks: 1,
        dec_blocks: 2,
        horizon: 2,
        patch: 2,
        channel_groups: CHANNEL_GROUPS,
        width: 8,
        height: 4,
        time_levels: 11,
        cross_attention: true,
    };
    let model = DenoiserParams::new(&cfg, 42).unwrap();
    let mut r = rng(99);
    let shape = vec![2, cfg.seq_len(), cfg.frame_features()];
    let z_rgb = Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r);
    let z_n = Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r);
    let z_m = Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r);
    let cond_n = CondBatch {
        rgb: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
        pm: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
    };
    let cond_m = CondBatch {
        rgb: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
        pm: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
    };
    let target_rgb = Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r);
    let target_n = Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r);
    let target_m = Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r);
    let ks = [3usize, 7];

    // analytic gradients
    let tape = Tape::new();
    let rgb_out = model
        .denoise_rgb(&tape, &z_rgb, &ks, &cond_n, ViewRole::Reference)
        .unwrap();
    let (pm_out_n, pm_out_m) = model
        .denoise_pointmap_pair(&tape, &z_n, &z_m, &ks, &cond_n, &cond_m)
        .unwrap();
    let mse = |t: &Tape, a: &Tensor, b: &Tensor| {
        let d = t.sub(a, b).unwrap();
        t.mean_all(&t.square(&d).unwrap()).unwrap()
    };
    let l1 = mse(&tape, &rgb_out, &target_rgb);
    let l2 = mse(&tape, &pm_out_n, &target_n);
    let l3 = mse(&tape, &pm_out_m, &target_m);
    let total = tape.add(&tape.add(&l1, &l2).unwrap(), &l3).unwrap();
    model.named_params().iter().for_each(|(_, p)| p.zero_grad());
    tape.backward(&total).unwrap();

    // f64 reference loss as a function of one perturbed parameter scalar
    let reference = RefDenoiser::from_model(&model);
    let batch_stride = cfg.seq_len() * cfg.frame_features();
    let loss64 = |reference: &RefDenoiser| -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (b, &k) in ks.iter().enumerate() {
            let sl = |t: &Tensor| {
                oracle::to_f64(t)[b * batch_stride..(b + 1) * batch_stride].to_vec()
            };
            let rgb = reference.rgb_forward(&sl(&z_rgb), k, &sl(&cond_n.rgb), &sl(&cond_n.pm));
            let (pn, pm) = reference.pm_pair_forward(
                &sl(&z_n),
                &sl(&z_m),
                k,
                (&sl(&cond_n.rgb), &sl(&cond_n.pm)),
                (&sl(&cond_m.rgb), &sl(&cond_m.pm)),
            );
            for (out, target) in [
                (&rgb, &target_rgb),
                (&pn, &target_n),
                (&pm, &target_m),
            ] {
                let t64 = sl(target);
                for (o, t) in out.iter().zip(&t64) {
                    acc += (o - t).powi(2);
                }
                count += out.len() as f64;
            }
        }
        // three mean-squared terms, each averaged over the full batch
        acc * 3.0 / count
    };

    let params = model.named_params();
    let mut probe = RefDenoiser::from_model(&model);
    for pick in 0..20 {
        let mut rr = rng(1234 + pick);
        let (name, tensor) = &params[rr.gen_range(0..params.len())];
        let idx = rr.gen_range(0..tensor.numel());
        let theta = probe.get_scalar(name, idx);
        let h = 1e-3;
        probe.set_scalar(name, idx, theta + h);
        let fp = loss64(&probe);
        probe.set_scalar(name, idx, theta - h);
        let fm = loss64(&probe);
        probe.set_scalar(name, idx, theta);
        let fd = (fp - fm) / (2.0 * h);
        let analytic = tensor.grad().unwrap()[idx] as f64;
        let scale = fd.abs().max(analytic.abs()).max(1e-4);
        let rel = (analytic - fd).abs() / scale;
        assert!(
            rel < 1e-3,
            "{name}[{idx}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
        );
        let _ = reference;
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    println!(
        "[PASS] criterion 1: gradient integrity (op-level < 1e-4, end-to-end < 1e-3, 10 seeds) in {elapsed:?}"
    );
}

// =============================================================================
// Criterion 2: geometry oracle suite
// =============================================================================

#[test]
fn criterion_2_geometry_oracles() {
    let start = Instant::now();
    let mut r = rng(2);

    // lift -> project identity and rigidity, 10 random cases
    for _ in 0..10 {
        let k = Intrinsics::new(20.0, 22.0, 7.5, 5.5, 16, 12).unwrap();
        let values: Vec<f32> = (0..16 * 12).map(|_| r.gen_range(0.5..3.0)).collect();
        let depth = g4d::geometry::DepthMap::new(16, 12, values, vec![true; 16 * 12]).unwrap();
        let pm = lift_depth(&depth, &k, FrameId::new("cam")).unwrap();
        let proj = project_points(&pm, &k);
        for j in 0..12 {
            for i in 0..16 {
                let idx = j * 16 + i;
                assert!((proj.u[idx] - i as f32).abs() < 1e-5);
                assert!((proj.v[idx] - j as f32).abs() < 1e-5);
            }
        }

        let angle = r.gen_range(-3.0f32..3.0);
        let t = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let rot = Pose::rot_z(angle, FrameId::new("cam"), FrameId::new("cam")).rotation().to_owned();
        let pose = Pose::new(rot, t, FrameId::new("cam"), FrameId::new("other")).unwrap();
        let moved = transform_pointmap(&pm, &pose).unwrap();
        let back = transform_pointmap(&moved, &pose.invert()).unwrap();
        for (a, b) in back.points.iter().zip(&pm.points) {
            assert!((a - b).abs() < 1e-5);
        }
        for pair in 0..30 {
            let i = (pair * 11) % (16 * 12);
            let j = (pair * 29 + 3) % (16 * 12);
            let d0 = dist3(&pm.points[i * 3..], &pm.points[j * 3..]);
            let d1 = dist3(&moved.points[i * 3..], &moved.points[j * 3..]);
            assert!((d0 - d1).abs() < 1e-5);
        }
    }

    // cross-view mask reprojection, single cuboid between two known cameras
    let spec = SceneSpec::default();
    let script = script_trajectory(&spec, 5).unwrap();
    let full = SceneState::at_step(&script, 8);
    let object_only = SceneState {
        table_half_extent: full.table_half_extent,
        table_color: full.table_color,
        cuboids: full
            .cuboids
            .iter()
            .filter(|c| c.id == g4d::synthscene::ID_OBJECT)
            .cloned()
            .collect(),
    };
    let cams = sample_cameras(23, 2, 160, 120, 0).unwrap();
    let (_, d0, ids0) = render_frame(&object_only, &cams[0]);
    let (_, _, ids1) = render_frame(&object_only, &cams[1]);
    let mask0 = ids0.select(&[g4d::synthscene::ID_OBJECT]);
    let mask1 = ids1.select(&[g4d::synthscene::ID_OBJECT]);
    let pm0 = lift_depth(&d0, &cams[0].intrinsics, cams[0].frame().clone()).unwrap();
    let pose01 = cams[1]
        .cam_from_world()
        .compose(&cams[0].world_from_cam)
        .unwrap();
    let proj = reproject_mask(&mask0, &pm0, &pose01, &cams[1].intrinsics).unwrap();
    let iou = metrics::bbox_iou(&proj, &mask1).unwrap();
    assert!(iou >= 0.9, "single-cuboid reprojection IoU {iou}");

    // gripper-union reprojection averaged over an episode, every view pair
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        episodes: 1,
        cameras: 4,
        train_views: 3,
        test_views: 1,
        episode_len: 12,
        width: 192,
        height: 144,
        seed: 7,
        ..Default::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    for a in 0..4usize {
        for b in 0..4usize {
            if a == b {
                continue;
            }
            let mut per_t = Vec::new();
            for t in 0..12 {
                let mask_a = ds.load_mask(0, a, t).unwrap().select(&GRIPPER_IDS);
                let mask_b = ds.load_mask(0, b, t).unwrap().select(&GRIPPER_IDS);
                if mask_a.count() == 0 || mask_b.count() == 0 {
                    continue;
                }
                let pm_a = lift_depth(
                    &ds.load_depth(0, a, t).unwrap(),
                    ds.intrinsics(0, a).unwrap(),
                    FrameId::view(0, a),
                )
                .unwrap();
                let pose = ds.pose_a_to_b(0, a, b).unwrap();
                let proj =
                    reproject_mask(&mask_a, &pm_a, &pose, ds.intrinsics(0, b).unwrap()).unwrap();
                per_t.push(metrics::bbox_iou(&proj, &mask_b).unwrap());
            }
            let mean: f32 = per_t.iter().sum::<f32>() / per_t.len() as f32;
            assert!(mean >= 0.9, "gripper reprojection {a}->{b}: {mean}");
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 1 min");
    println!("[PASS] criterion 2: geometry oracle suite (identity/round-trip/rigidity < 1e-5, reprojection IoU >= 0.9) in {elapsed:?}");
}

fn dist3(a: &[f32], b: &[f32]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

// =============================================================================
// Criterion 3: diffusion process suite
// =============================================================================

#[test]
fn criterion_3_diffusion_process() {
    let start = Instant::now();

    // schedule monotonicity and endpoints
    let schedule = make_schedule(100).unwrap();
    assert!(schedule.alpha_bar(0) >= 0.999);
    assert!(schedule.alpha_bar(100) <= 0.01);
    for k in 1..=100 {
        assert!(schedule.alpha_bar(k) < schedule.alpha_bar(k - 1));
    }

    // forward-noising moments, Monte-Carlo over 10^4 draws
    let mut r = rng(3);
    let z0 = Tensor::from_vec(vec![4], vec![0.7, -0.4, 1.1, 0.2]).unwrap();
    for k in [30usize, 100] {
        let draws = 10_000;
        let mut sums = [0.0f64; 4];
        let mut sqs = [0.0f64; 4];
        for _ in 0..draws {
            let eps = Tensor::randn(vec![4], &mut r);
            let z = q_sample(&z0, k, &eps, &schedule).unwrap();
            for (i, &v) in z.data().iter().enumerate() {
                sums[i] += v as f64;
                sqs[i] += (v as f64).powi(2);
            }
        }
        let ab = schedule.alpha_bar(k) as f64;
        for i in 0..4 {
            let mean = sums[i] / draws as f64;
            let var = sqs[i] / draws as f64 - mean * mean;
            let want_mean = ab.sqrt() * z0.data()[i] as f64;
            let want_var = 1.0 - ab;
            assert!(
                (mean - want_mean).abs() <= 0.1 * want_mean.abs().max(0.05),
                "k={k} mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() <= 0.1 * want_var.max(0.01),
                "k={k} var {var} vs {want_var}"
            );
        }
    }

    // the sampler is a fixed point of an oracle that knows the clean signal
    let cfg = DenoiserConfig {
        dim: 16,
        heads: 2,
        enc_blocks: 1,
        dec_blocks: 1,
        horizon: 2,
        patch: 2,
        channel_groups: CHANNEL_GROUPS,
        width: 8,
        height: 4,
        time_levels: 101,
        cross_attention: true,
    };
    struct Truth {
        cfg: DenoiserConfig,
        rgb: Tensor,
        pm_n: Tensor,
        pm_m: Tensor,
    }
    impl Denoiser for Truth {
        fn config(&self) -> &DenoiserConfig {
            &self.cfg
        }
        fn rgb(
            &self,
            _: &Tape,
            _: &Tensor,
            _: &[usize],
            _: &CondBatch,
            _: ViewRole,
        ) -> g4d::Result<Tensor> {
            Ok(self.rgb.clone())
        }
        fn pointmap_pair(
            &self,
            _: &Tape,
            _: &Tensor,
            _: &Tensor,
            _: &[usize],
            _: &CondBatch,
            _: &CondBatch,
        ) -> g4d::Result<(Tensor, Tensor)> {
            Ok((self.pm_n.clone(), self.pm_m.clone()))
        }
    }
    let shape = vec![1, cfg.seq_len(), cfg.frame_features()];
    let truth = Truth {
        cfg: cfg.clone(),
        rgb: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
        pm_n: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
        pm_m: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
    };
    let cond = CondBatch {
        rgb: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
        pm: Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut r),
    };
    for seed in [0u64, 5] {
        let out = sample(&truth, &schedule, &cond, &cond, 25, seed).unwrap();
        for (got, want) in [(&out.rgb_n, &truth.rgb), (&out.pm_n, &truth.pm_n), (&out.pm_m, &truth.pm_m)] {
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "sampler fixed point violated");
            }
        }
    }

    // loss identities on a synthetic batch driven through the real model
    let model = DenoiserParams::new(&cfg, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds_cfg = DatasetConfig {
        episodes: 1,
        cameras: 3,
        train_views: 2,
        test_views: 1,
        episode_len: 5,
        width: 8,
        height: 4,
        seed: 2,
        ..Default::default()
    };
    generate_dataset(&ds_cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let data = diffusion::data::TrainData::load(&ds).unwrap();
    let mut r2 = rng(5);
    let specs = diffusion::data::draw_specs(&data, &cfg, 2, 100, &mut r2).unwrap();
    let batch = diffusion::data::build_batch(&data, &cfg, &schedule, &specs, &mut r2).unwrap();

    let tape = Tape::eval();
    let rgb_n = diffusion::loss_rgb(&tape, &model, &batch, ViewRole::Reference)
        .unwrap()
        .item();
    let rgb_m = diffusion::loss_rgb(&tape, &model, &batch, ViewRole::Secondary)
        .unwrap()
        .item();
    let off = diffusion::loss_joint(
        &tape,
        &model,
        &batch,
        &LossWeights {
            lambda: 0.0,
            gripper_reweight: false,
        },
    )
    .unwrap();
    assert_eq!(off.total.item(), rgb_n + rgb_m, "lambda = 0 identity");

    let plain = diffusion::loss_joint(
        &tape,
        &model,
        &batch,
        &LossWeights {
            lambda: 1.0,
            gripper_reweight: false,
        },
    )
    .unwrap();
    let mut ones = batch;
    ones.w_n = Tensor::full(ones.w_n.shape().to_vec(), 1.0);
    ones.w_m = Tensor::full(ones.w_m.shape().to_vec(), 1.0);
    let doubled = diffusion::loss_joint(
        &tape,
        &model,
        &ones,
        &LossWeights {
            lambda: 1.0,
            gripper_reweight: true,
        },
    )
    .unwrap();
    assert_eq!(doubled.total.item(), 2.0 * plain.total.item(), "w = 1 doubling");

    ones.w_n = Tensor::zeros(ones.w_n.shape().to_vec());
    ones.w_m = Tensor::zeros(ones.w_m.shape().to_vec());
    let same = diffusion::loss_joint(
        &tape,
        &model,
        &ones,
        &LossWeights {
            lambda: 1.0,
            gripper_reweight: true,
        },
    )
    .unwrap();
    assert_eq!(same.total.item(), plain.total.item(), "w = 0 identity");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    println!("[PASS] criterion 3: diffusion process suite (schedule, moments within 10%, sampler fixed point < 1e-5, loss identities exact) in {elapsed:?}");
}

// =============================================================================
// Criterion 4: overfit reproduction
// =============================================================================

/// Small-but-real training configuration used by criteria 4, 5 and 7.
fn desk_overrides() -> Vec<(String, String)> {
    [
        ("image.width", "16"),
        ("image.height", "12"),
        ("image.crop_width", "16"),
        ("image.crop_height", "12"),
        ("model.dim", "48"),
        ("model.heads", "4"),
        ("train.batch", "2"),
        ("train.lr", "0.001"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[test]
fn criterion_4_overfit_reproduction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");

    let mut overrides = desk_overrides();
    overrides.extend([
        ("dataset.episodes".to_string(), "1".to_string()),
        ("dataset.cameras".to_string(), "3".to_string()),
        ("dataset.train_views".to_string(), "2".to_string()),
        ("dataset.test_views".to_string(), "1".to_string()),
        ("train.steps".to_string(), "2000".to_string()),
    ]);
    let cfg = load_config(None, &overrides).unwrap();

    cli::gen_data(&cfg, &data_dir, None, 0).unwrap();
    let ds = Dataset::load(&data_dir).unwrap();
    let settings = cfg.train_settings(0);
    let result = diffusion::train(
        &cfg.denoiser_config().unwrap(),
        &settings,
        &ds,
        &run_dir,
        None,
    )
    .unwrap();

    // joint loss falls below 10% of its initial value
    let initial = result.curve[0][4];
    let final_loss: f64 =
        result.curve[result.curve.len() - 10..].iter().map(|r| r[4]).sum::<f64>() / 10.0;
    assert!(
        final_loss < 0.1 * initial,
        "loss {final_loss:.4} vs initial {initial:.4}"
    );

    // sample the training clip back out and score it
    let views = ds.views_of(0, Split::Train).unwrap();
    let (vn, vm) = (views[0], views[1]);
    let t0 = 2usize;
    let pred_dir = dir.path().join("pred");
    cli::predict(
        &result.final_checkpoint,
        &data_dir,
        0,
        (vn, vm),
        t0,
        &pred_dir,
        123,
    )
    .unwrap();
    let report = cli::eval(&pred_dir, &data_dir, &dir.path().join("report.json")).unwrap();

    // per-pixel RGB MSE < 1e-2 on both views, straight from the streams
    let (meta, video) = cli::load_four_d(&pred_dir).unwrap();
    let mut mse_acc = [0.0f64; 2];
    let mut count = 0usize;
    for (i, frame) in video.frames.iter().enumerate() {
        let t = meta.t0 + 1 + i;
        for (v, view) in [vn, vm].iter().enumerate() {
            let gt = ds.load_rgb(0, *view, t).unwrap();
            for (a, b) in frame.rgb[v].data.iter().zip(&gt.data) {
                mse_acc[v] += ((a - b) as f64).powi(2);
            }
        }
        count += video.frames[0].rgb[0].data.len();
    }
    for (v, acc) in mse_acc.iter().enumerate() {
        let mse = acc / count as f64;
        assert!(mse < 1e-2, "view {v}: rgb mse {mse:.4}");
    }

    // depth accuracy of the sampled pointmaps on both views
    assert!(report.absrel_n < 0.10, "AbsRel-n {}", report.absrel_n);
    assert!(report.absrel_m < 0.10, "AbsRel-m {}", report.absrel_m);
    assert!(report.delta1_n > 0.90, "delta1-n {}", report.delta1_n);
    assert!(report.delta1_m > 0.90, "delta1-m {}", report.delta1_m);

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1800, "took {elapsed:?}, budget 30 min");
    println!(
        "[PASS] criterion 4: overfit (loss {:.1}% of initial, rgb mse {:.4}/{:.4}, AbsRel {:.3}/{:.3}, d1 {:.3}/{:.3}) in {elapsed:?}",
        100.0 * final_loss / initial,
        mse_acc[0] / count as f64,
        mse_acc[1] / count as f64,
        report.absrel_n,
        report.absrel_m,
        report.delta1_n,
        report.delta1_m
    );
}

// =============================================================================
// Criterion 5: ablation direction
// =============================================================================

fn ablation_arm(
    data_dir: &Path,
    work: &Path,
    cross_attention: bool,
    seed: u64,
) -> (f32, f32) {
    let mut overrides = desk_overrides();
    overrides.extend([
        (
            "model.cross_attention".to_string(),
            cross_attention.to_string(),
        ),
        ("train.steps".to_string(), "600".to_string()),
    ]);
    let cfg = load_config(None, &overrides).unwrap();
    let ds = Dataset::load(data_dir).unwrap();
    let run_dir = work.join(format!("run_{cross_attention}_{seed}"));
    let settings = cfg.train_settings(seed);
    let result = diffusion::train(
        &cfg.denoiser_config().unwrap(),
        &settings,
        &ds,
        &run_dir,
        None,
    )
    .unwrap();

    let mut mious = Vec::new();
    let mut delta1_ms = Vec::new();
    for ep in 0..ds.manifest.episodes.len() {
        let test_views = ds.views_of(ep, Split::Test).unwrap();
        let (vn, vm) = (test_views[0], test_views[1]);
        for t0 in [2usize, 8] {
            let pred = work.join(format!("pred_{cross_attention}_{seed}_{ep}_{t0}"));
            cli::predict(
                &result.final_checkpoint,
                data_dir,
                ep,
                (vn, vm),
                t0,
                &pred,
                900 + ep as u64,
            )
            .unwrap();
            let report = cli::eval(&pred, data_dir, &pred.join("report.json")).unwrap();
            mious.push(report.miou);
            delta1_ms.push(report.delta1_m);
        }
    }
    let mean = |xs: &[f32]| xs.iter().sum::<f32>() / xs.len() as f32;
    (mean(&mious), mean(&delta1_ms))
}

fn median(mut xs: Vec<f32>) -> f32 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn criterion_5_ablation_direction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    let mut overrides = desk_overrides();
    overrides.extend([
        ("dataset.episodes".to_string(), "4".to_string()),
        ("dataset.cameras".to_string(), "6".to_string()),
        ("dataset.train_views".to_string(), "4".to_string()),
        ("dataset.test_views".to_string(), "2".to_string()),
    ]);
    let cfg = load_config(None, &overrides).unwrap();
    cli::gen_data(&cfg, &data_dir, None, 21).unwrap();

    let mut with_miou = Vec::new();
    let mut with_d1m = Vec::new();
    let mut without_miou = Vec::new();
    let mut without_d1m = Vec::new();
    for seed in [1u64, 2, 3] {
        let (miou, d1m) = ablation_arm(&data_dir, dir.path(), true, seed);
        with_miou.push(miou);
        with_d1m.push(d1m);
        let (miou, d1m) = ablation_arm(&data_dir, dir.path(), false, seed);
        without_miou.push(miou);
        without_d1m.push(d1m);
    }

    let (wm, wom) = (median(with_miou.clone()), median(without_miou.clone()));
    let (wd, wod) = (median(with_d1m.clone()), median(without_d1m.clone()));
    println!(
        "ablation: mIoU with {with_miou:?} vs without {without_miou:?}; d1-m with {with_d1m:?} vs without {without_d1m:?}"
    );
    assert!(
        wm > wom,
        "median mIoU with cross-attention {wm} not above {wom}"
    );
    assert!(
        wd > wod,
        "median delta1-m with cross-attention {wd} not above {wod}"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 7200, "took {elapsed:?}, budget 2 h");
    println!(
        "[PASS] criterion 5: ablation direction (median mIoU {wm:.3} > {wom:.3}, median d1-m {wd:.3} > {wod:.3}) in {elapsed:?}"
    );
}

// =============================================================================
// Criterion 6: trajectory extraction
// =============================================================================

#[test]
fn criterion_6_trajectory_extraction() {
    let start = Instant::now();
    let spec = SceneSpec::default();
    let script = script_trajectory(&spec, 11).unwrap();
    let cams = sample_cameras(111, 2, 96, 72, 0).unwrap();
    let frame_n = cams[0].frame().clone();
    let cam0_from_world = cams[0].cam_from_world();
    let pose_1_to_0 = cams[0]
        .cam_from_world()
        .compose(&cams[1].world_from_cam)
        .unwrap();

    let mut frames = Vec::new();
    let mut gt_poses = Vec::new();
    let mut gt_states = Vec::new();
    for t in 0..script.steps {
        let state = SceneState::at_step(&script, t);
        let (rgb0, d0, _) = render_frame(&state, &cams[0]);
        let (rgb1, d1, _) = render_frame(&state, &cams[1]);
        let pm0 = lift_depth(&d0, &cams[0].intrinsics, frame_n.clone()).unwrap();
        let pm1 = lift_depth(&d1, &cams[1].intrinsics, cams[1].frame().clone()).unwrap();
        let pm1 = transform_pointmap(&pm1, &pose_1_to_0).unwrap();
        frames.push(FourDFrame {
            rgb: [rgb0, rgb1],
            pm: [pm0, pm1],
        });
        gt_poses.push(cam0_from_world.compose(&script.gripper_pose(t)).unwrap());
        gt_states.push(script.state(t));
    }
    let video = FourDVideo { frames, frame_n };
    let gspec = spec.gripper_spec();
    let est = extract_trajectory(&video, &gspec, &gt_poses[0], None).unwrap();

    let mut sq = 0.0f64;
    let mut max_rot = 0.0f32;
    for (pt, gt) in est.points.iter().zip(&gt_poses) {
        let d = dist3(pt.pose.translation_part(), gt.translation_part());
        sq += (d as f64).powi(2);
        max_rot = max_rot.max(box_rot_error_deg(pt.pose.rotation(), gt.rotation()));
        if let (Some(a), Some(b)) = (pt.residuals[0], pt.residuals[1]) {
            let expect = if a <= b { 0 } else { 1 };
            assert_eq!(pt.view, expect, "t={}: view selection not argmin", pt.t);
        }
    }
    let rmse = (sq / gt_poses.len() as f64).sqrt();
    assert!(rmse < 1e-3, "translation RMSE {rmse}");
    assert!(max_rot < 1.0, "max rotation error {max_rot} deg");
    let states: Vec<GripperState> = est.points.iter().map(|p| p.state).collect();
    assert_eq!(states, gt_states, "state sequence differs from script");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 1 min");
    println!(
        "[PASS] criterion 6: trajectory extraction (RMSE {:.2e} m, rot {:.3} deg, states exact, argmin view) in {elapsed:?}",
        rmse, max_rot
    );
}

fn box_rot_error_deg(a: &g4d::geometry::Mat3, b: &g4d::geometry::Mat3) -> f32 {
    use g4d::geometry::{mat_mul, mat_transpose};
    let flips: [g4d::geometry::Mat3; 4] = [
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
        [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
        [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]],
    ];
    flips
        .iter()
        .map(|f| {
            let rel = mat_mul(&mat_transpose(&mat_mul(b, f)), a);
            let tr = rel[0][0] + rel[1][1] + rel[2][2];
            ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
        })
        .fold(f32::INFINITY, f32::min)
}

// =============================================================================
// Criterion 7: no-extrinsics contract
// =============================================================================

#[test]
fn criterion_7_no_extrinsics_contract() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let stripped_dir = dir.path().join("data_stripped");

    let mut overrides = desk_overrides();
    overrides.extend([
        ("dataset.episodes".to_string(), "1".to_string()),
        ("dataset.cameras".to_string(), "3".to_string()),
        ("dataset.train_views".to_string(), "2".to_string()),
        ("dataset.test_views".to_string(), "1".to_string()),
        ("train.steps".to_string(), "40".to_string()),
        ("model.dim".to_string(), "16".to_string()),
        ("model.heads".to_string(), "2".to_string()),
    ]);
    let cfg = load_config(None, &overrides).unwrap();
    cli::gen_data(&cfg, &data_dir, None, 3).unwrap();
    let ds = Dataset::load(&data_dir).unwrap();
    let ckpt = cli::train_cmd(&cfg, &data_dir, &dir.path().join("run"), None, 3).unwrap();

    // copy the dataset and delete view m's extrinsics from the manifest
    copy_tree(&data_dir, &stripped_dir);
    let views = ds.views_of(0, Split::Train).unwrap();
    let (vn, vm) = (views[0], views[1]);
    let manifest_path = stripped_dir.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    manifest["episodes"][0]["cameras"][vm]["world_from_cam"] = serde_json::Value::Null;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();

    let p_full = dir.path().join("p_full");
    let p_stripped = dir.path().join("p_stripped");
    cli::predict(&ckpt, &data_dir, 0, (vn, vm), 2, &p_full, 77).unwrap();
    cli::predict(&ckpt, &stripped_dir, 0, (vn, vm), 2, &p_stripped, 77).unwrap();

    let mut compared = 0;
    for entry in fs::read_dir(&p_full).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e == "g4dt").unwrap_or(false) {
            let name = path.file_name().unwrap();
            let a = fs::read(&path).unwrap();
            let b = fs::read(p_stripped.join(name)).unwrap();
            assert_eq!(a, b, "{name:?} differs without view-m extrinsics");
            compared += 1;
        }
    }
    assert_eq!(compared, 4 * cfg.model.horizon, "stream file count");

    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 7: no-extrinsics contract ({compared} stream files bitwise identical) in {elapsed:?}"
    );
}

fn copy_tree(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.path().is_dir() {
            copy_tree(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), &to).unwrap();
        }
    }
}

// =============================================================================
// Criterion 8: metric formulas
// =============================================================================

#[test]
fn criterion_8_metric_formulas() {
    let start = Instant::now();

    let pm = |vals: &[f32], w: usize, h: usize| -> g4d::geometry::Pointmap {
        let mut points = vec![0.0f32; w * h * 3];
        for (i, &z) in vals.iter().enumerate() {
            points[i * 3 + 2] = z;
        }
        g4d::geometry::Pointmap {
            frame: FrameId::new("cam"),
            width: w,
            height: h,
            points,
            valid: vec![true; w * h],
        }
    };
    let depth = |vals: Vec<f32>, w: usize, h: usize| {
        g4d::geometry::DepthMap::new(w, h, vals, vec![true; w * h]).unwrap()
    };

    // absrel: exact prediction 0, uniform 25% high = 0.25
    let gt = depth(vec![2.0; 16], 4, 4);
    assert_eq!(metrics::absrel(&pm(&[2.0; 16], 4, 4), &gt).unwrap(), 0.0);
    let q = metrics::absrel(&pm(&[2.5; 16], 4, 4), &gt).unwrap();
    assert!((q - 0.25).abs() < 1e-6);

    // delta1: strict boundary at ratio 1.25 scores 0, exact scores 1,
    // half-and-half scores 0.5
    let gt1 = depth(vec![1.0; 4], 2, 2);
    assert_eq!(metrics::delta1(&pm(&[1.25; 4], 2, 2), &gt1).unwrap(), 0.0);
    assert_eq!(metrics::delta1(&pm(&[1.0; 4], 2, 2), &gt1).unwrap(), 1.0);
    assert_eq!(
        metrics::delta1(&pm(&[1.1, 1.1, 1.3, 1.3], 2, 2), &gt1).unwrap(),
        0.5
    );

    // mIoU: identical masks under identity projection 1.0, disjoint 0.0
    let mut mask = Mask::empty(8, 8);
    for idx in [9usize, 10, 17] {
        mask.data[idx] = true;
    }
    let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
    let lifted = lift_depth(&depth(vec![1.0; 64], 8, 8), &k, FrameId::new("cam")).unwrap();
    let identity = Pose::identity(FrameId::new("cam"));
    let r = metrics::cross_view_miou(
        &[lifted.clone()],
        &[mask.clone()],
        &[mask.clone()],
        &identity,
        &k,
    )
    .unwrap();
    assert_eq!(r.miou, 1.0);
    let mut far = Mask::empty(8, 8);
    far.data[62] = true;
    let r = metrics::cross_view_miou(&[lifted], &[mask], &[far], &identity, &k).unwrap();
    assert_eq!(r.miou, 0.0);

    let elapsed = start.elapsed();
    println!("[PASS] criterion 8: metric formulas (0, 0.25, boundary 0.0, 1.0, 0.0 exact) in {elapsed:?}");
}
