use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig {
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
    }
}

fn rand_tokens(cfg: &DenoiserConfig, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(
        vec![batch, cfg.seq_len(), cfg.frame_features()],
        -1.0,
        1.0,
        rng,
    )
}

fn rand_cond(cfg: &DenoiserConfig, batch: usize, rng: &mut ChaCha8Rng) -> CondBatch {
    CondBatch {
        rgb: rand_tokens(cfg, batch, rng),
        pm: rand_tokens(cfg, batch, rng),
    }
}

#[test]
fn codec_roundtrip_is_bitwise_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (w, h, p, c) in [(8usize, 4usize, 2usize, 3usize), (12, 8, 4, 3), (6, 6, 3, 1)] {
        let codec = PatchCodec::new(p, w, h, c).unwrap();
        let frame: Vec<f32> = (0..w * h * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let enc = codec.encode_frame(&frame);
        assert_eq!(enc.len(), frame.len());
        let dec = codec.decode_frame(&enc);
        assert_eq!(dec, frame);
    }
}

#[test]
fn codec_rejects_non_dividing_patch() {
    assert!(PatchCodec::new(3, 8, 4, 3).is_err());
}

#[test]
fn conditioning_repeats_latest_frame() {
    let cfg = tiny_cfg();
    let codec = cfg.codec().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let older: Vec<f32> = (0..8 * 4 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let latest: Vec<f32> = (0..8 * 4 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let pm: Vec<f32> = (0..8 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let cond = encode_condition(
        &codec,
        10,
        &[older.clone(), latest.clone()],
        &[pm.clone(), pm.clone()],
    )
    .unwrap();

    // ten identical token blocks
    let s = codec.tokens_per_frame();
    let f = codec.token_features();
    assert_eq!(cond.rgb.shape(), &[10 * s, f]);
    let block = &cond.rgb.data()[..s * f];
    for t in 1..10 {
        assert_eq!(&cond.rgb.data()[t * s * f..(t + 1) * s * f], block);
    }

    // only the latest frame is used, and it decodes back exactly
    assert_eq!(codec.decode_frame(block), latest);
    assert_ne!(codec.decode_frame(block), older);
}

#[test]
fn conditioning_requires_history() {
    let cfg = tiny_cfg();
    let codec = cfg.codec().unwrap();
    assert!(encode_condition(&codec, 2, &[], &[vec![0.0; 96]]).is_err());
}

#[test]
fn rgb_output_shape_and_view_label_invariance() {
    let cfg = tiny_cfg();
    let model = DenoiserParams::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = rand_tokens(&cfg, 2, &mut rng);
    let cond = rand_cond(&cfg, 2, &mut rng);
    let tape = Tape::eval();
    let a = model
        .denoise_rgb(&tape, &z, &[3, 9], &cond, ViewRole::Reference)
        .unwrap();
    let b = model
        .denoise_rgb(&tape, &z, &[3, 9], &cond, ViewRole::Secondary)
        .unwrap();
    assert_eq!(a.shape(), z.shape());
    assert_eq!(a.data(), b.data());
}

#[test]
fn pointmap_pair_shapes_match_inputs() {
    let cfg = tiny_cfg();
    let model = DenoiserParams::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z_n = rand_tokens(&cfg, 2, &mut rng);
    let z_m = rand_tokens(&cfg, 2, &mut rng);
    let cond_n = rand_cond(&cfg, 2, &mut rng);
    let cond_m = rand_cond(&cfg, 2, &mut rng);
    let tape = Tape::eval();
    let (out_n, out_m) = model
        .denoise_pointmap_pair(&tape, &z_n, &z_m, &[0, 10], &cond_n, &cond_m)
        .unwrap();
    assert_eq!(out_n.shape(), z_n.shape());
    assert_eq!(out_m.shape(), z_m.shape());
}

#[test]
fn step_out_of_range_is_rejected() {
    let cfg = tiny_cfg();
    let model = DenoiserParams::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = rand_tokens(&cfg, 1, &mut rng);
    let cond = rand_cond(&cfg, 1, &mut rng);
    let tape = Tape::eval();
    assert!(model
        .denoise_rgb(&tape, &z, &[cfg.time_levels], &cond, ViewRole::Reference)
        .is_err());
}

#[test]
fn decoder_branches_have_identical_param_counts() {
    let model = DenoiserParams::new(&tiny_cfg(), 7).unwrap();
    assert_eq!(model.param_count("pm.dec_n"), model.param_count("pm.dec_m"));
    assert!(model.param_count("pm.cross") > 0);

    let no_cross = DenoiserParams::new(
        &DenoiserConfig {
            cross_attention: false,
            ..tiny_cfg()
        },
        7,
    )
    .unwrap();
    assert_eq!(no_cross.param_count("pm.cross"), 0);
    assert_eq!(
        no_cross.param_count("pm.dec_n"),
        no_cross.param_count("pm.dec_m")
    );
}

#[test]
fn zeroed_cross_projections_decouple_branches() {
    let cfg = tiny_cfg();
    let mut model = DenoiserParams::new(&cfg, 7).unwrap();
    for (name, p) in model.named_params_mut() {
        if name.starts_with("pm.cross.") && name.ends_with(".wo") {
            p.replace_data(vec![0.0; p.numel()]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z_m = rand_tokens(&cfg, 1, &mut rng);
    let cond_n = rand_cond(&cfg, 1, &mut rng);
    let cond_m = rand_cond(&cfg, 1, &mut rng);
    let z_n_a = rand_tokens(&cfg, 1, &mut rng);
    let z_n_b = rand_tokens(&cfg, 1, &mut rng);

    let tape = Tape::eval();
    let (_, m_a) = model
        .denoise_pointmap_pair(&tape, &z_n_a, &z_m, &[4], &cond_n, &cond_m)
        .unwrap();
    let (_, m_b) = model
        .denoise_pointmap_pair(&tape, &z_n_b, &z_m, &[4], &cond_n, &cond_m)
        .unwrap();
    assert_eq!(m_a.data(), m_b.data());
}

#[test]
fn active_cross_attention_couples_branches() {
    let cfg = tiny_cfg();
    let model = DenoiserParams::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z_m = rand_tokens(&cfg, 1, &mut rng);
    let cond_n = rand_cond(&cfg, 1, &mut rng);
    let cond_m = rand_cond(&cfg, 1, &mut rng);
    let z_n = rand_tokens(&cfg, 1, &mut rng);
    // finite perturbation of the n input must move the m output
    let mut z_n_pert = z_n.data().to_vec();
    z_n_pert[0] += 0.5;
    let z_n_pert = Tensor::from_vec(z_n.shape().to_vec(), z_n_pert).unwrap();

    let tape = Tape::eval();
    let (_, m_a) = model
        .denoise_pointmap_pair(&tape, &z_n, &z_m, &[4], &cond_n, &cond_m)
        .unwrap();
    let (_, m_b) = model
        .denoise_pointmap_pair(&tape, &z_n_pert, &z_m, &[4], &cond_n, &cond_m)
        .unwrap();
    let diff: f32 = m_a
        .data()
        .iter()
        .zip(m_b.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "cross-attention did not propagate: {diff}");
}

#[test]
fn forward_is_deterministic_bitwise() {
    let cfg = tiny_cfg();
    let model = DenoiserParams::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = rand_tokens(&cfg, 2, &mut rng);
    let cond = rand_cond(&cfg, 2, &mut rng);
    let run = || {
        let tape = Tape::eval();
        model
            .denoise_rgb(&tape, &z, &[1, 2], &cond, ViewRole::Reference)
            .unwrap()
            .data()
            .to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn params_roundtrip_through_entries() {
    let cfg = tiny_cfg();
    let src = DenoiserParams::new(&cfg, 7).unwrap();
    let entries: Vec<(String, Tensor)> = src
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut dst = DenoiserParams::new(&cfg, 99).unwrap();
    dst.load_entries(&entries).unwrap();
    for ((_, a), (_, b)) in src.named_params().iter().zip(dst.named_params().iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn f64_reference_matches_f32_forward() {
    let cfg = tiny_cfg();
    let model = DenoiserParams::new(&cfg, 7).unwrap();
    let reference = crate::oracle::RefDenoiser::from_model(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    let z = rand_tokens(&cfg, 1, &mut rng);
    let cond = rand_cond(&cfg, 1, &mut rng);
    let tape = Tape::eval();
    let out = model
        .denoise_rgb(&tape, &z, &[5], &cond, ViewRole::Reference)
        .unwrap();
    let ref_out = reference.rgb_forward(
        &crate::oracle::to_f64(&z),
        5,
        &crate::oracle::to_f64(&cond.rgb),
        &crate::oracle::to_f64(&cond.pm),
    );
    let err = crate::oracle::max_rel_err(out.data(), &ref_out);
    assert!(err < 1e-4, "rgb forward deviates from f64 reference: {err:.2e}");

    let z_n = rand_tokens(&cfg, 1, &mut rng);
    let z_m = rand_tokens(&cfg, 1, &mut rng);
    let cond_n = rand_cond(&cfg, 1, &mut rng);
    let cond_m = rand_cond(&cfg, 1, &mut rng);
    let (out_n, out_m) = model
        .denoise_pointmap_pair(&tape, &z_n, &z_m, &[2], &cond_n, &cond_m)
        .unwrap();
    let (ref_n, ref_m) = reference.pm_pair_forward(
        &crate::oracle::to_f64(&z_n),
        &crate::oracle::to_f64(&z_m),
        2,
        (
            &crate::oracle::to_f64(&cond_n.rgb),
            &crate::oracle::to_f64(&cond_n.pm),
        ),
        (
            &crate::oracle::to_f64(&cond_m.rgb),
            &crate::oracle::to_f64(&cond_m.pm),
        ),
    );
    let err_n = crate::oracle::max_rel_err(out_n.data(), &ref_n);
    let err_m = crate::oracle::max_rel_err(out_m.data(), &ref_m);
    assert!(err_n < 1e-4 && err_m < 1e-4, "pm forward deviates: {err_n:.2e} / {err_m:.2e}");
}
