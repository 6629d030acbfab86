//! Minimal end-to-end run: generate one episode, train the two-view denoiser
//! briefly, sample future frames, and score them against ground truth.
//! The configuration is tiny so this finishes in about a minute; expect
//! rough-but-recognizable numbers, not the full overfit quality.
//!
//! Run with: cargo run --release --example train_and_sample

use g4d::cli;
use g4d::config::load_config;
use g4d::diffusion::{self};
use g4d::synthscene::Dataset;

fn main() -> g4d::Result<()> {
    let work = std::env::temp_dir().join("g4d_example_train");
    let data_dir = work.join("data");
    let run_dir = work.join("run");
    let pred_dir = work.join("pred");

    let overrides: Vec<(String, String)> = [
        ("image.width", "16"),
        ("image.height", "12"),
        ("image.crop_width", "16"),
        ("image.crop_height", "12"),
        ("model.dim", "48"),
        ("model.heads", "4"),
        ("dataset.episodes", "1"),
        ("dataset.cameras", "3"),
        ("dataset.train_views", "2"),
        ("dataset.test_views", "1"),
        ("train.steps", "300"),
        ("train.batch", "2"),
        ("train.lr", "0.0015"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let cfg = load_config(None, &overrides)?;

    println!("generating dataset ...");
    cli::gen_data(&cfg, &data_dir, None, 0)?;
    let ds = Dataset::load(&data_dir)?;

    println!("training {} steps ...", cfg.train.steps);
    let result = diffusion::train(
        &cfg.denoiser_config()?,
        &cfg.train_settings(0),
        &ds,
        &run_dir,
        None,
    )?;
    let first = result.curve[0][4];
    let last = result.curve.last().unwrap()[4];
    println!("joint loss: {first:.4} -> {last:.4}");

    println!("sampling 10 future frames from t0 = 2 ...");
    cli::predict(&result.final_checkpoint, &data_dir, 0, (0, 1), 2, &pred_dir, 9)?;
    let report = cli::eval(&pred_dir, &data_dir, &pred_dir.join("report.json"))?;
    println!(
        "AbsRel n/m: {:.3}/{:.3}   d1 n/m: {:.3}/{:.3}   PSNR n/m: {:.1}/{:.1} dB   mIoU: {:.3}",
        report.absrel_n,
        report.absrel_m,
        report.delta1_n,
        report.delta1_m,
        report.view_n.psnr,
        report.view_m.psnr,
        report.miou
    );
    println!("report written to {}", pred_dir.join("report.json").display());
    Ok(())
}
