//! The evaluation metrics on known inputs: depth accuracy and threshold
//! accuracy on hand-built maps, then a full cross-view report of ground
//! truth against itself (the upper bound any model can reach).
//!
//! Run with: cargo run --release --example evaluate_metrics

use g4d::cli;
use g4d::geometry::{DepthMap, FrameId, Pointmap};
use g4d::metrics::{absrel, delta1};
use g4d::synthscene::{generate_dataset, DatasetConfig};

fn pointmap_with_z(values: &[f32], w: usize, h: usize) -> Pointmap {
    let mut points = vec![0.0; w * h * 3];
    for (i, &z) in values.iter().enumerate() {
        points[i * 3 + 2] = z;
    }
    Pointmap {
        frame: FrameId::new("cam"),
        width: w,
        height: h,
        points,
        valid: vec![true; w * h],
    }
}

fn main() -> g4d::Result<()> {
    // unit behavior of the depth metrics
    let gt = DepthMap::new(2, 2, vec![2.0; 4], vec![true; 4])?;
    println!(
        "exact prediction: AbsRel {}  d1 {}",
        absrel(&pointmap_with_z(&[2.0; 4], 2, 2), &gt)?,
        delta1(&pointmap_with_z(&[2.0; 4], 2, 2), &gt)?
    );
    println!(
        "uniformly 25% deep: AbsRel {}  d1 {} (the 1.25 ratio is strictly outside)",
        absrel(&pointmap_with_z(&[2.5; 4], 2, 2), &gt)?,
        delta1(&pointmap_with_z(&[2.5; 4], 2, 2), &gt)?
    );

    // full report: export ground truth as a prediction tree and score it
    let work = std::env::temp_dir().join("g4d_example_eval");
    let data = work.join("data");
    let cfg = DatasetConfig {
        episodes: 1,
        cameras: 3,
        train_views: 2,
        test_views: 1,
        episode_len: 14,
        width: 96,
        height: 72,
        seed: 7,
        ..Default::default()
    };
    generate_dataset(&cfg, &data)?;
    std::fs::write(
        data.join("gripper_spec.json"),
        serde_json::to_string_pretty(&cfg.scene.gripper_spec())?,
    )?;
    let gt_tree = work.join("gt_tree");
    cli::export_gt(&data, 0, (0, 1), 2, 10, &gt_tree)?;
    let report = cli::eval(&gt_tree, &data, &work.join("report.json"))?;
    println!(
        "ground truth vs itself: AbsRel n/m {:.1e}/{:.1e}, d1 n/m {}/{}, mIoU {:.3} ({} frames used, {} skipped)",
        report.absrel_n,
        report.absrel_m,
        report.delta1_n,
        report.delta1_m,
        report.miou,
        report.miou_frames_used,
        report.miou_frames_skipped
    );
    println!("full report at {}", work.join("report.json").display());
    Ok(())
}
