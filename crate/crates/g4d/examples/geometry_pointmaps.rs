//! Pinhole + SE(3) essentials: lifting depth to a pointmap, projecting it
//! back, moving points between camera frames, and splatting a mask from one
//! view into another.
//!
//! Run with: cargo run --release --example geometry_pointmaps

use g4d::geometry::{
    lift_depth, project_points, reproject_mask, transform_pointmap,
};
use g4d::metrics::bbox_iou;
use g4d::synthscene::{
    render_frame, sample_cameras, script_trajectory, SceneSpec, SceneState, GRIPPER_IDS,
};

fn main() -> g4d::Result<()> {
    // render one scene from two sampled cameras
    let spec = SceneSpec::default();
    let script = script_trajectory(&spec, 4)?;
    let state = SceneState::at_step(&script, 8);
    let cams = sample_cameras(13, 2, 128, 96, 0)?;
    let (_, depth_a, ids_a) = render_frame(&state, &cams[0]);
    let (_, _, ids_b) = render_frame(&state, &cams[1]);

    // lift view a's depth into 3D and project it straight back
    let pm_a = lift_depth(&depth_a, &cams[0].intrinsics, cams[0].frame().clone())?;
    let proj = project_points(&pm_a, &cams[0].intrinsics);
    let mut worst = 0.0f32;
    for j in 0..depth_a.height {
        for i in 0..depth_a.width {
            let idx = j * depth_a.width + i;
            if proj.valid[idx] {
                worst = worst.max((proj.u[idx] - i as f32).abs());
                worst = worst.max((proj.v[idx] - j as f32).abs());
            }
        }
    }
    println!("lift -> project pixel error: {worst:.2e}");

    // express view a's points in view b's camera frame and back
    let a_to_b = cams[1].cam_from_world().compose(&cams[0].world_from_cam)?;
    let in_b = transform_pointmap(&pm_a, &a_to_b)?;
    let back = transform_pointmap(&in_b, &a_to_b.invert())?;
    let mut round_trip = 0.0f32;
    for (x, y) in back.points.iter().zip(&pm_a.points) {
        round_trip = round_trip.max((x - y).abs());
    }
    println!("frame round-trip error: {round_trip:.2e} m");

    // splat view a's gripper mask into view b and compare bounding boxes
    let mask_a = ids_a.select(&GRIPPER_IDS);
    let mask_b = ids_b.select(&GRIPPER_IDS);
    let splat = reproject_mask(&mask_a, &pm_a, &a_to_b, &cams[1].intrinsics)?;
    let iou = bbox_iou(&splat, &mask_b).unwrap_or(0.0);
    println!(
        "gripper mask: {} px in view a -> {} splatted px in view b, bbox IoU {iou:.3}",
        mask_a.count(),
        splat.count()
    );

    // frames are checked on every geometric call
    let wrong_frame = transform_pointmap(&pm_a, &a_to_b.invert());
    println!("applying the inverse to the wrong frame: {:?}", wrong_frame.err());
    Ok(())
}
