//! Recovers the scripted gripper trajectory from a ground-truth 4D video:
//! palette segmentation, cuboid pose fitting per view, residual-based view
//! selection and finger-distance open/close detection.
//!
//! Run with: cargo run --release --example extract_trajectory

use g4d::geometry::{lift_depth, norm, transform_pointmap, vsub};
use g4d::synthscene::{
    render_frame, sample_cameras, script_trajectory, SceneSpec, SceneState,
};
use g4d::trajectory::{extract_trajectory, FourDFrame, FourDVideo};

fn main() -> g4d::Result<()> {
    let spec = SceneSpec::default();
    let script = script_trajectory(&spec, 11)?;
    let cams = sample_cameras(111, 2, 96, 72, 0)?;
    let frame_n = cams[0].frame().clone();
    let cam0_from_world = cams[0].cam_from_world();
    let pose_1_to_0 = cams[0].cam_from_world().compose(&cams[1].world_from_cam)?;

    // assemble the 4D video: RGB per view, pointmaps both in view 0's frame
    let mut frames = Vec::new();
    let mut gt = Vec::new();
    for t in 0..script.steps {
        let state = SceneState::at_step(&script, t);
        let (rgb0, d0, _) = render_frame(&state, &cams[0]);
        let (rgb1, d1, _) = render_frame(&state, &cams[1]);
        let pm0 = lift_depth(&d0, &cams[0].intrinsics, frame_n.clone())?;
        let pm1 = lift_depth(&d1, &cams[1].intrinsics, cams[1].frame().clone())?;
        let pm1 = transform_pointmap(&pm1, &pose_1_to_0)?;
        frames.push(FourDFrame {
            rgb: [rgb0, rgb1],
            pm: [pm0, pm1],
        });
        gt.push(cam0_from_world.compose(&script.gripper_pose(t))?);
    }
    let video = FourDVideo { frames, frame_n };

    let gspec = spec.gripper_spec();
    println!(
        "gripper spec: body {:?} m, open/closed gaps {}/{} m, delta {}",
        gspec.body_dims,
        gspec.open_gap,
        gspec.closed_gap,
        gspec.default_delta()
    );

    let est = extract_trajectory(&video, &gspec, &gt[0], None)?;
    let mut sq = 0.0f64;
    for (pt, want) in est.points.iter().zip(&gt) {
        let err = norm(&vsub(pt.pose.translation_part(), want.translation_part()));
        sq += (err as f64).powi(2);
        if pt.t % 6 == 0 {
            println!(
                "t={:2} view={} residual={:.1e} state={:?} translation err={:.2e} m",
                pt.t,
                pt.view,
                pt.residuals[pt.view].unwrap_or(f32::NAN),
                pt.state,
                err
            );
        }
    }
    let rmse = (sq / gt.len() as f64).sqrt();
    println!("translation RMSE vs script: {rmse:.2e} m over {} frames", gt.len());

    let transitions: Vec<usize> = est
        .points
        .windows(2)
        .filter(|w| w[0].state != w[1].state)
        .map(|w| w[1].t)
        .collect();
    println!("state transitions at frames {transitions:?} (script closes at 6, opens at 20)");
    Ok(())
}
