use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::geometry::{FrameId, Mat3, Pose, Vec3};
use crate::Result;

pub const EPISODE_STEPS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperState {
    Open,
    Closed,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub step: usize,
    pub pos: Vec3,
    pub state: GripperState,
}

/// Scripted reach -> close -> lift -> move -> lower -> open sequence.
/// Positions interpolate linearly between keyframes; the orientation is a
/// fixed per-episode yaw. The object rides the gripper over the attach
/// interval and its pose is continuous at both ends.
#[derive(Clone, Debug)]
pub struct TrajectoryScript {
    pub steps: usize,
    pub rotation: Mat3,
    pub object_rotation: Mat3,
    pub keyframes: Vec<Keyframe>,
    /// [t_close, t_open): object rigidly attached to the gripper.
    pub attach: (usize, usize),
    pub object_start: Vec3,
    pub goal_center: [f32; 2],
    pub goal_radius: f32,
    spec: SceneSpec,
}

fn yaw_matrix(angle: f32) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Grasp height: body center z such that the fingertips clear the table by
/// 1 cm while the fingers straddle the object.
fn grasp_height(spec: &SceneSpec) -> f32 {
    0.01 + spec.finger_dims[2] + spec.body_dims[2] / 2.0
}

pub fn script_trajectory(spec: &SceneSpec, seed: u64) -> Result<TrajectoryScript> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let sr = spec.start_region;
    let gr = spec.goal_region;
    let start = [
        rng.gen_range(sr[0][0]..sr[0][1]),
        rng.gen_range(sr[1][0]..sr[1][1]),
        spec.object_dims[2] / 2.0,
    ];
    let goal = [
        rng.gen_range(gr[0][0]..gr[0][1]),
        rng.gen_range(gr[1][0]..gr[1][1]),
    ];
    // fingers separate along the gripper's x axis; a base yaw of 90 degrees
    // turns that axis broadside to the one-sided camera box so both fingers
    // stay visible
    let yaw = std::f32::consts::FRAC_PI_2 + rng.gen_range(-0.35f32..0.35);
    let object_yaw = rng.gen_range(-0.35f32..0.35);

    let gz = grasp_height(spec);
    let hover = gz + spec.hover_height;
    let above_start = [start[0], start[1], hover];
    let at_start = [start[0], start[1], gz];
    let above_goal = [goal[0], goal[1], hover];
    let at_goal = [goal[0], goal[1], gz];

    let keyframes = vec![
        Keyframe { step: 0, pos: above_start, state: GripperState::Open },
        Keyframe { step: 5, pos: at_start, state: GripperState::Open },
        Keyframe { step: 6, pos: at_start, state: GripperState::Closed },
        Keyframe { step: 10, pos: above_start, state: GripperState::Closed },
        Keyframe { step: 15, pos: above_goal, state: GripperState::Closed },
        Keyframe { step: 19, pos: at_goal, state: GripperState::Closed },
        Keyframe { step: 20, pos: at_goal, state: GripperState::Open },
        Keyframe { step: 23, pos: above_goal, state: GripperState::Open },
    ];

    Ok(TrajectoryScript {
        steps: EPISODE_STEPS,
        rotation: yaw_matrix(yaw),
        object_rotation: yaw_matrix(object_yaw),
        keyframes,
        attach: (6, 20),
        object_start: start,
        goal_center: goal,
        goal_radius: 0.05,
        spec: spec.clone(),
    })
}

impl TrajectoryScript {
    pub fn gripper_position(&self, t: usize) -> Vec3 {
        let t = t.min(self.steps - 1);
        let mut prev = &self.keyframes[0];
        for kf in &self.keyframes {
            if kf.step == t {
                return kf.pos;
            }
            if kf.step > t {
                let span = (kf.step - prev.step) as f32;
                let alpha = (t - prev.step) as f32 / span;
                return [
                    prev.pos[0] + alpha * (kf.pos[0] - prev.pos[0]),
                    prev.pos[1] + alpha * (kf.pos[1] - prev.pos[1]),
                    prev.pos[2] + alpha * (kf.pos[2] - prev.pos[2]),
                ];
            }
            prev = kf;
        }
        prev.pos
    }

    pub fn gripper_pose(&self, t: usize) -> Pose {
        Pose::new(
            self.rotation,
            self.gripper_position(t),
            FrameId::new("gripper"),
            FrameId::world(),
        )
        .expect("yaw matrix is a rotation")
    }

    pub fn state(&self, t: usize) -> GripperState {
        if (self.attach.0..self.attach.1).contains(&t) {
            GripperState::Closed
        } else {
            GripperState::Open
        }
    }

    pub fn object_pose(&self, t: usize) -> Pose {
        let obj_frame = FrameId::new("object");
        let start = Pose::new(
            self.object_rotation,
            self.object_start,
            obj_frame.clone(),
            FrameId::world(),
        )
        .expect("yaw matrix is a rotation");
        if t < self.attach.0 {
            return start;
        }
        // rigid offset captured at the attach instant
        let grip_at_close = self.gripper_pose(self.attach.0);
        let grip_from_obj = grip_at_close
            .invert()
            .compose(&start)
            .expect("frames chain at attach");
        let t_eff = t.min(self.attach.1);
        self.gripper_pose(t_eff)
            .compose(&grip_from_obj)
            .expect("frames chain over attach interval")
    }

    /// Largest per-step gripper displacement in the script.
    pub fn max_step_displacement(&self) -> f32 {
        (1..self.steps)
            .map(|t| {
                let a = self.gripper_position(t - 1);
                let b = self.gripper_position(t);
                crate::geometry::norm(&crate::geometry::vsub(&a, &b))
            })
            .fold(0.0, f32::max)
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn finger_gap(&self, t: usize) -> f32 {
        match self.state(t) {
            GripperState::Open => self.spec.open_gap,
            GripperState::Closed => self.spec.closed_gap,
        }
    }
}
