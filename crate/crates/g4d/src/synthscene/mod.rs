//! Procedural multi-view RGB-D episode generator: a tabletop plane, a
//! two-finger gripper following a scripted pick-and-place, and an object
//! cuboid, rendered from hemisphere-shell cameras by an exact ray caster.

mod dataset;
mod render;
mod script;

pub use dataset::{
    generate_dataset, CameraEntry, Dataset, DatasetConfig, EpisodeEntry, FrameFiles,
    GripperTruth, Manifest, Normalizer, Split,
};
pub use render::{render_frame, IdMask, RgbImage, SceneState};
pub use script::{script_trajectory, GripperState, Keyframe, TrajectoryScript};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{cross, normalize, CameraModel, FrameId, Intrinsics, Mat3, Pose, Vec3};
use crate::{Error, Result};

pub const ID_BACKGROUND: u8 = 0;
pub const ID_TABLE: u8 = 1;
pub const ID_BODY: u8 = 2;
pub const ID_LEFT_FINGER: u8 = 3;
pub const ID_RIGHT_FINGER: u8 = 4;
pub const ID_OBJECT: u8 = 5;

/// Instance ids that make up the gripper.
pub const GRIPPER_IDS: [u8; 3] = [ID_BODY, ID_LEFT_FINGER, ID_RIGHT_FINGER];

/// Camera position sampling region: a spherical shell around the origin
/// intersected with a box.
pub const CAM_RADIUS: (f32, f32) = (0.7, 1.2);
pub const CAM_X: (f32, f32) = (0.2, 0.6);
pub const CAM_Y: (f32, f32) = (-0.5, 0.5);
pub const CAM_Z: (f32, f32) = (0.7, 1.2);

const MAX_REJECTION_DRAWS: u64 = 100_000;

/// Static description of the tabletop world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Table plane z = 0, extends +-half_extent in x and y.
    pub table_half_extent: [f32; 2],
    /// Full gripper body dims (meters).
    pub body_dims: [f32; 3],
    /// Full finger dims (meters). Fingers hang below the body.
    pub finger_dims: [f32; 3],
    /// Center-to-center finger gap when open / closed.
    pub open_gap: f32,
    pub closed_gap: f32,
    /// Full object cuboid dims.
    pub object_dims: [f32; 3],
    /// Gripper travel height above the table.
    pub hover_height: f32,
    /// Object start sampling region: [[x_min, x_max], [y_min, y_max]].
    #[serde(default = "default_start_region")]
    pub start_region: [[f32; 2]; 2],
    /// Place-goal sampling region, same layout.
    #[serde(default = "default_goal_region")]
    pub goal_region: [[f32; 2]; 2],
    /// Flat colors per instance id: [table, body, left, right, object].
    pub colors: [[f32; 3]; 5],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            table_half_extent: [3.0, 3.0],
            body_dims: [0.09, 0.13, 0.07],
            finger_dims: [0.03, 0.03, 0.12],
            open_gap: 0.22,
            closed_gap: 0.11,
            object_dims: [0.07, 0.07, 0.07],
            hover_height: 0.10,
            start_region: default_start_region(),
            goal_region: default_goal_region(),
            colors: [
                [0.52, 0.52, 0.55], // table
                [0.15, 0.25, 0.85], // body
                [0.10, 0.80, 0.20], // left finger
                [0.85, 0.75, 0.10], // right finger
                [0.85, 0.15, 0.12], // object
            ],
        }
    }
}

fn default_start_region() -> [[f32; 2]; 2] {
    [[-0.12, -0.02], [-0.10, 0.10]]
}

fn default_goal_region() -> [[f32; 2]; 2] {
    [[0.02, 0.12], [-0.10, 0.10]]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = self
            .body_dims
            .iter()
            .chain(&self.finger_dims)
            .chain(&self.object_dims)
            .chain(&self.table_half_extent)
            .chain([&self.open_gap, &self.closed_gap, &self.hover_height]);
        for &d in dims {
            if d <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "scene dims must be positive, got {d}"
                )));
            }
        }
        for region in [&self.start_region, &self.goal_region] {
            if region[0][0] >= region[0][1] || region[1][0] >= region[1][1] {
                return Err(Error::InvalidArgument(format!(
                    "degenerate sampling region {region:?}"
                )));
            }
        }
        if self.open_gap <= self.closed_gap {
            return Err(Error::InvalidArgument(format!(
                "open gap {} must exceed closed gap {}",
                self.open_gap, self.closed_gap
            )));
        }
        Ok(())
    }

    pub fn color_of(&self, id: u8) -> [f32; 3] {
        match id {
            ID_TABLE => self.colors[0],
            ID_BODY => self.colors[1],
            ID_LEFT_FINGER => self.colors[2],
            ID_RIGHT_FINGER => self.colors[3],
            ID_OBJECT => self.colors[4],
            _ => [0.0; 3],
        }
    }
}

/// Deterministic seed derivation: one master seed, one stream per purpose.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = splitmix64(x);
    }
    splitmix64(x)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Default pinhole intrinsics for a render target: ~58 degree horizontal FOV,
/// principal point at the pixel-grid center. Wide enough that the gripper
/// stays in frame at its hover apex from every sampled camera.
pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    Intrinsics::new(
        0.9 * width as f32,
        0.9 * width as f32,
        (width - 1) as f32 / 2.0,
        (height - 1) as f32 / 2.0,
        width,
        height,
    )
    .expect("default intrinsics are valid")
}

/// Camera-from-world orientation looking from `eye` at the origin, up = +z.
/// Convention: camera x right, y down, z forward.
fn look_at_origin(eye: &Vec3) -> Mat3 {
    let forward = normalize(&[-eye[0], -eye[1], -eye[2]]);
    let s = normalize(&cross(&forward, &[0.0, 0.0, 1.0]));
    let u = cross(&s, &forward);
    // world-from-camera columns: [right, down, forward]
    [
        [s[0], -u[0], forward[0]],
        [s[1], -u[1], forward[1]],
        [s[2], -u[2], forward[2]],
    ]
}

/// Rejection-samples `count` camera poses inside the shell/box region, all
/// looking at the world origin.
pub fn sample_cameras(
    seed: u64,
    count: usize,
    width: usize,
    height: usize,
    episode: usize,
) -> Result<Vec<CameraModel>> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 cameras, got {count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cams = Vec::with_capacity(count);
    let mut draws = 0u64;
    while cams.len() < count {
        draws += 1;
        if draws > MAX_REJECTION_DRAWS {
            return Err(Error::CameraSampling(draws));
        }
        let p = [
            rng.gen_range(CAM_X.0..CAM_X.1),
            rng.gen_range(CAM_Y.0..CAM_Y.1),
            rng.gen_range(CAM_Z.0..CAM_Z.1),
        ];
        let r = crate::geometry::norm(&p);
        if !(CAM_RADIUS.0..=CAM_RADIUS.1).contains(&r) {
            continue;
        }
        let view = cams.len();
        let world_from_cam = Pose::new(
            look_at_origin(&p),
            p,
            FrameId::view(episode, view),
            FrameId::world(),
        )?;
        cams.push(CameraModel {
            intrinsics: default_intrinsics(width, height),
            world_from_cam,
        });
    }
    Ok(cams)
}
