use super::script::TrajectoryScript;
use super::{ID_BODY, ID_LEFT_FINGER, ID_OBJECT, ID_RIGHT_FINGER, ID_TABLE};
use crate::geometry::{
    mat_transpose, mat_vec, normalize, CameraModel, DepthMap, FrameId, Mat3, Pose, Vec3, Z_MIN,
};

const AMBIENT: f32 = 0.35;
const LIGHT_DIR: Vec3 = [0.330, -0.235, 0.914]; // unit length

/// H x W x 3 row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let p = (j * self.width + i) * 3;
        [self.data[p], self.data[p + 1], self.data[p + 2]]
    }
}

/// Per-pixel instance ids; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct IdMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl IdMask {
    /// Boolean mask of pixels whose id is in `ids`.
    pub fn select(&self, ids: &[u8]) -> crate::geometry::Mask {
        crate::geometry::Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|id| ids.contains(id)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cuboid {
    pub world_from_body: Pose,
    pub half: Vec3,
    pub color: [f32; 3],
    pub id: u8,
}

/// World content at one timestep.
#[derive(Clone, Debug)]
pub struct SceneState {
    pub table_half_extent: [f32; 2],
    pub table_color: [f32; 3],
    pub cuboids: Vec<Cuboid>,
}

impl SceneState {
    /// Assembles the scene at step `t` of a script.
    pub fn at_step(script: &TrajectoryScript, t: usize) -> SceneState {
        let spec = script.spec();
        let body_pose = script.gripper_pose(t);
        let gap = script.finger_gap(t);
        let drop = -(spec.body_dims[2] + spec.finger_dims[2]) / 2.0;
        let finger = |sign: f32, id: u8, color: [f32; 3]| {
            let offset = [sign * gap / 2.0, 0.0, drop];
            let world_t = body_pose.apply(&offset);
            Cuboid {
                world_from_body: Pose::new(
                    *body_pose.rotation(),
                    world_t,
                    FrameId::new("finger"),
                    FrameId::world(),
                )
                .expect("finger pose shares the body rotation"),
                half: [
                    spec.finger_dims[0] / 2.0,
                    spec.finger_dims[1] / 2.0,
                    spec.finger_dims[2] / 2.0,
                ],
                color,
                id,
            }
        };
        SceneState {
            table_half_extent: spec.table_half_extent,
            table_color: spec.color_of(ID_TABLE),
            cuboids: vec![
                Cuboid {
                    world_from_body: body_pose.clone(),
                    half: [
                        spec.body_dims[0] / 2.0,
                        spec.body_dims[1] / 2.0,
                        spec.body_dims[2] / 2.0,
                    ],
                    color: spec.color_of(ID_BODY),
                    id: ID_BODY,
                },
                finger(-1.0, ID_LEFT_FINGER, spec.color_of(ID_LEFT_FINGER)),
                finger(1.0, ID_RIGHT_FINGER, spec.color_of(ID_RIGHT_FINGER)),
                Cuboid {
                    world_from_body: script.object_pose(t),
                    half: [
                        spec.object_dims[0] / 2.0,
                        spec.object_dims[1] / 2.0,
                        spec.object_dims[2] / 2.0,
                    ],
                    color: spec.color_of(ID_OBJECT),
                    id: ID_OBJECT,
                },
            ],
        }
    }
}

struct Hit {
    t: f32,
    normal: Vec3,
    color: [f32; 3],
    id: u8,
}

/// Ray/axis-aligned-box intersection in body coordinates. Returns the entry
/// parameter and the entry face normal (body frame).
fn ray_box(o: &Vec3, d: &Vec3, half: &Vec3) -> Option<(f32, Vec3)> {
    let mut t_enter = f32::NEG_INFINITY;
    let mut t_exit = f32::INFINITY;
    let mut axis = 0usize;
    let mut sign = 1.0f32;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut t1 = (-half[a] - o[a]) * inv;
        let mut t2 = (half[a] - o[a]) * inv;
        let mut s = -1.0f32;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
            s = 1.0;
        }
        if t1 > t_enter {
            t_enter = t1;
            axis = a;
            sign = s;
        }
        t_exit = t_exit.min(t2);
    }
    if t_enter > t_exit || t_enter <= Z_MIN {
        return None;
    }
    let mut normal = [0.0f32; 3];
    normal[axis] = sign;
    Some((t_enter, normal))
}

/// Z-buffer render by exact per-pixel ray casting. Depth is the camera-frame
/// z coordinate; background pixels carry invalid depth and id 0.
pub fn render_frame(scene: &SceneState, cam: &CameraModel) -> (RgbImage, DepthMap, IdMask) {
    let k = &cam.intrinsics;
    let (w, h) = (k.width, k.height);
    let origin = *cam.world_from_cam.translation_part();
    let rot = cam.world_from_cam.rotation();

    let mut rgb = vec![0.0f32; w * h * 3];
    let mut depth = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    let mut ids = vec![0u8; w * h];

    // per-cuboid ray data precomputed in body frames
    let bodies: Vec<(Mat3, Vec3, Vec3)> = scene
        .cuboids
        .iter()
        .map(|c| {
            let r_inv = mat_transpose(c.world_from_body.rotation());
            let t = *c.world_from_body.translation_part();
            let o_rel = [origin[0] - t[0], origin[1] - t[1], origin[2] - t[2]];
            (r_inv, mat_vec(&r_inv, &o_rel), t)
        })
        .collect();

    for j in 0..h {
        for i in 0..w {
            // pixel ray: camera-frame direction with z = 1, so the ray
            // parameter IS the camera-frame depth
            let dir_cam = [
                (i as f32 - k.cx) / k.fx,
                (j as f32 - k.cy) / k.fy,
                1.0,
            ];
            let dir = mat_vec(rot, &dir_cam);

            let mut best: Option<Hit> = None;

            // table plane z = 0, finite extent
            if dir[2].abs() > 1e-12 {
                let t = -origin[2] / dir[2];
                if t > Z_MIN {
                    let x = origin[0] + t * dir[0];
                    let y = origin[1] + t * dir[1];
                    if x.abs() <= scene.table_half_extent[0]
                        && y.abs() <= scene.table_half_extent[1]
                    {
                        best = Some(Hit {
                            t,
                            normal: [0.0, 0.0, 1.0],
                            color: scene.table_color,
                            id: ID_TABLE,
                        });
                    }
                }
            }

            for (c, (r_inv, o_b, _)) in scene.cuboids.iter().zip(&bodies) {
                let d_b = mat_vec(r_inv, &dir);
                if let Some((t, n_body)) = ray_box(o_b, &d_b, &c.half) {
                    if best.as_ref().map_or(true, |b| t < b.t) {
                        let n_world = mat_vec(c.world_from_body.rotation(), &n_body);
                        best = Some(Hit {
                            t,
                            normal: n_world,
                            color: c.color,
                            id: c.id,
                        });
                    }
                }
            }

            if let Some(hit) = best {
                let idx = j * w + i;
                let n = normalize(&hit.normal);
                let lambert = crate::geometry::dot(&n, &LIGHT_DIR).max(0.0);
                let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                for c in 0..3 {
                    rgb[idx * 3 + c] = (hit.color[c] * shade).clamp(0.0, 1.0);
                }
                depth[idx] = hit.t;
                valid[idx] = true;
                ids[idx] = hit.id;
            }
        }
    }

    let depth_map = DepthMap {
        width: w,
        height: h,
        values: depth,
        valid,
    };
    (
        RgbImage {
            width: w,
            height: h,
            data: rgb,
        },
        depth_map,
        IdMask {
            width: w,
            height: h,
            data: ids,
        },
    )
}
