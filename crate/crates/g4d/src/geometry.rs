//! Pinhole cameras, SE(3) poses, depth maps and pointmaps.
//!
//! Every pointmap and pose carries the frame it lives in, and every
//! geometric operation checks frames before touching coordinates: getting a
//! cross-view transform silently wrong is the failure mode this module is
//! built to surface.
//!
//! Pixel convention: (i, j) = (column, row), pixel centers at integer
//! coordinates, depth is the camera-frame z coordinate in meters.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Projections with camera z below this are treated as invalid rather than
/// divided through.
pub const Z_MIN: f32 = 1e-4;

/// Identifies a coordinate frame ("world", "ep0/v2", ...).
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameId(pub String);

impl FrameId {
    pub fn new(s: impl Into<String>) -> Self {
        FrameId(s.into())
    }

    pub fn world() -> Self {
        FrameId("world".to_string())
    }

    pub fn view(episode: usize, view: usize) -> Self {
        FrameId(format!("ep{episode}/v{view}"))
    }
}

impl std::fmt::Display for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Debug for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FrameId({})", self.0)
    }
}

fn frame_mismatch(expected: &FrameId, found: &FrameId) -> Error {
    Error::FrameMismatch {
        expected: expected.0.clone(),
        found: found.0.clone(),
    }
}

// ---- small fixed-size linear algebra ----------------------------------------

pub type Vec3 = [f32; 3];
pub type Mat3 = [[f32; 3]; 3];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat_transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat_det(a: &Mat3) -> f32 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f32 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn vsub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vadd(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

// ---- camera intrinsics -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(0.0..width as f32).contains(&cx) || !(0.0..height as f32).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx},{cy}) outside {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics of the (ox, oy)-offset crop of size w x h.
    pub fn cropped(&self, ox: usize, oy: usize, w: usize, h: usize) -> Result<Intrinsics> {
        if ox + w > self.width || oy + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{ox}+{oy} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Intrinsics::new(
            self.fx,
            self.fy,
            self.cx - ox as f32,
            self.cy - oy as f32,
            w,
            h,
        )
    }
}

// ---- SE(3) pose ---------------------------------------------------------------

/// Rigid transform mapping points in `from` coordinates to `to` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    r: Mat3,
    t: Vec3,
    from: FrameId,
    to: FrameId,
}

impl Pose {
    /// Validates orthonormality (within 1e-5) and det = +1 (within 1e-5).
    pub fn new(r: Mat3, t: Vec3, from: FrameId, to: FrameId) -> Result<Self> {
        let rt_r = mat_mul(&mat_transpose(&r), &r);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (rt_r[i][j] - expected).abs() > 1e-5 {
                    return Err(Error::InvalidArgument(format!(
                        "rotation not orthonormal: (R^T R)[{i}][{j}] = {}",
                        rt_r[i][j]
                    )));
                }
            }
        }
        let det = mat_det(&r);
        if (det - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det}, expected +1"
            )));
        }
        Ok(Pose { r, t, from, to })
    }

    pub fn identity(frame: FrameId) -> Self {
        Pose {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
            from: frame.clone(),
            to: frame,
        }
    }

    pub fn rot_z(angle: f32, from: FrameId, to: FrameId) -> Self {
        let (s, c) = angle.sin_cos();
        Pose {
            r: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
            from,
            to,
        }
    }

    pub fn translation(t: Vec3, from: FrameId, to: FrameId) -> Self {
        Pose {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t,
            from,
            to,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation_part(&self) -> &Vec3 {
        &self.t
    }

    pub fn from_frame(&self) -> &FrameId {
        &self.from
    }

    pub fn to_frame(&self) -> &FrameId {
        &self.to
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        vadd(&mat_vec(&self.r, p), &self.t)
    }

    /// `compose(a, b)` applies `b` first, then `a`; frames must chain.
    pub fn compose(&self, b: &Pose) -> Result<Pose> {
        if self.from != b.to {
            return Err(frame_mismatch(&self.from, &b.to));
        }
        Ok(Pose {
            r: mat_mul(&self.r, &b.r),
            t: vadd(&mat_vec(&self.r, &b.t), &self.t),
            from: b.from.clone(),
            to: self.to.clone(),
        })
    }

    pub fn invert(&self) -> Pose {
        let rt = mat_transpose(&self.r);
        let t = mat_vec(&rt, &self.t);
        Pose {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
            from: self.to.clone(),
            to: self.from.clone(),
        }
    }

    /// Row-major rotation followed by translation, for manifests.
    pub fn to_rt12(&self) -> [f32; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.r[i][j];
            }
        }
        out[9..12].copy_from_slice(&self.t);
        out
    }

    pub fn from_rt12(rt: &[f32; 12], from: FrameId, to: FrameId) -> Result<Pose> {
        let r = [
            [rt[0], rt[1], rt[2]],
            [rt[3], rt[4], rt[5]],
            [rt[6], rt[7], rt[8]],
        ];
        Pose::new(r, [rt[9], rt[10], rt[11]], from, to)
    }
}

/// Pinhole intrinsics plus world-from-camera extrinsics.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub world_from_cam: Pose,
}

impl CameraModel {
    pub fn frame(&self) -> &FrameId {
        self.world_from_cam.from_frame()
    }

    pub fn cam_from_world(&self) -> Pose {
        self.world_from_cam.invert()
    }
}

// ---- images -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth map buffers do not match {width}x{height}"
            )));
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && v <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "valid depth must be positive, got {v} at {i}"
                )));
            }
        }
        Ok(DepthMap {
            width,
            height,
            values,
            valid,
        })
    }
}

/// Per-pixel 3D points expressed in a named frame.
#[derive(Clone, Debug)]
pub struct Pointmap {
    pub frame: FrameId,
    pub width: usize,
    pub height: usize,
    /// H*W*3 row-major (x, y, z per pixel), meters.
    pub points: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        let p = (j * self.width + i) * 3;
        [self.points[p], self.points[p + 1], self.points[p + 2]]
    }
}

/// Boolean image mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Axis-aligned bounding box (i_min, j_min, i_max, j_max), inclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for j in 0..self.height {
            for i in 0..self.width {
                if self.data[j * self.width + i] {
                    bb = Some(match bb {
                        None => (i, j, i, j),
                        Some((i0, j0, i1, j1)) => (i0.min(i), j0.min(j), i1.max(i), j1.max(j)),
                    });
                }
            }
        }
        bb
    }
}

/// Pixel coordinates and camera-frame depth of projected points.
#[derive(Clone, Debug)]
pub struct Projection {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub z: Vec<f32>,
    pub valid: Vec<bool>,
}

// ---- operations -----------------------------------------------------------------

/// Lifts a depth map through the pinhole model into the camera's own frame:
/// point(i, j) = ((i - cx) z / fx, (j - cy) z / fy, z).
pub fn lift_depth(d: &DepthMap, k: &Intrinsics, frame: FrameId) -> Result<Pointmap> {
    if d.width != k.width || d.height != k.height {
        return Err(Error::ShapeMismatch {
            op: "lift_depth",
            lhs: vec![d.width, d.height],
            rhs: vec![k.width, k.height],
        });
    }
    let mut points = vec![0.0f32; d.width * d.height * 3];
    for j in 0..d.height {
        for i in 0..d.width {
            let idx = j * d.width + i;
            if !d.valid[idx] {
                continue;
            }
            let z = d.values[idx];
            points[idx * 3] = (i as f32 - k.cx) * z / k.fx;
            points[idx * 3 + 1] = (j as f32 - k.cy) * z / k.fy;
            points[idx * 3 + 2] = z;
        }
    }
    Ok(Pointmap {
        frame,
        width: d.width,
        height: d.height,
        points,
        valid: d.valid.clone(),
    })
}

/// Maps every valid point by the pose; the pose's source frame must match.
pub fn transform_pointmap(pm: &Pointmap, t: &Pose) -> Result<Pointmap> {
    if *t.from_frame() != pm.frame {
        return Err(frame_mismatch(t.from_frame(), &pm.frame));
    }
    let mut points = vec![0.0f32; pm.points.len()];
    for idx in 0..pm.valid.len() {
        if !pm.valid[idx] {
            continue;
        }
        let p = [
            pm.points[idx * 3],
            pm.points[idx * 3 + 1],
            pm.points[idx * 3 + 2],
        ];
        let q = t.apply(&p);
        points[idx * 3..idx * 3 + 3].copy_from_slice(&q);
    }
    Ok(Pointmap {
        frame: t.to_frame().clone(),
        width: pm.width,
        height: pm.height,
        points,
        valid: pm.valid.clone(),
    })
}

/// Projects camera-frame points through the pinhole model. Points behind the
/// z = [`Z_MIN`] guard are marked invalid, never erroneous.
pub fn project_points(pm: &Pointmap, k: &Intrinsics) -> Projection {
    let n = pm.valid.len();
    let mut u = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    let mut z = vec![0.0f32; n];
    let mut valid = vec![false; n];
    for idx in 0..n {
        if !pm.valid[idx] {
            continue;
        }
        let (x, y, pz) = (
            pm.points[idx * 3],
            pm.points[idx * 3 + 1],
            pm.points[idx * 3 + 2],
        );
        if pz <= Z_MIN {
            continue;
        }
        u[idx] = k.fx * x / pz + k.cx;
        v[idx] = k.fy * y / pz + k.cy;
        z[idx] = pz;
        valid[idx] = true;
    }
    Projection {
        width: k.width,
        height: k.height,
        u,
        v,
        z,
        valid,
    }
}

/// Lifts a mask's (already 3D) points out of `pm_n`, transforms them into the
/// target camera's frame, projects them with `k_m`, and splats each onto its
/// nearest pixel. No z-testing: occluded points still land.
pub fn reproject_mask(
    mask: &Mask,
    pm_n: &Pointmap,
    pose_n_to_m: &Pose,
    k_m: &Intrinsics,
) -> Result<Mask> {
    if mask.width != pm_n.width || mask.height != pm_n.height {
        return Err(Error::ShapeMismatch {
            op: "reproject_mask",
            lhs: vec![mask.width, mask.height],
            rhs: vec![pm_n.width, pm_n.height],
        });
    }
    if pose_n_to_m.from_frame() != &pm_n.frame {
        return Err(frame_mismatch(pose_n_to_m.from_frame(), &pm_n.frame));
    }
    let mut out = Mask::empty(k_m.width, k_m.height);
    for idx in 0..mask.data.len() {
        if !mask.data[idx] || !pm_n.valid[idx] {
            continue;
        }
        let p = [
            pm_n.points[idx * 3],
            pm_n.points[idx * 3 + 1],
            pm_n.points[idx * 3 + 2],
        ];
        let q = pose_n_to_m.apply(&p);
        if q[2] <= Z_MIN {
            continue;
        }
        let u = (k_m.fx * q[0] / q[2] + k_m.cx).round();
        let v = (k_m.fy * q[1] / q[2] + k_m.cy).round();
        if u < 0.0 || v < 0.0 || u >= k_m.width as f32 || v >= k_m.height as f32 {
            continue;
        }
        out.data[v as usize * k_m.width + u as usize] = true;
    }
    Ok(out)
}
