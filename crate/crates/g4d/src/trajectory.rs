//! End-effector trajectory extraction from generated 4D video: palette-based
//! gripper segmentation, model-based cuboid pose fitting (PCA initialization
//! refined by point-to-surface ICP), finger-distance open/close detection,
//! and per-frame best-view selection by fit residual.

use serde::{Deserialize, Serialize};

use crate::geometry::{FrameId, Mat3, Mask, Pointmap, Pose, Vec3};
use crate::synthscene::{
    GripperState, RgbImage, SceneSpec, ID_BODY, ID_LEFT_FINGER, ID_OBJECT, ID_RIGHT_FINGER,
    ID_TABLE,
};
use crate::{Error, Result};

/// Consecutive frames both views may go untracked before extraction aborts.
pub const MAX_UNTRACKED_RUN: usize = 3;
/// Minimum segmented 3D points for a pose fit.
pub const MIN_FIT_POINTS: usize = 20;
/// Chromaticity distance beyond which a pixel matches no palette entry.
pub const COLOR_TOLERANCE: f32 = 0.25;

/// Geometry and appearance of the gripper, as needed by the extractor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GripperSpec {
    pub body_dims: [f32; 3],
    pub finger_dims: [f32; 3],
    /// Finger center offset below the body center (z drop in body frame).
    pub finger_drop: f32,
    /// Center-to-center fingertip gaps.
    pub open_gap: f32,
    pub closed_gap: f32,
    /// Full instance palette: (id, flat color). Shading scales colors, so
    /// matching happens on chromaticity.
    pub palette: Vec<(u8, [f32; 3])>,
    pub body_id: u8,
    pub left_id: u8,
    pub right_id: u8,
}

impl GripperSpec {
    /// The open/closed decision threshold: midpoint of the two scripted
    /// fingertip-centroid distances, maximizing margin on both sides.
    pub fn default_delta(&self) -> f32 {
        (self.open_gap + self.closed_gap) / 2.0
    }

    pub fn body_half(&self) -> [f32; 3] {
        [
            self.body_dims[0] / 2.0,
            self.body_dims[1] / 2.0,
            self.body_dims[2] / 2.0,
        ]
    }
}

impl SceneSpec {
    pub fn gripper_spec(&self) -> GripperSpec {
        GripperSpec {
            body_dims: self.body_dims,
            finger_dims: self.finger_dims,
            finger_drop: (self.body_dims[2] + self.finger_dims[2]) / 2.0,
            open_gap: self.open_gap,
            closed_gap: self.closed_gap,
            palette: vec![
                (ID_TABLE, self.color_of(ID_TABLE)),
                (ID_BODY, self.color_of(ID_BODY)),
                (ID_LEFT_FINGER, self.color_of(ID_LEFT_FINGER)),
                (ID_RIGHT_FINGER, self.color_of(ID_RIGHT_FINGER)),
                (ID_OBJECT, self.color_of(ID_OBJECT)),
            ],
            body_id: ID_BODY,
            left_id: ID_LEFT_FINGER,
            right_id: ID_RIGHT_FINGER,
        }
    }
}

fn chroma(c: [f32; 3]) -> Option<[f32; 3]> {
    let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    if n < 0.05 {
        return None;
    }
    Some([c[0] / n, c[1] / n, c[2] / n])
}

/// Classifies each pixel by nearest palette chromaticity (shading-invariant)
/// within [`COLOR_TOLERANCE`]; returns body / left finger / right finger
/// masks. Empty masks are allowed.
pub fn segment_gripper(frame: &RgbImage, spec: &GripperSpec) -> (Mask, Mask, Mask) {
    let palette: Vec<(u8, [f32; 3])> = spec
        .palette
        .iter()
        .filter_map(|&(id, c)| chroma(c).map(|u| (id, u)))
        .collect();
    let mut body = Mask::empty(frame.width, frame.height);
    let mut left = Mask::empty(frame.width, frame.height);
    let mut right = Mask::empty(frame.width, frame.height);
    for idx in 0..frame.width * frame.height {
        let px = [
            frame.data[idx * 3],
            frame.data[idx * 3 + 1],
            frame.data[idx * 3 + 2],
        ];
        let Some(u) = chroma(px) else { continue };
        let mut best = (f32::INFINITY, 0u8);
        for &(id, ref pc) in &palette {
            let d2 = (u[0] - pc[0]).powi(2) + (u[1] - pc[1]).powi(2) + (u[2] - pc[2]).powi(2);
            if d2 < best.0 {
                best = (d2, id);
            }
        }
        if best.0.sqrt() > COLOR_TOLERANCE {
            continue;
        }
        if best.1 == spec.body_id {
            body.data[idx] = true;
        } else if best.1 == spec.left_id {
            left.data[idx] = true;
        } else if best.1 == spec.right_id {
            right.data[idx] = true;
        }
    }
    (body, left, right)
}

/// Valid 3D points of a pointmap under a mask.
pub fn masked_points(pm: &Pointmap, mask: &Mask) -> Vec<[f32; 3]> {
    let mut out = Vec::new();
    for idx in 0..mask.data.len() {
        if mask.data[idx] && pm.valid[idx] {
            out.push([
                pm.points[idx * 3],
                pm.points[idx * 3 + 1],
                pm.points[idx * 3 + 2],
            ]);
        }
    }
    out
}

// ---- small f64 linear algebra ---------------------------------------------------

type M3 = [[f64; 3]; 3];

fn m3_mul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn m3_det(a: &M3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Jacobi eigendecomposition of a symmetric matrix (n <= 4). Returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen<const N: usize>(mut a: [[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        // largest off-diagonal element
        let (mut p, mut q, mut max) = (0, 1, 0.0f64);
        for i in 0..N {
            for j in i + 1..N {
                if a[i][j].abs() > max {
                    max = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if max < 1e-14 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..N {
            let (akp, akq) = (a[k][p], a[k][q]);
            a[k][p] = c * akp - s * akq;
            a[k][q] = s * akp + c * akq;
        }
        for k in 0..N {
            let (apk, aqk) = (a[p][k], a[q][k]);
            a[p][k] = c * apk - s * aqk;
            a[q][k] = s * apk + c * aqk;
        }
        for k in 0..N {
            let (vkp, vkq) = (v[k][p], v[k][q]);
            v[k][p] = c * vkp - s * vkq;
            v[k][q] = s * vkp + c * vkq;
        }
    }
    let mut vals = [0.0; N];
    for i in 0..N {
        vals[i] = a[i][i];
    }
    (vals, v)
}

fn quat_to_mat(q: [f64; 4]) -> M3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Least-squares rigid alignment: returns (R, t) minimizing
/// sum || R q_i + t - p_i ||^2, via the quaternion eigen method (always a
/// proper rotation).
fn kabsch(model: &[[f64; 3]], data: &[[f64; 3]]) -> (M3, [f64; 3]) {
    let n = model.len() as f64;
    let mut qc = [0.0f64; 3];
    let mut pc = [0.0f64; 3];
    for (q, p) in model.iter().zip(data) {
        for a in 0..3 {
            qc[a] += q[a] / n;
            pc[a] += p[a] / n;
        }
    }
    let mut s = [[0.0f64; 3]; 3];
    for (q, p) in model.iter().zip(data) {
        for a in 0..3 {
            for b in 0..3 {
                s[a][b] += (q[a] - qc[a]) * (p[b] - pc[b]);
            }
        }
    }
    let tr = s[0][0] + s[1][1] + s[2][2];
    let m = [
        [tr, s[1][2] - s[2][1], s[2][0] - s[0][2], s[0][1] - s[1][0]],
        [
            s[1][2] - s[2][1],
            s[0][0] - s[1][1] - s[2][2],
            s[0][1] + s[1][0],
            s[2][0] + s[0][2],
        ],
        [
            s[2][0] - s[0][2],
            s[0][1] + s[1][0],
            -s[0][0] + s[1][1] - s[2][2],
            s[1][2] + s[2][1],
        ],
        [
            s[0][1] - s[1][0],
            s[2][0] + s[0][2],
            s[1][2] + s[2][1],
            -s[0][0] - s[1][1] + s[2][2],
        ],
    ];
    let (vals, vecs) = jacobi_eigen::<4>(m);
    let mut best = 0;
    for i in 1..4 {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    let q = [vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]];
    let r = quat_to_mat(q);
    let rt = [
        pc[0] - (r[0][0] * qc[0] + r[0][1] * qc[1] + r[0][2] * qc[2]),
        pc[1] - (r[1][0] * qc[0] + r[1][1] * qc[1] + r[1][2] * qc[2]),
        pc[2] - (r[2][0] * qc[0] + r[2][1] * qc[1] + r[2][2] * qc[2]),
    ];
    (r, rt)
}

/// Closest point on the surface of an axis-aligned box (body frame).
fn closest_on_box(p: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    let clamped = [
        p[0].clamp(-half[0], half[0]),
        p[1].clamp(-half[1], half[1]),
        p[2].clamp(-half[2], half[2]),
    ];
    if clamped != p {
        return clamped;
    }
    // inside: push out through the nearest face
    let mut axis = 0;
    let mut best = f64::INFINITY;
    for a in 0..3 {
        let gap = half[a] - p[a].abs();
        if gap < best {
            best = gap;
            axis = a;
        }
    }
    let mut q = p;
    q[axis] = half[axis] * if p[axis] >= 0.0 { 1.0 } else { -1.0 };
    q
}

fn surface_distance(p: [f64; 3], half: [f64; 3]) -> f64 {
    let q = closest_on_box(p, half);
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

struct PoseF64 {
    r: M3,
    t: [f64; 3],
}

impl PoseF64 {
    fn from_pose(p: &Pose) -> Self {
        let mut r = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = p.rotation()[i][j] as f64;
            }
        }
        let t = [
            p.translation_part()[0] as f64,
            p.translation_part()[1] as f64,
            p.translation_part()[2] as f64,
        ];
        PoseF64 { r, t }
    }

    fn to_pose(&self, from: FrameId, to: FrameId) -> Result<Pose> {
        let mut r: Mat3 = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.r[i][j] as f32;
            }
        }
        let t: Vec3 = [self.t[0] as f32, self.t[1] as f32, self.t[2] as f32];
        Pose::new(r, t, from, to)
    }

    fn inv_apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        [
            self.r[0][0] * d[0] + self.r[1][0] * d[1] + self.r[2][0] * d[2],
            self.r[0][1] * d[0] + self.r[1][1] * d[1] + self.r[2][1] * d[2],
            self.r[0][2] * d[0] + self.r[1][2] * d[1] + self.r[2][2] * d[2],
        ]
    }
}

/// Proper signed axis permutations (24 rotations of the cube).
fn cube_rotations() -> Vec<M3> {
    let mut out = Vec::with_capacity(24);
    let perms = [
        [0usize, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for perm in perms {
        for signs in 0..8u32 {
            let mut m = [[0.0f64; 3]; 3];
            for (col, &row) in perm.iter().enumerate() {
                m[row][col] = if signs & (1 << col) != 0 { -1.0 } else { 1.0 };
            }
            if (m3_det(&m) - 1.0).abs() < 1e-9 {
                out.push(m);
            }
        }
    }
    out
}

pub struct FitResult {
    pub pose: Pose,
    /// RMS distance of the points to the posed cuboid surface, meters.
    pub residual: f32,
}

fn rms_residual(points: &[[f64; 3]], pose: &PoseF64, half: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for &p in points {
        let local = pose.inv_apply(p);
        acc += surface_distance(local, half).powi(2);
    }
    (acc / points.len() as f64).sqrt()
}

fn icp_refine(points: &[[f64; 3]], init: PoseF64, half: [f64; 3]) -> PoseF64 {
    let mut pose = init;
    let mut prev_res = f64::INFINITY;
    for _ in 0..50 {
        let model: Vec<[f64; 3]> = points
            .iter()
            .map(|&p| closest_on_box(pose.inv_apply(p), half))
            .collect();
        let (r, t) = kabsch(&model, points);
        pose = PoseF64 { r, t };
        let res = rms_residual(points, &pose, half);
        if (prev_res - res).abs() < 1e-10 {
            break;
        }
        prev_res = res;
    }
    pose
}

/// Fits the body cuboid pose to segmented 3D points. The initialization
/// comes from the centroid and principal axes, with the 24-fold axis
/// assignment resolved by alignment with `prev`; point-to-surface ICP then
/// removes the visible-surface centroid bias. Fits from both the PCA
/// estimate and `prev` itself, keeping the lower-residual result. Returns
/// None when fewer than [`MIN_FIT_POINTS`] points are given.
pub fn fit_pose(points: &[[f32; 3]], spec: &GripperSpec, prev: &Pose) -> Option<FitResult> {
    if points.len() < MIN_FIT_POINTS {
        return None;
    }
    let pts: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let half = {
        let h = spec.body_half();
        [h[0] as f64, h[1] as f64, h[2] as f64]
    };
    let prev64 = PoseF64::from_pose(prev);

    // principal axes of the point set
    let n = pts.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &pts {
        for a in 0..3 {
            centroid[a] += p[a] / n;
        }
    }
    let mut cov = [[0.0f64; 3]; 3];
    for p in &pts {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (p[a] - centroid[a]) * (p[b] - centroid[b]) / n;
            }
        }
    }
    let (_, eig) = jacobi_eigen::<3>(cov);
    let mut e = eig;
    if m3_det(&e) < 0.0 {
        for row in &mut e {
            row[0] = -row[0];
        }
    }

    // choose among the 24 proper axis assignments the one closest to prev
    let mut best_r = prev64.r;
    let mut best_score = f64::NEG_INFINITY;
    for s in cube_rotations() {
        let cand = m3_mul(&e, &s);
        let mut score = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                score += prev64.r[i][j] * cand[i][j];
            }
        }
        if score > best_score {
            best_score = score;
            best_r = cand;
        }
    }

    let pca_init = PoseF64 {
        r: best_r,
        t: centroid,
    };
    let from_pca = icp_refine(&pts, pca_init, half);
    let from_prev = icp_refine(
        &pts,
        PoseF64 {
            r: prev64.r,
            t: prev64.t,
        },
        half,
    );
    let res_pca = rms_residual(&pts, &from_pca, half);
    let res_prev = rms_residual(&pts, &from_prev, half);
    let (pose, residual) = if res_prev <= res_pca {
        (from_prev, res_prev)
    } else {
        (from_pca, res_pca)
    };

    let pose = pose
        .to_pose(prev.from_frame().clone(), prev.to_frame().clone())
        .ok()?;
    Some(FitResult {
        pose,
        residual: residual as f32,
    })
}

fn centroid_of(points: &[[f32; 3]]) -> [f32; 3] {
    let n = points.len() as f32;
    let mut c = [0.0f32; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    c
}

/// Picks the tracked view with the smaller residual; ties go to view 0.
pub fn argmin_view(a: Option<f32>, b: Option<f32>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if x <= y { 0 } else { 1 }),
        (Some(_), None) => Some(0),
        (None, Some(_)) => Some(1),
        (None, None) => None,
    }
}

/// Closed when the finger centroids are closer than `delta`. None when
/// either finger point set is empty (caller carries the previous state).
pub fn gripper_state(left: &[[f32; 3]], right: &[[f32; 3]], delta: f32) -> Option<GripperState> {
    if left.is_empty() || right.is_empty() {
        return None;
    }
    let (l, r) = (centroid_of(left), centroid_of(right));
    let d = ((l[0] - r[0]).powi(2) + (l[1] - r[1]).powi(2) + (l[2] - r[2]).powi(2)).sqrt();
    Some(if d < delta {
        GripperState::Closed
    } else {
        GripperState::Open
    })
}

/// One frame of generated 4D video: RGB per view plus pointmaps per view,
/// both pointmaps expressed in the reference view's camera frame.
pub struct FourDFrame {
    pub rgb: [RgbImage; 2],
    pub pm: [Pointmap; 2],
}

pub struct FourDVideo {
    pub frames: Vec<FourDFrame>,
    /// The reference view's camera frame; every pointmap must carry it.
    pub frame_n: FrameId,
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub t: usize,
    /// Gripper pose in the reference view's camera frame.
    pub pose: Pose,
    /// Fit residual per view; None when that view was untracked.
    pub residuals: [Option<f32>; 2],
    /// Index of the view that supplied the pose.
    pub view: usize,
    pub state: GripperState,
    /// Negative residual of the chosen view.
    pub confidence: f32,
}

#[derive(Debug)]
pub struct TrajectoryEstimate {
    pub points: Vec<TrajectoryPoint>,
    pub delta: f32,
}

/// Runs segmentation + pose fitting per view per frame, picks the
/// lowest-residual view, and tracks the open/close state. The initial hint
/// anchors the fit at t = 0; tracking aborts when both views stay untracked
/// for more than [`MAX_UNTRACKED_RUN`] consecutive frames.
pub fn extract_trajectory(
    video: &FourDVideo,
    spec: &GripperSpec,
    hint: &Pose,
    delta: Option<f32>,
) -> Result<TrajectoryEstimate> {
    let delta = delta.unwrap_or_else(|| spec.default_delta());
    for frame in &video.frames {
        for pm in &frame.pm {
            if pm.frame != video.frame_n {
                return Err(Error::FrameMismatch {
                    expected: video.frame_n.0.clone(),
                    found: pm.frame.0.clone(),
                });
            }
        }
    }

    let mut prev_pose = hint.clone();
    let mut prev_state = GripperState::Open;
    let mut untracked_run = 0usize;
    let mut out = Vec::with_capacity(video.frames.len());

    for (t, frame) in video.frames.iter().enumerate() {
        let mut fits: [Option<FitResult>; 2] = [None, None];
        let mut fingers: [Option<(Vec<[f32; 3]>, Vec<[f32; 3]>)>; 2] = [None, None];
        for v in 0..2 {
            let (body, left, right) = segment_gripper(&frame.rgb[v], spec);
            let body_pts = masked_points(&frame.pm[v], &body);
            fits[v] = fit_pose(&body_pts, spec, &prev_pose);
            fingers[v] = Some((
                masked_points(&frame.pm[v], &left),
                masked_points(&frame.pm[v], &right),
            ));
        }

        let chosen = argmin_view(
            fits[0].as_ref().map(|f| f.residual),
            fits[1].as_ref().map(|f| f.residual),
        );

        let (pose, view, residuals, confidence) = match chosen {
            Some(v) => {
                untracked_run = 0;
                let fit = fits[v].as_ref().expect("chosen view has a fit");
                (
                    fit.pose.clone(),
                    v,
                    [
                        fits[0].as_ref().map(|f| f.residual),
                        fits[1].as_ref().map(|f| f.residual),
                    ],
                    -fit.residual,
                )
            }
            None => {
                untracked_run += 1;
                if untracked_run > MAX_UNTRACKED_RUN {
                    return Err(Error::TrackingLost {
                        frame: t,
                        limit: MAX_UNTRACKED_RUN,
                    });
                }
                // pose carried forward
                (prev_pose.clone(), 0, [None, None], f32::NEG_INFINITY)
            }
        };

        let state = chosen
            .and_then(|v| {
                let (l, r) = fingers[v].as_ref().expect("fingers gathered per view");
                gripper_state(l, r, delta)
            })
            .unwrap_or(prev_state);

        prev_pose = pose.clone();
        prev_state = state;
        out.push(TrajectoryPoint {
            t,
            pose,
            residuals,
            view,
            state,
            confidence,
        });
    }
    Ok(TrajectoryEstimate {
        points: out,
        delta,
    })
}
