//! Evaluation metrics: depth accuracy (absolute relative error, threshold
//! accuracy), cross-view 3D consistency (bounding-box mIoU of reprojected
//! gripper masks), and RGB fidelity (PSNR plus temporal MSE). All functions
//! are pure.

use serde::{Deserialize, Serialize};

use crate::geometry::{reproject_mask, DepthMap, Intrinsics, Mask, Pointmap, Pose};
use crate::synthscene::RgbImage;
use crate::{Error, Result};

/// PSNR reported for bit-identical inputs instead of infinity.
pub const PSNR_CAP_DB: f32 = 99.0;

/// Mean |y - y_hat| / y over pixels valid on both sides; y_hat is the z
/// coordinate of the predicted pointmap, which must already live in the
/// evaluated view's own camera frame.
pub fn absrel(pred_pm: &Pointmap, gt_depth: &DepthMap) -> Result<f32> {
    depth_stats(pred_pm, gt_depth).map(|s| s.absrel)
}

/// Fraction of valid pixels with max(y_hat/y, y/y_hat) strictly below 1.25.
pub fn delta1(pred_pm: &Pointmap, gt_depth: &DepthMap) -> Result<f32> {
    depth_stats(pred_pm, gt_depth).map(|s| s.delta1)
}

pub struct DepthStats {
    pub absrel: f32,
    pub delta1: f32,
    pub pixels: usize,
}

pub fn depth_stats(pred_pm: &Pointmap, gt_depth: &DepthMap) -> Result<DepthStats> {
    if pred_pm.width != gt_depth.width || pred_pm.height != gt_depth.height {
        return Err(Error::ShapeMismatch {
            op: "depth_stats",
            lhs: vec![pred_pm.width, pred_pm.height],
            rhs: vec![gt_depth.width, gt_depth.height],
        });
    }
    let mut abs_sum = 0.0f64;
    let mut hits = 0usize;
    let mut count = 0usize;
    for idx in 0..gt_depth.values.len() {
        if !gt_depth.valid[idx] || !pred_pm.valid[idx] {
            continue;
        }
        let y = gt_depth.values[idx];
        let y_hat = pred_pm.points[idx * 3 + 2];
        count += 1;
        abs_sum += ((y - y_hat).abs() / y) as f64;
        let ratio = (y_hat / y).max(y / y_hat);
        if ratio < 1.25 {
            hits += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "no pixels valid in both prediction and ground truth".into(),
        ));
    }
    Ok(DepthStats {
        absrel: (abs_sum / count as f64) as f32,
        delta1: hits as f32 / count as f32,
        pixels: count,
    })
}

/// Intersection-over-union of the axis-aligned bounding boxes of two masks.
pub fn bbox_iou(a: &Mask, b: &Mask) -> Option<f32> {
    let (ai0, aj0, ai1, aj1) = a.bbox()?;
    let (bi0, bj0, bi1, bj1) = b.bbox()?;
    let iw = (ai1.min(bi1) + 1).saturating_sub(ai0.max(bi0)) as f32;
    let ih = (aj1.min(bj1) + 1).saturating_sub(aj0.max(bj0)) as f32;
    let inter = iw.max(0.0) * ih.max(0.0);
    let area_a = ((ai1 - ai0 + 1) * (aj1 - aj0 + 1)) as f32;
    let area_b = ((bi1 - bi0 + 1) * (bj1 - bj0 + 1)) as f32;
    Some(inter / (area_a + area_b - inter))
}

pub struct MiouResult {
    pub miou: f32,
    pub frames_used: usize,
    pub frames_skipped: usize,
    pub per_frame: Vec<f32>,
}

/// Cross-view consistency: per frame, lift view n's gripper mask through the
/// predicted pointmap, splat into view m, and compare bounding boxes against
/// view m's own mask. Frames with an empty mask on either side are skipped
/// and counted.
pub fn cross_view_miou(
    pred_pm_n: &[Pointmap],
    masks_n: &[Mask],
    masks_m: &[Mask],
    pose_n_to_m: &Pose,
    k_m: &Intrinsics,
) -> Result<MiouResult> {
    if pred_pm_n.len() != masks_n.len() || masks_n.len() != masks_m.len() {
        return Err(Error::InvalidArgument(format!(
            "frame count mismatch: {} pointmaps, {} masks_n, {} masks_m",
            pred_pm_n.len(),
            masks_n.len(),
            masks_m.len()
        )));
    }
    let mut per_frame = Vec::new();
    let mut skipped = 0usize;
    for ((pm, mask_n), mask_m) in pred_pm_n.iter().zip(masks_n).zip(masks_m) {
        if mask_n.count() == 0 || mask_m.count() == 0 {
            skipped += 1;
            continue;
        }
        let projected = reproject_mask(mask_n, pm, pose_n_to_m, k_m)?;
        match bbox_iou(&projected, mask_m) {
            Some(iou) => per_frame.push(iou),
            None => skipped += 1,
        }
    }
    // nothing usable means nothing aligned: a score of zero, not an error
    let miou = if per_frame.is_empty() {
        0.0
    } else {
        per_frame.iter().sum::<f32>() / per_frame.len() as f32
    };
    Ok(MiouResult {
        miou,
        frames_used: per_frame.len(),
        frames_skipped: skipped,
        per_frame,
    })
}

pub struct RgbFidelity {
    pub psnr: f32,
    pub temporal_mse: f32,
    pub per_frame_psnr: Vec<f32>,
}

/// Mean per-frame PSNR (peak 1.0, capped at [`PSNR_CAP_DB`]) plus the MSE of
/// frame-difference sequences, which ignores any constant offset.
pub fn rgb_fidelity(pred: &[RgbImage], gt: &[RgbImage]) -> Result<RgbFidelity> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "frame count mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_frame_psnr = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.width != g.width || p.height != g.height {
            return Err(Error::ShapeMismatch {
                op: "rgb_fidelity",
                lhs: vec![p.width, p.height],
                rhs: vec![g.width, g.height],
            });
        }
        let mse = mse_of(&p.data, &g.data);
        let psnr = if mse <= 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (1.0 / mse as f64).log10()).min(PSNR_CAP_DB as f64) as f32
        };
        per_frame_psnr.push(psnr);
    }

    let mut temporal = 0.0f64;
    let mut terms = 0usize;
    for t in 1..pred.len() {
        let n = pred[t].data.len();
        for i in 0..n {
            let dp = pred[t].data[i] - pred[t - 1].data[i];
            let dg = gt[t].data[i] - gt[t - 1].data[i];
            temporal += ((dp - dg) as f64).powi(2);
            terms += 1;
        }
    }
    let temporal_mse = if terms == 0 { 0.0 } else { (temporal / terms as f64) as f32 };

    Ok(RgbFidelity {
        psnr: per_frame_psnr.iter().sum::<f32>() / per_frame_psnr.len() as f32,
        temporal_mse,
        per_frame_psnr,
    })
}

fn mse_of(a: &[f32], b: &[f32]) -> f32 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    (sum / a.len() as f64) as f32
}

/// Per-view metric block of a report, keyed like the headline results table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMetrics {
    #[serde(rename = "AbsRel")]
    pub absrel: f32,
    #[serde(rename = "δ1")]
    pub delta1: f32,
    pub psnr: f32,
    pub temporal_mse: f32,
    pub per_frame_psnr: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionalMiou {
    pub miou: f32,
    pub frames_used: usize,
    pub frames_skipped: usize,
    pub per_frame: Vec<f32>,
}

impl From<MiouResult> for DirectionalMiou {
    fn from(r: MiouResult) -> Self {
        DirectionalMiou {
            miou: r.miou,
            frames_used: r.frames_used,
            frames_skipped: r.frames_skipped,
            per_frame: r.per_frame,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean of the two reprojection directions below.
    #[serde(rename = "mIoU")]
    pub miou: f32,
    #[serde(rename = "AbsRel-n")]
    pub absrel_n: f32,
    #[serde(rename = "AbsRel-m")]
    pub absrel_m: f32,
    #[serde(rename = "δ1-n")]
    pub delta1_n: f32,
    #[serde(rename = "δ1-m")]
    pub delta1_m: f32,
    /// A learned video-distribution distance is out of scope here; the
    /// substitute fidelity numbers live in the per-view blocks.
    pub fvd: Option<f32>,
    pub fvd_substitute: String,
    pub view_n: ViewMetrics,
    pub view_m: ViewMetrics,
    /// View n's mask lifted through the native-branch pointmap, splatted
    /// into view m.
    #[serde(rename = "mIoU-nm")]
    pub miou_nm: DirectionalMiou,
    /// View m's mask lifted through the cross-view branch pointmap (already
    /// in view n's frame), splatted into view n.
    #[serde(rename = "mIoU-mn")]
    pub miou_mn: DirectionalMiou,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameId;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pm_from_depth(values: &[f32], w: usize, h: usize) -> Pointmap {
        let mut points = vec![0.0f32; w * h * 3];
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

    fn depth(values: Vec<f32>, w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, values, vec![true; w * h]).unwrap()
    }

    #[test]
    fn absrel_exact_and_quarter_off() {
        let gt = depth(vec![2.0; 16], 4, 4);
        assert_eq!(absrel(&pm_from_depth(&[2.0; 16], 4, 4), &gt).unwrap(), 0.0);
        let pred = pm_from_depth(&[2.5; 16], 4, 4);
        let v = absrel(&pred, &gt).unwrap();
        assert!((v - 0.25).abs() < 1e-6);
    }

    #[test]
    fn absrel_matches_scalar_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt_vals: Vec<f32> = (0..64).map(|_| rng.gen_range(0.5..3.0)).collect();
        let pred_vals: Vec<f32> = gt_vals
            .iter()
            .map(|&v| v * rng.gen_range(0.7..1.4))
            .collect();
        let got = absrel(&pm_from_depth(&pred_vals, 8, 8), &depth(gt_vals.clone(), 8, 8)).unwrap();
        let mut expected = 0.0f64;
        for (y, yh) in gt_vals.iter().zip(&pred_vals) {
            expected += ((y - yh).abs() / y) as f64;
        }
        expected /= 64.0;
        assert!((got as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn delta1_boundary_is_strict() {
        let gt = depth(vec![1.0; 4], 2, 2);
        assert_eq!(delta1(&pm_from_depth(&[1.0; 4], 2, 2), &gt).unwrap(), 1.0);
        // exactly at the 1.25 ratio: excluded by the strict inequality
        assert_eq!(delta1(&pm_from_depth(&[1.25; 4], 2, 2), &gt).unwrap(), 0.0);
        let half = pm_from_depth(&[1.1, 1.1, 1.3, 1.3], 2, 2);
        assert_eq!(delta1(&half, &gt).unwrap(), 0.5);
    }

    #[test]
    fn depth_metrics_are_scale_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt_vals: Vec<f32> = (0..36).map(|_| rng.gen_range(0.5..2.0)).collect();
        let pred_vals: Vec<f32> = gt_vals
            .iter()
            .map(|&v| v * rng.gen_range(0.8..1.3))
            .collect();
        let a = depth_stats(&pm_from_depth(&pred_vals, 6, 6), &depth(gt_vals.clone(), 6, 6))
            .unwrap();
        let scaled_gt: Vec<f32> = gt_vals.iter().map(|v| v * 3.0).collect();
        let scaled_pred: Vec<f32> = pred_vals.iter().map(|v| v * 3.0).collect();
        let b = depth_stats(
            &pm_from_depth(&scaled_pred, 6, 6),
            &depth(scaled_gt, 6, 6),
        )
        .unwrap();
        assert!((a.absrel - b.absrel).abs() < 1e-6);
        assert_eq!(a.delta1, b.delta1);
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let gt = DepthMap::new(2, 2, vec![1.0; 4], vec![false; 4]).unwrap();
        assert!(absrel(&pm_from_depth(&[1.0; 4], 2, 2), &gt).is_err());
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let mut mask = Mask::empty(8, 8);
        for idx in [9, 10, 17, 18] {
            mask.data[idx] = true;
        }
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let depth_vals = vec![1.0f32; 64];
        let pm = crate::geometry::lift_depth(
            &depth(depth_vals, 8, 8),
            &k,
            FrameId::new("cam"),
        )
        .unwrap();
        let identity = Pose::identity(FrameId::new("cam"));
        let r = cross_view_miou(
            &[pm.clone()],
            &[mask.clone()],
            &[mask.clone()],
            &identity,
            &k,
        )
        .unwrap();
        assert_eq!(r.miou, 1.0);

        // disjoint bounding boxes
        let mut far = Mask::empty(8, 8);
        far.data[63] = true;
        let r = cross_view_miou(&[pm], &[mask.clone()], &[far], &identity, &k).unwrap();
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn miou_skips_empty_frames() {
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let pm = crate::geometry::lift_depth(
            &depth(vec![1.0; 64], 8, 8),
            &k,
            FrameId::new("cam"),
        )
        .unwrap();
        let mut mask = Mask::empty(8, 8);
        mask.data[9] = true;
        let empty = Mask::empty(8, 8);
        let identity = Pose::identity(FrameId::new("cam"));
        let r = cross_view_miou(
            &[pm.clone(), pm.clone()],
            &[mask.clone(), mask.clone()],
            &[mask.clone(), empty.clone()],
            &identity,
            &k,
        )
        .unwrap();
        assert_eq!((r.frames_used, r.frames_skipped), (1, 1));
        let none = cross_view_miou(&[pm], &[empty.clone()], &[empty], &identity, &k).unwrap();
        assert_eq!((none.miou, none.frames_used), (0.0, 0));
    }

    #[test]
    fn rgb_fidelity_identities() {
        let frame = |fill: f32| RgbImage {
            width: 4,
            height: 4,
            data: vec![fill; 48],
        };
        let seq: Vec<RgbImage> = (0..3).map(|t| frame(t as f32 * 0.1)).collect();
        let same = rgb_fidelity(&seq, &seq).unwrap();
        assert_eq!(same.psnr, PSNR_CAP_DB);
        assert_eq!(same.temporal_mse, 0.0);

        // constant offset cancels in the temporal term
        let offset: Vec<RgbImage> = seq
            .iter()
            .map(|f| RgbImage {
                width: 4,
                height: 4,
                data: f.data.iter().map(|v| v + 0.1).collect(),
            })
            .collect();
        let off = rgb_fidelity(&offset, &seq).unwrap();
        // the offset cancels up to f32 rounding of the additions
        assert!(off.temporal_mse < 1e-12, "{}", off.temporal_mse);
        assert!(off.psnr < PSNR_CAP_DB);
    }

    #[test]
    fn rgb_fidelity_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| RgbImage {
            width: 3,
            height: 2,
            data: (0..18).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let pred = vec![mk(&mut rng), mk(&mut rng)];
        let gt = vec![mk(&mut rng), mk(&mut rng)];
        let got = rgb_fidelity(&pred, &gt).unwrap();

        let mut psnr_ref = 0.0f64;
        for t in 0..2 {
            let mut mse = 0.0f64;
            for i in 0..18 {
                mse += ((pred[t].data[i] - gt[t].data[i]) as f64).powi(2);
            }
            mse /= 18.0;
            psnr_ref += 10.0 * (1.0 / mse).log10();
        }
        psnr_ref /= 2.0;
        assert!((got.psnr as f64 - psnr_ref).abs() < 1e-4);

        let mut tmse = 0.0f64;
        for i in 0..18 {
            let dp = pred[1].data[i] - pred[0].data[i];
            let dg = gt[1].data[i] - gt[0].data[i];
            tmse += ((dp - dg) as f64).powi(2);
        }
        tmse /= 18.0;
        assert!((got.temporal_mse as f64 - tmse).abs() < 1e-7);
    }

    #[test]
    fn metrics_are_pure() {
        let gt = depth(vec![1.5; 16], 4, 4);
        let pm = pm_from_depth(&[1.4; 16], 4, 4);
        assert_eq!(absrel(&pm, &gt).unwrap(), absrel(&pm, &gt).unwrap());
    }
}
