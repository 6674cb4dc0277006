//! Test-time augmentation transforms and fusion of detections from several passes.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::decode::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{heading_error, rotated_bev_iou, wrap_angle, Box3D};
use crate::pointcloud::Point;

pub const DEFAULT_FUSE_IOU: f64 = 0.55;

/// `p' = R(yaw_rot) * (scale * p) + (0, 0, z_shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaTransform {
    pub yaw_rot: f64,
    pub scale: f64,
    pub z_shift: f64,
}

impl Default for TtaTransform {
    fn default() -> Self {
        TtaTransform::IDENTITY
    }
}

impl TtaTransform {
    pub const IDENTITY: TtaTransform = TtaTransform {
        yaw_rot: 0.0,
        scale: 1.0,
        z_shift: 0.0,
    };

    pub fn new(yaw_rot: f64, scale: f64, z_shift: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && yaw_rot.is_finite() && z_shift.is_finite()) {
            return Err(Error::invalid(format!(
                "invalid transform yaw={yaw_rot} scale={scale} z={z_shift}"
            )));
        }
        Ok(TtaTransform {
            yaw_rot,
            scale,
            z_shift,
        })
    }

    /// The transform undoing this one. Rotation about z leaves the z shift unrotated,
    /// so the inverse has the same form.
    pub fn inverse(&self) -> TtaTransform {
        TtaTransform {
            yaw_rot: -self.yaw_rot,
            scale: 1.0 / self.scale,
            z_shift: -self.z_shift / self.scale,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw_rot.sin_cos();
        let (x, y, z) = (p[0] * self.scale, p[1] * self.scale, p[2] * self.scale);
        [c * x - s * y, s * x + c * y, z + self.z_shift]
    }

    /// Exact algebraic inverse of [`apply`](Self::apply).
    pub fn unapply(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw_rot.sin_cos();
        let (x, y) = (c * q[0] + s * q[1], -s * q[0] + c * q[1]);
        [x / self.scale, y / self.scale, (q[2] - self.z_shift) / self.scale]
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let [cx, cy, cz] = self.apply([b.cx, b.cy, b.cz]);
        Box3D {
            cx,
            cy,
            cz,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: wrap_angle(b.yaw + self.yaw_rot),
            ..*b
        }
    }

    pub fn unapply_box(&self, b: &Box3D) -> Box3D {
        let [cx, cy, cz] = self.unapply([b.cx, b.cy, b.cz]);
        Box3D {
            cx,
            cy,
            cz,
            l: b.l / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
            yaw: wrap_angle(b.yaw - self.yaw_rot),
            ..*b
        }
    }
}

pub fn transform_points(cloud: &[Point], t: &TtaTransform) -> Vec<Point> {
    cloud.iter().map(|p| p.with_xyz(t.apply(p.xyz()))).collect()
}

pub fn transform_boxes(dets: &DetectionSet, t: &TtaTransform) -> DetectionSet {
    DetectionSet::new(dets.frame_id, dets.boxes.iter().map(|b| t.apply_box(b)).collect())
}

/// Maps detections made on transformed input back to the original frame.
pub fn inverse_transform_boxes(dets: &DetectionSet, t: &TtaTransform) -> DetectionSet {
    DetectionSet::new(dets.frame_id, dets.boxes.iter().map(|b| t.unapply_box(b)).collect())
}

/// Cartesian grid of TTA settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaGrid {
    pub yaw_deg: Vec<f64>,
    pub scales: Vec<f64>,
    pub z_shifts: Vec<f64>,
}

impl TtaGrid {
    /// Yaw, global scaling and z translation values of the published ensemble.
    pub fn published() -> Self {
        TtaGrid {
            yaw_deg: vec![0.0, 22.5, -22.5, 45.0, -45.0, 135.0, -135.0, 157.5, -157.5, 180.0],
            scales: vec![0.95, 1.0, 1.05],
            z_shifts: vec![-0.2, 0.0, 0.2],
        }
    }

    pub fn transforms(&self) -> Result<Vec<TtaTransform>> {
        let mut out = Vec::with_capacity(self.yaw_deg.len() * self.scales.len() * self.z_shifts.len());
        for &yaw in &self.yaw_deg {
            for &s in &self.scales {
                for &z in &self.z_shifts {
                    out.push(TtaTransform::new(yaw.to_radians(), s, z)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Score-weighted box average; fused score is the member mean scaled by
    /// `min(1, members / passes)`.
    #[default]
    ScoreWeighted,
    /// Plain mean of boxes and scores.
    Unweighted,
}

struct Cluster {
    members: Vec<Box3D>,
    fused: Box3D,
}

fn fuse_cluster(members: &[Box3D], num_sets: usize, mode: FusionMode) -> Box3D {
    let seed = members[0];
    let mean_score = members.iter().map(|b| b.score_or_zero()).sum::<f64>() / members.len() as f64;
    let score = match mode {
        FusionMode::ScoreWeighted => mean_score * (members.len() as f64 / num_sets as f64).min(1.0),
        FusionMode::Unweighted => mean_score,
    };
    if members.len() == 1 {
        return Box3D {
            score: Some(score),
            ..seed
        };
    }
    let mut weights: Vec<f64> = match mode {
        FusionMode::ScoreWeighted => members.iter().map(|b| b.score_or_zero()).collect(),
        FusionMode::Unweighted => vec![1.0; members.len()],
    };
    let mut total: f64 = weights.iter().sum();
    if total <= 0.0 {
        weights.iter_mut().for_each(|w| *w = 1.0);
        total = members.len() as f64;
    }
    let wmean = |f: &dyn Fn(&Box3D) -> f64| {
        members.iter().zip(&weights).map(|(b, w)| w * f(b)).sum::<f64>() / total
    };
    let (mut ss, mut cc) = (0.0, 0.0);
    for (b, w) in members.iter().zip(&weights) {
        // undo front/back swaps relative to the seed before averaging headings
        let yaw = if heading_error(b.yaw, seed.yaw) > FRAC_PI_2 {
            b.yaw + PI
        } else {
            b.yaw
        };
        ss += w * yaw.sin();
        cc += w * yaw.cos();
    }
    let yaw = if ss.hypot(cc) > 1e-12 {
        wrap_angle(ss.atan2(cc))
    } else {
        seed.yaw
    };
    let iou_pred = if members.iter().all(|b| b.iou_pred.is_some()) {
        Some(wmean(&|b| b.iou_pred.unwrap_or(0.0)))
    } else {
        seed.iou_pred
    };
    Box3D {
        cx: wmean(&|b| b.cx),
        cy: wmean(&|b| b.cy),
        cz: wmean(&|b| b.cz),
        l: wmean(&|b| b.l),
        w: wmean(&|b| b.w),
        h: wmean(&|b| b.h),
        yaw,
        class_id: seed.class_id,
        score: Some(score),
        iou_pred,
    }
}

fn by_score_desc(a: &Box3D, b: &Box3D) -> std::cmp::Ordering {
    b.score_or_zero().total_cmp(&a.score_or_zero())
}

/// Fuses detections of one frame coming from `sets.len()` passes.
///
/// Boxes are clustered greedily in descending score order: a box joins the first
/// same-class cluster whose seed it overlaps with BEV IoU `>= fuse_iou`. Clusters
/// whose fused boxes still overlap that much are merged until none do, so fusing
/// the output again changes nothing.
pub fn fuse_detections(sets: &[DetectionSet], fuse_iou: f64, mode: FusionMode) -> Result<DetectionSet> {
    if !(0.0..=1.0).contains(&fuse_iou) {
        return Err(Error::invalid(format!("fuse_iou {fuse_iou} outside [0, 1]")));
    }
    let Some(first) = sets.first() else {
        return Ok(DetectionSet::default());
    };
    if let Some(other) = sets.iter().find(|s| s.frame_id != first.frame_id) {
        return Err(Error::invalid(format!(
            "cannot fuse frames {} and {}",
            first.frame_id, other.frame_id
        )));
    }
    let num_sets = sets.len();
    let mut all: Vec<Box3D> = sets.iter().flat_map(|s| s.boxes.iter().copied()).collect();
    all.sort_by(by_score_desc);

    let mut clusters: Vec<Cluster> = Vec::new();
    for b in all {
        let home = clusters
            .iter_mut()
            .find(|c| c.members[0].class_id == b.class_id && rotated_bev_iou(&c.members[0], &b) >= fuse_iou);
        match home {
            Some(c) => c.members.push(b),
            None => clusters.push(Cluster {
                members: vec![b],
                fused: b,
            }),
        }
    }
    for c in &mut clusters {
        c.fused = fuse_cluster(&c.members, num_sets, mode);
    }

    loop {
        clusters.sort_by(|a, b| by_score_desc(&a.fused, &b.fused));
        let pair = (0..clusters.len()).find_map(|i| {
            (i + 1..clusters.len())
                .find(|&j| {
                    clusters[i].fused.class_id == clusters[j].fused.class_id
                        && rotated_bev_iou(&clusters[i].fused, &clusters[j].fused) >= fuse_iou
                })
                .map(|j| (i, j))
        });
        let Some((i, j)) = pair else { break };
        let absorbed = clusters.remove(j);
        let target = &mut clusters[i];
        target.members.extend(absorbed.members);
        target.members.sort_by(by_score_desc);
        target.fused = fuse_cluster(&target.members, num_sets, mode);
    }

    let mut out = DetectionSet::new(first.frame_id, clusters.into_iter().map(|c| c.fused).collect());
    out.sort_by_score();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn det(cx: f64, yaw: f64, score: f64) -> Box3D {
        Box3D::new(cx, 1.0, 0.5, 4.0, 2.0, 1.5, yaw, 0).unwrap().with_score(score)
    }

    #[test]
    fn identity_transform() {
        let pts = vec![Point::new(1.0, 2.0, 3.0, 0.5)];
        assert_eq!(transform_points(&pts, &TtaTransform::IDENTITY), pts);
        let d = DetectionSet::new(0, vec![det(1.0, 0.3, 0.5)]);
        assert_eq!(inverse_transform_boxes(&d, &TtaTransform::IDENTITY), d);
    }

    #[test]
    fn yaw_pi_flips_x() {
        let t = TtaTransform::new(PI, 1.0, 0.0).unwrap();
        let q = t.apply([1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(q[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn scale_then_shift() {
        let t = TtaTransform::new(0.0, 1.05, 0.2).unwrap();
        let q = t.apply([2.0, 0.0, 1.0]);
        assert_abs_diff_eq!(q[0], 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(q[2], 1.25, epsilon = 1e-12);
        let r = TtaTransform::new(FRAC_PI_2, 1.05, 0.2).unwrap().apply([2.0, 0.0, 1.0]);
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r[2], 1.25, epsilon = 1e-12);
    }

    #[test]
    fn inverse_restores_yaw() {
        let t = TtaTransform::new(FRAC_PI_2, 1.0, 0.0).unwrap();
        let seen = DetectionSet::new(0, vec![det(0.0, FRAC_PI_2, 0.5)]);
        let back = inverse_transform_boxes(&seen, &t);
        assert_abs_diff_eq!(back.boxes[0].yaw, 0.0, epsilon = 1e-15);
        let via_inverse = t.inverse().apply([0.3, -1.2, 2.0]);
        let via_unapply = t.unapply([0.3, -1.2, 2.0]);
        for k in 0..3 {
            assert_abs_diff_eq!(via_inverse[k], via_unapply[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_scale_rejected() {
        assert!(TtaTransform::new(0.0, 0.0, 0.0).is_err());
        assert!(TtaTransform::new(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn published_grid_size() {
        assert_eq!(TtaGrid::published().transforms().unwrap().len(), 90);
    }

    #[test]
    fn single_set_unchanged() {
        let d = DetectionSet::new(4, vec![det(0.0, 0.1, 0.9), det(20.0, 0.2, 0.7)]);
        let f = fuse_detections(&[d.clone()], 0.55, FusionMode::default()).unwrap();
        assert_eq!(f, d);
    }

    #[test]
    fn identical_pair_from_two_sets() {
        let a = DetectionSet::new(0, vec![det(0.0, 0.1, 0.8)]);
        let f = fuse_detections(&[a.clone(), a], 0.55, FusionMode::default()).unwrap();
        assert_eq!(f.len(), 1);
        assert_abs_diff_eq!(f.boxes[0].score.unwrap(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(f.boxes[0].cx, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lone_box_penalized_by_count() {
        let a = DetectionSet::new(0, vec![det(0.0, 0.1, 0.8)]);
        let b = DetectionSet::new(0, vec![]);
        let f = fuse_detections(&[a.clone(), b.clone()], 0.55, FusionMode::default()).unwrap();
        assert_abs_diff_eq!(f.boxes[0].score.unwrap(), 0.4, epsilon = 1e-15);
        let u = fuse_detections(&[a, b], 0.55, FusionMode::Unweighted).unwrap();
        assert_abs_diff_eq!(u.boxes[0].score.unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn circular_mean_across_the_seam() {
        let a = DetectionSet::new(0, vec![det(0.0, 179f64.to_radians(), 0.6)]);
        let b = DetectionSet::new(0, vec![det(0.0, -179f64.to_radians(), 0.6)]);
        let f = fuse_detections(&[a, b], 0.55, FusionMode::default()).unwrap();
        assert_eq!(f.len(), 1);
        assert_abs_diff_eq!(heading_error(f.boxes[0].yaw, PI), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn front_back_swap_resolved_toward_seed() {
        let a = DetectionSet::new(0, vec![det(0.0, 0.1, 0.9)]);
        let b = DetectionSet::new(0, vec![det(0.0, 0.1 + PI, 0.3)]);
        let f = fuse_detections(&[a, b], 0.55, FusionMode::default()).unwrap();
        assert_abs_diff_eq!(f.boxes[0].yaw, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn classes_do_not_fuse() {
        let a = DetectionSet::new(0, vec![det(0.0, 0.0, 0.9)]);
        let mut other = det(0.0, 0.0, 0.8);
        other.class_id = 1;
        let b = DetectionSet::new(0, vec![other]);
        assert_eq!(fuse_detections(&[a, b], 0.55, FusionMode::default()).unwrap().len(), 2);
    }

    #[test]
    fn empty_and_mismatched_input() {
        assert!(fuse_detections(&[], 0.55, FusionMode::default()).unwrap().is_empty());
        let a = DetectionSet::new(0, vec![]);
        let b = DetectionSet::new(1, vec![]);
        assert!(fuse_detections(&[a, b], 0.55, FusionMode::default()).is_err());
    }

    #[test]
    fn chained_overlaps_reach_fixed_point() {
        // seeds 0 and 2 do not overlap enough, but the fused box pulls toward the middle
        let boxes = vec![det(0.0, 0.0, 0.9), det(1.3, 0.0, 0.85), det(2.1, 0.0, 0.8)];
        let d = DetectionSet::new(0, boxes);
        let once = fuse_detections(&[d], 0.5, FusionMode::default()).unwrap();
        let twice = fuse_detections(&[once.clone()], 0.5, FusionMode::default()).unwrap();
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.boxes.iter().zip(&twice.boxes) {
            assert_abs_diff_eq!(a.cx, b.cx, epsilon = 1e-9);
            assert_abs_diff_eq!(a.score.unwrap(), b.score.unwrap(), epsilon = 1e-9);
        }
    }
}
