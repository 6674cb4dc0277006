//! Oriented box geometry.
//!
//! Boxes are gravity aligned: the only rotation is `yaw` about +z, measured
//! counter-clockwise from +x. `l` runs along the heading, `w` across it.
//! Rotated BEV overlap is computed exactly by clipping one footprint against
//! the other (both are convex) and taking the shoelace area.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersections with area below this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

/// Tolerance used by the closed point-in-box containment test.
pub const CONTAINMENT_EPS: f64 = 1e-9;

/// An oriented 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Raw IoU estimate in `[0, 1]` attached by the decoder or a detector model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_pred: Option<f64>,
}

impl Box3D {
    /// Builds a validated box with its yaw normalized to `(-pi, pi]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        l: f64,
        w: f64,
        h: f64,
        yaw: f64,
        class_id: usize,
    ) -> Result<Self> {
        let b = Box3D {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw)?,
            class_id,
            score: None,
            iou_pred: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_iou_pred(mut self, iou: f64) -> Self {
        self.iou_pred = Some(iou);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("box has non-finite fields"));
        }
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(Error::invalid(format!(
                "box dims must be positive, got l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::invalid(format!("yaw {} outside (-pi, pi]", self.yaw)));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Maps a world point into the box frame (origin at center, +x along heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * q[0] - s * q[1],
            self.cy + s * q[0] + c * q[1],
            self.cz + q[2],
        ]
    }

    /// Closed containment: points on a face count as inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        contains_local(self.to_local(p), self.l, self.w, self.h)
    }
}

pub(crate) fn contains_local(q: [f64; 3], l: f64, w: f64, h: f64) -> bool {
    q[0].abs() <= 0.5 * l + CONTAINMENT_EPS
        && q[1].abs() <= 0.5 * w + CONTAINMENT_EPS
        && q[2].abs() <= 0.5 * h + CONTAINMENT_EPS
}

/// A convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2D {
    vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    /// Validates convexity and strict CCW winding.
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::invalid(format!("polygon needs >= 3 vertices, got {n}")));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if cross(sub(b, a), sub(c, b)) <= 0.0 {
                return Err(Error::invalid("polygon is not strictly convex and CCW"));
            }
        }
        Ok(Polygon2D { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn centroid(&self) -> [f64; 2] {
        // vertex mean is exact for the parallelograms this module produces
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), v| (sx + v[0], sy + v[1]));
        [sx / n, sy / n]
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Signed shoelace area (positive for CCW).
fn shoelace(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

/// The four BEV corners in CCW order, starting at front-left.
pub fn bev_corners(b: &Box3D) -> Polygon2D {
    let (s, c) = b.yaw.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let vertices = local
        .iter()
        .map(|&[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
        .collect();
    Polygon2D { vertices }
}

/// Clips `subject` against every edge of the convex `clip` polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % n];
        let edge = sub(e1, e0);
        let side = |p: [f64; 2]| cross(edge, sub(p, e0));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let sc = side(cur);
            let sp = side(prev);
            let cur_in = sc >= -AREA_EPS;
            let prev_in = sp >= -AREA_EPS;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let denom = sp - sq;
    if denom.abs() < AREA_EPS {
        return q;
    }
    let t = sp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the BEV footprint intersection of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // cheap rejection on circumscribed circles
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let pa = bev_corners(a);
    let pb = bev_corners(b);
    let area = shoelace(&clip_convex(&pa.vertices, &pb.vertices));
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// IoU of the rotated BEV footprints.
pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn z_overlap(a: &Box3D, b: &Box3D) -> f64 {
    (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0)
}

/// Full 3D IoU of two yaw-rotated boxes: BEV intersection times z overlap.
pub fn rotated_iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = z_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// How [`aligned_iou3d_with`] derives the axis-aligned box of a rotated box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignedIouMode {
    /// Axis-aligned hull of the rotated BEV corners.
    #[default]
    CornerHull,
    /// Pretend both boxes have yaw 0.
    IgnoreYaw,
}

fn aabb(b: &Box3D, mode: AlignedIouMode) -> [f64; 6] {
    match mode {
        AlignedIouMode::IgnoreYaw => [
            b.cx - 0.5 * b.l,
            b.cy - 0.5 * b.w,
            b.z_min(),
            b.cx + 0.5 * b.l,
            b.cy + 0.5 * b.w,
            b.z_max(),
        ],
        AlignedIouMode::CornerHull => {
            let (s, c) = b.yaw.sin_cos();
            let ex = 0.5 * (b.l * c.abs() + b.w * s.abs());
            let ey = 0.5 * (b.l * s.abs() + b.w * c.abs());
            [
                b.cx - ex,
                b.cy - ey,
                b.z_min(),
                b.cx + ex,
                b.cy + ey,
                b.z_max(),
            ]
        }
    }
}

/// Axis-aligned 3D IoU using the corner hull of each box.
pub fn aligned_iou3d(a: &Box3D, b: &Box3D) -> f64 {
    aligned_iou3d_with(a, b, AlignedIouMode::CornerHull)
}

pub fn aligned_iou3d_with(a: &Box3D, b: &Box3D, mode: AlignedIouMode) -> f64 {
    let ba = aabb(a, mode);
    let bb = aabb(b, mode);
    let mut inter = 1.0;
    for k in 0..3 {
        let d = ba[k + 3].min(bb[k + 3]) - ba[k].max(bb[k]);
        if d <= 0.0 {
            return 0.0;
        }
        inter *= d;
    }
    let vol = |x: &[f64; 6]| (x[3] - x[0]) * (x[4] - x[1]) * (x[5] - x[2]);
    (inter / (vol(&ba) + vol(&bb) - inter)).clamp(0.0, 1.0)
}

/// Wraps an angle into `(-pi, pi]`. Values already in range are returned unchanged,
/// so the map is idempotent.
pub fn normalize_yaw(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("non-finite angle {theta}")));
    }
    Ok(wrap_angle(theta))
}

/// Infallible variant of [`normalize_yaw`] for angles known to be finite.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Absolute heading difference wrapped into `[0, pi]`.
pub fn heading_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D::new(cx, cy, 0.0, l, w, 1.0, yaw, 0).unwrap()
    }

    #[test]
    fn unit_box_corners() {
        let p = bev_corners(&bx(0.0, 0.0, 1.0, 1.0, 0.0));
        assert_eq!(
            p.vertices(),
            &[[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]
        );
        assert!(Polygon2D::new(p.vertices().to_vec()).is_ok());
    }

    #[test]
    fn quarter_turn_corners() {
        let base = bev_corners(&bx(0.0, 0.0, 2.0, 1.0, 0.0));
        let rot = bev_corners(&bx(0.0, 0.0, 2.0, 1.0, FRAC_PI_2));
        for (a, b) in base.vertices().iter().zip(rot.vertices()) {
            assert_abs_diff_eq!(-a[1], b[0], epsilon = 1e-12);
            assert_abs_diff_eq!(a[0], b[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn explicit_rotation_corners() {
        // hand expansion of R(0.3) * (+-2, +-1) + (1, 2)
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let expect = [
            [1.0 + 2.0 * c - s, 2.0 + 2.0 * s + c],
            [1.0 - 2.0 * c - s, 2.0 - 2.0 * s + c],
            [1.0 - 2.0 * c + s, 2.0 - 2.0 * s - c],
            [1.0 + 2.0 * c + s, 2.0 + 2.0 * s - c],
        ];
        let p = bev_corners(&bx(1.0, 2.0, 4.0, 2.0, 0.3));
        for (a, b) in p.vertices().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-12);
        }
        let cen = p.centroid();
        assert_abs_diff_eq!(cen[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cen[1], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.area(), 8.0, epsilon = 1e-9);
    }

    #[test]
    fn polygon_rejects_cw_and_degenerate() {
        assert!(Polygon2D::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
        assert!(Polygon2D::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn bev_iou_basics() {
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.7);
        assert_abs_diff_eq!(rotated_bev_iou(&a, &a), 1.0, epsilon = 1e-12);
        let far = bx(100.0, 0.0, 5.0, 5.0, 0.0);
        assert_eq!(rotated_bev_iou(&a, &far), 0.0);
    }

    #[test]
    fn octagon_case() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, FRAC_PI_4);
        assert_abs_diff_eq!(bev_intersection_area(&a, &b), 2.0 * (SQRT_2 - 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(rotated_bev_iou(&a, &b), SQRT_2 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn touching_edges_are_empty() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(1.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn aligned_iou_cases() {
        let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0).unwrap();
        assert_abs_diff_eq!(aligned_iou3d(&a, &a), 1.0, epsilon = 1e-15);
        let b = Box3D { cx: 0.5, ..a };
        assert_abs_diff_eq!(aligned_iou3d(&a, &b), 1.0 / 3.0, epsilon = 1e-15);
        let c = Box3D { cz: 2.0, ..a };
        assert_eq!(aligned_iou3d(&a, &c), 0.0);
        assert_abs_diff_eq!(rotated_iou3d(&a, &b), aligned_iou3d(&a, &b), epsilon = 1e-12);
    }

    #[test]
    fn aligned_modes_differ_under_rotation() {
        let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 1.0, 1.0, 0.0, 0).unwrap();
        let b = Box3D { yaw: FRAC_PI_2, ..a };
        assert_abs_diff_eq!(
            aligned_iou3d_with(&a, &b, AlignedIouMode::IgnoreYaw),
            1.0,
            epsilon = 1e-15
        );
        // hulls are 4x1 and 1x4: intersection 1, union 7
        assert_abs_diff_eq!(aligned_iou3d(&a, &b), 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(normalize_yaw(3.0 * PI).unwrap(), PI, epsilon = 1e-12);
        assert_eq!(normalize_yaw(-PI).unwrap(), PI);
        assert_eq!(normalize_yaw(PI).unwrap(), PI);
        assert!(normalize_yaw(f64::NAN).is_err());
        assert!(normalize_yaw(f64::INFINITY).is_err());
        let x = normalize_yaw(-7.3).unwrap();
        assert_eq!(normalize_yaw(x).unwrap(), x);
    }

    #[test]
    fn heading_error_wraps() {
        assert_abs_diff_eq!(heading_error(PI - 0.01, -PI + 0.01), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(heading_error(0.0, PI), PI, epsilon = 1e-15);
    }

    #[test]
    fn box_validation() {
        assert!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0).is_err());
        assert!(Box3D::new(0.0, 0.0, f64::NAN, 1.0, 1.0, 1.0, 0.0, 0).is_err());
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0).unwrap().with_score(1.5);
        assert!(b.validate().is_err());
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D::new(3.0, -2.0, 1.0, 4.0, 2.0, 1.5, 2.1, 0).unwrap();
        let p = [4.1, -1.3, 1.6];
        let q = b.to_world(b.to_local(p));
        for k in 0..3 {
            assert_abs_diff_eq!(p[k], q[k], epsilon = 1e-12);
        }
        assert!(b.contains([3.0, -2.0, 1.75]));
        assert!(!b.contains([3.0, -2.0, 1.76]));
    }
}
