//! Head outputs to scored boxes: peak extraction, box assembly, IoU-aware
//! rescoring and class-specific rotated NMS.

use serde::{Deserialize, Serialize};

use crate::encode::{iou_from_target, TargetMaps};
use crate::error::{Error, Result};
use crate::geometry::{rotated_bev_iou, wrap_angle, Box3D};
use crate::grid::{grid_to_world, GridConfig};

pub const DEFAULT_TOP_K: usize = 500;

/// Dense per-pixel outputs of the detection head.
///
/// Multi-channel maps are channel-major: channel `c` of pixel `i` lives at `c * hw + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub heatmap: Vec<f64>,
    pub offset: Vec<f64>,
    pub z: Vec<f64>,
    pub size: Vec<f64>,
    /// Channel 0 is `sin(yaw)`, channel 1 is `cos(yaw)`.
    pub rot: Vec<f64>,
    /// Raw IoU-branch output in target space.
    pub iou: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelOutputs {
    pub offset: [f64; 2],
    pub z: f64,
    pub size: [f64; 3],
    pub rot: [f64; 2],
    pub iou: f64,
}

impl PixelOutputs {
    fn is_finite(&self) -> bool {
        self.offset
            .iter()
            .chain(&self.size)
            .chain(&self.rot)
            .chain([&self.z, &self.iou])
            .all(|v| v.is_finite())
    }
}

impl HeadOutput {
    pub fn zeros(num_classes: usize, height: usize, width: usize) -> Self {
        let hw = height * width;
        HeadOutput {
            num_classes,
            height,
            width,
            heatmap: vec![0.0; num_classes * hw],
            offset: vec![0.0; 2 * hw],
            z: vec![0.0; hw],
            size: vec![0.0; 3 * hw],
            rot: vec![0.0; 2 * hw],
            iou: vec![0.0; hw],
        }
    }

    /// The head output a perfect network would produce for these targets: the target
    /// heatmap, with each object's regression targets written at its center pixel.
    pub fn from_targets(t: &TargetMaps) -> Self {
        let mut out = HeadOutput::zeros(t.num_classes, t.height, t.width);
        out.heatmap.copy_from_slice(&t.heatmap);
        let hw = t.height * t.width;
        for slot in (0..t.capacity).filter(|&s| t.mask[s]) {
            let i = t.indices[slot];
            out.offset[i] = t.offset[slot][0];
            out.offset[hw + i] = t.offset[slot][1];
            out.z[i] = t.z[slot];
            for c in 0..3 {
                out.size[c * hw + i] = t.size[slot][c];
            }
            out.rot[i] = t.orientation[slot][0];
            out.rot[hw + i] = t.orientation[slot][1];
            out.iou[i] = t.iou_target[slot];
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        let lens = [
            (self.heatmap.len(), self.num_classes * hw),
            (self.offset.len(), 2 * hw),
            (self.z.len(), hw),
            (self.size.len(), 3 * hw),
            (self.rot.len(), 2 * hw),
            (self.iou.len(), hw),
        ];
        for (actual, expected) in lens {
            if actual != expected {
                return Err(Error::ShapeMismatch { expected, actual });
            }
        }
        Ok(())
    }

    pub fn pixel(&self, i: usize) -> PixelOutputs {
        let hw = self.height * self.width;
        PixelOutputs {
            offset: [self.offset[i], self.offset[hw + i]],
            z: self.z[i],
            size: [self.size[i], self.size[hw + i], self.size[2 * hw + i]],
            rot: [self.rot[i], self.rot[hw + i]],
            iou: self.iou[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// The `k` largest heatmap values over all classes, descending, ties broken by
/// `(class, row, col)` ascending. No local-maximum filtering; duplicates are left
/// for NMS. Non-finite values are skipped.
pub fn topk_peaks(heatmap: &[f64], num_classes: usize, height: usize, width: usize, k: usize) -> Vec<Peak> {
    let hw = height * width;
    debug_assert_eq!(heatmap.len(), num_classes * hw);
    // flat index order is exactly (class, row, col) order
    let mut cand: Vec<usize> = (0..heatmap.len()).filter(|&i| heatmap[i].is_finite()).collect();
    let cmp = |a: &usize, b: &usize| heatmap[*b].total_cmp(&heatmap[*a]).then(a.cmp(b));
    if k < cand.len() {
        if k == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter()
        .map(|i| Peak {
            class_id: i / hw,
            row: (i % hw) / width,
            col: i % width,
            score: heatmap[i],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_id: u64,
    pub boxes: Vec<Box3D>,
}

impl DetectionSet {
    pub fn new(frame_id: u64, boxes: Vec<Box3D>) -> Self {
        DetectionSet { frame_id, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Stable sort by descending score; equal scores keep their current order.
    pub fn sort_by_score(&mut self) {
        self.boxes
            .sort_by(|a, b| b.score_or_zero().total_cmp(&a.score_or_zero()));
    }
}

/// Turns peaks into boxes by reading the regression maps at each peak pixel.
pub fn assemble_boxes(
    peaks: &[Peak],
    head: &HeadOutput,
    cfg: &GridConfig,
    stride: usize,
    frame_id: u64,
) -> Result<DetectionSet> {
    head.validate()?;
    let s = stride as f64;
    let mut boxes = Vec::with_capacity(peaks.len());
    for p in peaks {
        let px = head.pixel(p.row * head.width + p.col);
        if !px.is_finite() || !p.score.is_finite() {
            continue;
        }
        let [l, w, h] = px.size;
        if !(l > 0.0 && w > 0.0 && h > 0.0) {
            continue;
        }
        let world = grid_to_world(
            [(p.col as f64 + px.offset[0]) * s, (p.row as f64 + px.offset[1]) * s, 0.0],
            cfg,
        );
        let yaw = wrap_angle(px.rot[0].atan2(px.rot[1]));
        boxes.push(Box3D {
            cx: world[0],
            cy: world[1],
            cz: px.z,
            l,
            w,
            h,
            yaw,
            class_id: p.class_id,
            score: Some(p.score.clamp(0.0, 1.0)),
            iou_pred: Some(iou_from_target(px.iou)),
        });
    }
    let mut out = DetectionSet::new(frame_id, boxes);
    out.sort_by_score();
    Ok(out)
}

/// Whether NMS ranks boxes by the rescored or the raw classification score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostProcessOrder {
    #[default]
    RescoreThenNms,
    NmsThenRescore,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreParams {
    /// Per-class weight of the predicted IoU in the fused score.
    pub alpha: Vec<f64>,
    /// Per-class rotated BEV IoU above which NMS suppresses.
    pub nms_iou: Vec<f64>,
    #[serde(default = "default_top_k")]
    pub pre_nms_top_k: usize,
    #[serde(default)]
    pub score_floor: f64,
    #[serde(default)]
    pub order: PostProcessOrder,
}

impl RescoreParams {
    /// VEHICLE, PEDESTRIAN, CYCLIST settings of the published solution.
    pub fn waymo() -> Self {
        RescoreParams {
            alpha: vec![0.68, 0.71, 0.65],
            nms_iou: vec![0.8, 0.55, 0.55],
            pre_nms_top_k: DEFAULT_TOP_K,
            score_floor: 0.0,
            order: PostProcessOrder::RescoreThenNms,
        }
    }

    /// Same alpha for every class, keeping the NMS thresholds.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha.iter_mut().for_each(|a| *a = alpha);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.nms_iou.len() {
            return Err(Error::invalid(format!(
                "alpha has {} classes but nms_iou has {}",
                self.alpha.len(),
                self.nms_iou.len()
            )));
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.alpha.iter().all(unit) || !self.nms_iou.iter().all(unit) || !unit(&self.score_floor) {
            return Err(Error::invalid("alpha, nms_iou and score_floor must lie in [0, 1]"));
        }
        Ok(())
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.num_classes() {
            return Err(Error::invalid(format!(
                "class {class_id} has no rescoring parameters ({} classes configured)",
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// `base^exp` with `0^0 = 1`.
fn pow01(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        1.0
    } else {
        base.powf(exp)
    }
}

/// `score^(1 - alpha) * iou^alpha`.
pub fn fused_score(score: f64, iou: f64, alpha: f64) -> f64 {
    pow01(score, 1.0 - alpha) * pow01(iou, alpha)
}

/// Replaces each score by the IoU-aware fused score of its class and re-sorts.
/// Detections without an IoU estimate keep their score.
pub fn rescore(dets: &DetectionSet, params: &RescoreParams) -> Result<DetectionSet> {
    let mut out = dets.clone();
    for b in &mut out.boxes {
        params.check_class(b.class_id)?;
        let Some(iou) = b.iou_pred else { continue };
        let iou = iou.clamp(0.0, 1.0);
        let score = b.score_or_zero().clamp(0.0, 1.0);
        b.score = Some(fused_score(score, iou, params.alpha[b.class_id]));
    }
    out.sort_by_score();
    Ok(out)
}

/// Greedy NMS run independently per class with that class's threshold.
pub fn class_nms(dets: &DetectionSet, params: &RescoreParams) -> Result<DetectionSet> {
    let mut sorted = dets.clone();
    sorted.sort_by_score();
    let mut kept: Vec<Box3D> = Vec::with_capacity(sorted.len());
    for b in sorted.boxes {
        params.check_class(b.class_id)?;
        let thr = params.nms_iou[b.class_id];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == b.class_id && rotated_bev_iou(k, &b) > thr);
        if !suppressed {
            kept.push(b);
        }
    }
    Ok(DetectionSet::new(dets.frame_id, kept))
}

/// Score floor, then rescoring and NMS in the configured order.
pub fn postprocess(dets: &DetectionSet, params: &RescoreParams) -> Result<DetectionSet> {
    params.validate()?;
    let mut floored = dets.clone();
    floored.boxes.retain(|b| b.score_or_zero() >= params.score_floor);
    match params.order {
        PostProcessOrder::RescoreThenNms => class_nms(&rescore(&floored, params)?, params),
        PostProcessOrder::NmsThenRescore => rescore(&class_nms(&floored, params)?, params),
    }
}

/// Full decode of one frame: top-k peaks, box assembly, post-processing.
pub fn decode_frame(
    head: &HeadOutput,
    cfg: &GridConfig,
    stride: usize,
    params: &RescoreParams,
    frame_id: u64,
) -> Result<DetectionSet> {
    let peaks = topk_peaks(&head.heatmap, head.num_classes, head.height, head.width, params.pre_nms_top_k);
    let dets = assemble_boxes(&peaks, head, cfg, stride, frame_id)?;
    postprocess(&dets, params)
}
