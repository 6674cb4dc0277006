//! Detection metrics: greedy matching, AP and heading-weighted APH at two difficulty
//! levels.
//!
//! The matching thresholds (0.7 for class 0, 0.5 otherwise) and the 101-point
//! interpolation follow the Waymo benchmark convention; both are configurable.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{heading_error, rotated_iou3d, Box3D};
use crate::pointcloud::GtObject;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::L1, Level::L2];

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
        })
    }
}

/// Difficulty of a ground-truth box. `None` for boxes without points, which no metric
/// evaluates.
pub fn assign_difficulty(num_points: usize, marked_l2: bool) -> Option<Level> {
    match num_points {
        0 => None,
        n if n > 5 && !marked_l2 => Some(Level::L1),
        _ => Some(Level::L2),
    }
}

/// Whether a box of difficulty `gt` counts when evaluating at `level`.
pub fn in_pool(gt: Option<Level>, level: Level) -> bool {
    match (gt, level) {
        (None, _) => false,
        (Some(g), Level::L1) => g == Level::L1,
        (Some(_), Level::L2) => true,
    }
}

/// Greedy one-to-one matching for a single frame and class. Detections are visited by
/// descending score (stable); each takes the unmatched GT with the highest 3D IoU at or
/// above `iou_thresh`, the lowest index winning ties. Returned per detection, in input
/// order.
pub fn match_detections(dets: &[Box3D], gts: &[Box3D], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score_or_zero().total_cmp(&dets[a].score_or_zero()));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = rotated_iou3d(&dets[d], gt);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// Heading weight of a true positive: 1 at zero error, 0 at a half turn.
pub fn heading_weight(det_yaw: f64, gt_yaw: f64) -> f64 {
    1.0 - heading_error(det_yaw, gt_yaw) / PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApInterpolation {
    /// Mean of the interpolated precision at recall 0, 0.01, ..., 1.
    #[default]
    Points101,
    /// Area under the precision envelope.
    ExactArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Matching IoU threshold per class; its length fixes the number of classes.
    pub iou_thresholds: Vec<f64>,
    #[serde(default)]
    pub interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.7, 0.5, 0.5],
            interpolation: ApInterpolation::Points101,
        }
    }
}

impl EvalConfig {
    pub fn num_classes(&self) -> usize {
        self.iou_thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid("at least one class threshold is required"));
        }
        if self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("IoU thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One scored detection after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub tp: bool,
    /// Heading weight for true positives, 0 for false positives.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
    pub recall_h: f64,
    pub precision_h: f64,
}

/// Precision/recall after each distinct score threshold.
pub fn pr_curve(matches: &[ScoredMatch], num_gt: usize) -> Vec<PrPoint> {
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let n = num_gt as f64;
    let (mut tp, mut tp_h) = (0usize, 0.0f64);
    let mut curve = Vec::new();
    for (i, m) in sorted.iter().enumerate() {
        if m.tp {
            tp += 1;
            tp_h += m.weight;
        }
        let group_end = sorted.get(i + 1).is_none_or(|next| next.score != m.score);
        if group_end {
            let k = (i + 1) as f64;
            curve.push(PrPoint {
                score: m.score,
                recall: tp as f64 / n,
                precision: tp as f64 / k,
                recall_h: tp_h / n,
                precision_h: tp_h / k,
            });
        }
    }
    curve
}

fn average_precision(points: &[(f64, f64)], mode: ApInterpolation) -> f64 {
    // envelope[i] = best precision at recall >= recall of point i
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match mode {
        ApInterpolation::Points101 => {
            // count samples per envelope step so each precision is added once
            let mut hits = vec![0u32; points.len()];
            let mut j = 0;
            for r in 0..=100 {
                let r = r as f64 / 100.0;
                while j < points.len() && points[j].0 < r {
                    j += 1;
                }
                if j < points.len() {
                    hits[j] += 1;
                }
            }
            let mut sum = 0.0;
            let mut run = (0u32, f64::NAN);
            for (&n, &env) in hits.iter().zip(&envelope) {
                if n == 0 {
                    continue;
                }
                if env == run.1 {
                    run.0 += n;
                } else {
                    sum += f64::from(run.0) * if run.0 > 0 { run.1 } else { 0.0 };
                    run = (n, env);
                }
            }
            sum += if run.0 > 0 { f64::from(run.0) * run.1 } else { 0.0 };
            sum / 101.0
        }
        ApInterpolation::ExactArea => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (p, env) in points.iter().zip(&envelope) {
                area += (p.0 - prev) * env;
                prev = p.0;
            }
            area
        }
    }
}

/// AP and APH of a PR curve; `None` when there is no ground truth.
pub fn ap_aph(curve: &[PrPoint], num_gt: usize, mode: ApInterpolation) -> (Option<f64>, Option<f64>) {
    if num_gt == 0 {
        return (None, None);
    }
    let plain: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    let heading: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall_h, p.precision_h)).collect();
    (
        Some(average_precision(&plain, mode)),
        Some(average_precision(&heading, mode)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub num_gt: usize,
    pub num_tp: usize,
    pub num_fp: usize,
    pub ap: Option<f64>,
    pub aph: Option<f64>,
    #[serde(skip)]
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub l1: LevelMetrics,
    pub l2: LevelMetrics,
}

impl ClassMetrics {
    pub fn level(&self, level: Level) -> &LevelMetrics {
        match level {
            Level::L1 => &self.l1,
            Level::L2 => &self.l2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ap: Option<f64>,
    pub aph: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    /// Mean over classes with defined metrics, per level.
    pub all_l1: Summary,
    pub all_l2: Summary,
}

impl EvalReport {
    pub fn metric(&self, class_id: usize, level: Level) -> &LevelMetrics {
        self.classes[class_id].level(level)
    }

    pub fn all(&self, level: Level) -> Summary {
        match level {
            Level::L1 => self.all_l1,
            Level::L2 => self.all_l2,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per PR point: `class,level,score,recall,precision,recall_h,precision_h`.
    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["class", "level", "score", "recall", "precision", "recall_h", "precision_h"])
            .map_err(io)?;
        for c in &self.classes {
            for level in Level::ALL {
                for p in &c.level(level).curve {
                    w.write_record([
                        c.class_id.to_string(),
                        level.to_string(),
                        p.score.to_string(),
                        p.recall.to_string(),
                        p.precision.to_string(),
                        p.recall_h.to_string(),
                        p.precision_h.to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
        let mut inner = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct Tally {
    num_gt: usize,
    matches: Vec<ScoredMatch>,
}

/// Per-frame tallies, indexed `[class][level]`.
fn evaluate_frame(dets: &[Box3D], gts: &[GtObject], cfg: &EvalConfig) -> Vec<[Tally; 2]> {
    let k = cfg.num_classes();
    let mut out: Vec<[Tally; 2]> = (0..k).map(|_| Default::default()).collect();
    for (class, tallies) in out.iter_mut().enumerate() {
        let cls_dets: Vec<Box3D> = dets.iter().filter(|b| b.class_id == class).copied().collect();
        let cls_gts: Vec<&GtObject> = gts.iter().filter(|g| g.bbox.class_id == class).collect();
        let gt_boxes: Vec<Box3D> = cls_gts.iter().map(|g| g.bbox).collect();
        let difficulty: Vec<Option<Level>> = cls_gts
            .iter()
            .map(|g| assign_difficulty(g.num_points, g.marked_l2))
            .collect();
        let assignment = match_detections(&cls_dets, &gt_boxes, cfg.iou_thresholds[class]);
        for level in Level::ALL {
            let t = &mut tallies[level.index()];
            t.num_gt = difficulty.iter().filter(|d| in_pool(**d, level)).count();
            for (det, gt) in cls_dets.iter().zip(&assignment) {
                let score = det.score_or_zero();
                match gt {
                    // matched to a box outside this pool: ignored
                    Some(g) if !in_pool(difficulty[*g], level) => {}
                    Some(g) => t.matches.push(ScoredMatch {
                        score,
                        tp: true,
                        weight: heading_weight(det.yaw, gt_boxes[*g].yaw),
                    }),
                    None => t.matches.push(ScoredMatch {
                        score,
                        tp: false,
                        weight: 0.0,
                    }),
                }
            }
        }
    }
    out
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates detections against ground truth. Frames absent from `gt` have no
/// ground truth; frames absent from `dets` have no detections.
pub fn evaluate(dets: &[DetectionSet], gt: &BTreeMap<u64, Vec<GtObject>>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let k = cfg.num_classes();
    let mut det_by_frame: BTreeMap<u64, Vec<Box3D>> = BTreeMap::new();
    for set in dets {
        det_by_frame.entry(set.frame_id).or_default().extend(set.boxes.iter().copied());
    }
    let bad_det = det_by_frame.values().flatten().find(|b| b.class_id >= k);
    let bad_gt = gt.values().flatten().find(|g| g.bbox.class_id >= k);
    if let Some(c) = bad_det.map(|b| b.class_id).or(bad_gt.map(|g| g.bbox.class_id)) {
        return Err(Error::invalid(format!("class {c} out of range for {k} classes")));
    }
    let mut frames: Vec<u64> = det_by_frame.keys().chain(gt.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let empty_d = Vec::new();
    let empty_g = Vec::new();
    let per_frame: Vec<Vec<[Tally; 2]>> = frames
        .par_iter()
        .map(|id| {
            evaluate_frame(
                det_by_frame.get(id).unwrap_or(&empty_d),
                gt.get(id).unwrap_or(&empty_g),
                cfg,
            )
        })
        .collect();

    let mut classes = Vec::with_capacity(k);
    for class in 0..k {
        let level_metrics = |level: Level| {
            let mut num_gt = 0;
            let mut matches = Vec::new();
            for frame in &per_frame {
                let t = &frame[class][level.index()];
                num_gt += t.num_gt;
                matches.extend_from_slice(&t.matches);
            }
            let curve = pr_curve(&matches, num_gt);
            let (ap, aph) = ap_aph(&curve, num_gt, cfg.interpolation);
            let num_tp = matches.iter().filter(|m| m.tp).count();
            LevelMetrics {
                num_gt,
                num_tp,
                num_fp: matches.len() - num_tp,
                ap,
                aph,
                curve,
            }
        };
        classes.push(ClassMetrics {
            class_id: class,
            l1: level_metrics(Level::L1),
            l2: level_metrics(Level::L2),
        });
    }
    let summary = |level: Level| Summary {
        ap: mean_defined(classes.iter().map(|c| c.level(level).ap)),
        aph: mean_defined(classes.iter().map(|c| c.level(level).aph)),
    };
    let (all_l1, all_l2) = (summary(Level::L1), summary(Level::L2));
    for c in &classes {
        for level in Level::ALL {
            let m = c.level(level);
            if let (Some(ap), Some(aph)) = (m.ap, m.aph) {
                assert!(aph <= ap + 1e-12, "APH {aph} exceeds AP {ap}");
            }
        }
    }
    Ok(EvalReport {
        classes,
        all_l1,
        all_l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gt_box(x: f64) -> Box3D {
        Box3D::new(x, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0).unwrap()
    }

    fn gt_frame(boxes: &[Box3D]) -> BTreeMap<u64, Vec<GtObject>> {
        let objs = boxes
            .iter()
            .map(|b| GtObject {
                bbox: *b,
                num_points: 10,
                marked_l2: false,
            })
            .collect();
        BTreeMap::from([(0u64, objs)])
    }

    #[test]
    fn difficulty_levels() {
        assert_eq!(assign_difficulty(6, false), Some(Level::L1));
        assert_eq!(assign_difficulty(5, false), Some(Level::L2));
        assert_eq!(assign_difficulty(10, true), Some(Level::L2));
        assert_eq!(assign_difficulty(0, false), None);
        assert!(in_pool(Some(Level::L1), Level::L2));
        assert!(!in_pool(Some(Level::L2), Level::L1));
    }

    #[test]
    fn greedy_matching() {
        let g = gt_box(0.0);
        assert_eq!(match_detections(&[g.with_score(0.5)], &[g], 0.7), vec![Some(0)]);
        let near = Box3D { cx: 0.1, ..g };
        let m = match_detections(&[near.with_score(0.5), g.with_score(0.9)], &[g], 0.7);
        assert_eq!(m, vec![None, Some(0)]);
    }

    #[test]
    fn hand_enumerated_pr_curve() {
        // 2 GT; detections TP 0.9, FP 0.8, TP 0.7.
        // Recall 0..0.5 has precision 1 (51 samples), 0.51..1 has 2/3 (50 samples).
        let m = [
            ScoredMatch { score: 0.9, tp: true, weight: 1.0 },
            ScoredMatch { score: 0.8, tp: false, weight: 0.0 },
            ScoredMatch { score: 0.7, tp: true, weight: 1.0 },
        ];
        let curve = pr_curve(&m, 2);
        let (ap, aph) = ap_aph(&curve, 2, ApInterpolation::Points101);
        assert_abs_diff_eq!(ap.unwrap(), 253.0 / 303.0, epsilon = 1e-15);
        assert_eq!(ap, aph);
        let (exact, _) = ap_aph(&curve, 2, ApInterpolation::ExactArea);
        assert_abs_diff_eq!(exact.unwrap(), 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn single_tp_and_heading() {
        let g = gt_box(0.0);
        let gt = gt_frame(&[g]);
        let r = evaluate(&[DetectionSet::new(0, vec![g.with_score(0.8)])], &gt, &EvalConfig::default()).unwrap();
        let m = r.metric(0, Level::L1);
        assert_eq!((m.ap, m.aph), (Some(1.0), Some(1.0)));
        let flipped = Box3D { yaw: PI, ..g }.with_score(0.8);
        let r = evaluate(&[DetectionSet::new(0, vec![flipped])], &gt, &EvalConfig::default()).unwrap();
        let m = r.metric(0, Level::L2);
        assert_eq!(m.ap, Some(1.0));
        assert_abs_diff_eq!(m.aph.unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn missing_class_is_absent_and_all_averages_defined() {
        let g = gt_box(0.0);
        let r = evaluate(&[DetectionSet::new(0, vec![g.with_score(0.8)])], &gt_frame(&[g]), &EvalConfig::default()).unwrap();
        assert_eq!(r.metric(1, Level::L1).ap, None);
        assert_eq!(r.all(Level::L1).ap, Some(1.0));
    }

    #[test]
    fn l2_only_match_is_ignored_at_l1() {
        let g = gt_box(0.0);
        let mut gt = gt_frame(&[g]);
        gt.get_mut(&0).unwrap()[0].num_points = 3;
        let r = evaluate(&[DetectionSet::new(0, vec![g.with_score(0.8)])], &gt, &EvalConfig::default()).unwrap();
        let l1 = r.metric(0, Level::L1);
        assert_eq!((l1.num_gt, l1.num_tp, l1.num_fp, l1.ap), (0, 0, 0, None));
        assert_eq!(r.metric(0, Level::L2).ap, Some(1.0));
    }

    #[test]
    fn duplication_leaves_ap_unchanged() {
        let gts = [gt_box(0.0), gt_box(10.0)];
        let dets = vec![
            gts[0].with_score(0.9),
            gt_box(20.0).with_score(0.8),
            Box3D { yaw: PI, ..gts[1] }.with_score(0.7),
        ];
        let cfg = EvalConfig::default();
        let once = evaluate(&[DetectionSet::new(0, dets.clone())], &gt_frame(&gts), &cfg).unwrap();
        let mut gt2 = gt_frame(&gts);
        gt2.insert(1, gt2[&0].clone());
        let twice = evaluate(
            &[DetectionSet::new(0, dets.clone()), DetectionSet::new(1, dets)],
            &gt2,
            &cfg,
        )
        .unwrap();
        let (a, b) = (once.metric(0, Level::L1), twice.metric(0, Level::L1));
        assert_abs_diff_eq!(a.ap.unwrap(), b.ap.unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.aph.unwrap(), b.aph.unwrap(), epsilon = 1e-12);
        assert!(a.aph.unwrap() < a.ap.unwrap());
    }

    #[test]
    fn out_of_range_class_rejected() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 7).unwrap();
        assert!(evaluate(&[DetectionSet::new(0, vec![b])], &BTreeMap::new(), &EvalConfig::default()).is_err());
    }

    #[test]
    fn report_files() {
        let g = gt_box(0.0);
        let r = evaluate(&[DetectionSet::new(0, vec![g.with_score(0.8)])], &gt_frame(&[g]), &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        r.write_pr_csv(&dir.path().join("pr.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("pr.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("class,level,score"));
    }
}
