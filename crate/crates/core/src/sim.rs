//! Synthetic scenes and a noisy-detector model with controllable correlation between
//! classification score and localization quality.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::decode::{class_nms, rescore, DetectionSet, RescoreParams};
use crate::encode::{iou_from_target, iou_target};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, Level};
use crate::geometry::{rotated_bev_iou, rotated_iou3d, Box3D};
use crate::pointcloud::{Frame, GtObject, Point};

/// Rejection-sampling budget per object.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Inclusive object-count range per class.
    pub objects_per_class: Vec<[usize; 2]>,
    /// `[l, w, h]` ranges in meters per class.
    pub dim_ranges: Vec<[[f64; 2]; 3]>,
    /// Inclusive range of surface points per object.
    pub points_per_object: [usize; 2],
    pub background_points: usize,
    /// Objects and background lie in `[-area, area]` along x and y.
    pub area: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            objects_per_class: vec![[4, 10], [2, 6], [1, 4]],
            dim_ranges: vec![
                [[3.8, 5.2], [1.7, 2.1], [1.4, 1.9]],
                [[0.6, 1.0], [0.5, 0.9], [1.6, 1.9]],
                [[1.6, 2.0], [0.5, 0.8], [1.6, 1.9]],
            ],
            points_per_object: [2, 80],
            background_points: 2000,
            area: 50.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.objects_per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_ranges.len() != self.objects_per_class.len() {
            return Err(Error::invalid("dim_ranges and objects_per_class differ in class count"));
        }
        let count_ok = |r: &[usize; 2]| r[0] <= r[1];
        if !self.objects_per_class.iter().all(count_ok) || !count_ok(&self.points_per_object) {
            return Err(Error::invalid("count ranges must have lo <= hi"));
        }
        let dims_ok = self
            .dim_ranges
            .iter()
            .flatten()
            .all(|r| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite());
        if !dims_ok {
            return Err(Error::invalid("dimension ranges must be positive with lo <= hi"));
        }
        if !(self.area > 0.0 && self.area.is_finite()) {
            return Err(Error::invalid("area must be positive"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

fn random_dims<R: Rng + ?Sized>(rng: &mut R, ranges: &[[f64; 2]; 3]) -> [f64; 3] {
    [uniform(rng, ranges[0]), uniform(rng, ranges[1]), uniform(rng, ranges[2])]
}

/// Uniform sample on the surface of a box, faces chosen in proportion to their area.
fn surface_point<R: Rng + ?Sized>(rng: &mut R, b: &Box3D) -> [f64; 3] {
    let (l, w, h) = (b.l, b.w, b.h);
    let areas = [w * h, l * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            axis = i;
            break;
        }
        u -= a;
    }
    let half = [l / 2.0, w / 2.0, h / 2.0];
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut q = [0.0; 3];
    for (k, qk) in q.iter_mut().enumerate() {
        *qk = if k == axis {
            side * half[k]
        } else {
            (rng.random::<f64>() * 2.0 - 1.0) * half[k]
        };
    }
    b.to_world(q)
}

/// A scene of non-overlapping (in BEV) boxes resting on z = 0, surface points on each
/// box and uniform background points.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, frame_id: u64, rng: &mut R) -> Result<Frame> {
    spec.validate()?;
    let mut objects: Vec<GtObject> = Vec::new();
    let mut points = Vec::new();
    for (class, range) in spec.objects_per_class.iter().enumerate() {
        let n = rng.random_range(range[0]..=range[1]);
        for _ in 0..n {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let [l, w, h] = random_dims(rng, &spec.dim_ranges[class]);
                let cx = uniform(rng, [-spec.area, spec.area]);
                let cy = uniform(rng, [-spec.area, spec.area]);
                let yaw = uniform(rng, [-PI, PI]);
                let b = Box3D::new(cx, cy, h / 2.0, l, w, h, yaw, class)?;
                if objects.iter().all(|o| rotated_bev_iou(&o.bbox, &b) == 0.0) {
                    placed = Some(b);
                    break;
                }
            }
            let Some(b) = placed else {
                log::warn!("frame {frame_id}: could not place a class {class} object, scene has fewer objects");
                break;
            };
            let k = rng.random_range(spec.points_per_object[0]..=spec.points_per_object[1]);
            for _ in 0..k {
                let p = surface_point(rng, &b);
                points.push(Point::new(p[0], p[1], p[2], rng.random::<f64>()));
            }
            objects.push(GtObject::new(b));
        }
    }
    for _ in 0..spec.background_points {
        let x = uniform(rng, [-spec.area, spec.area]);
        let y = uniform(rng, [-spec.area, spec.area]);
        let z = uniform(rng, [-0.2, 0.1]);
        points.push(Point::new(x, y, z, rng.random::<f64>() * 0.2));
    }
    let mut frame = Frame {
        frame_id,
        points,
        objects,
    };
    frame.recount_points();
    Ok(frame)
}

/// Generator for frame `frame_id` of a run seeded with `seed`; independent of thread
/// scheduling.
pub fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

/// Frames `0..count`, each from its own seeded stream.
pub fn generate_scenes(spec: &SceneSpec, count: usize) -> Result<Vec<Frame>> {
    (0..count as u64)
        .into_par_iter()
        .map(|id| generate_scene(spec, id, &mut frame_rng(spec.seed, id)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub center_sigma: f64,
    pub dim_sigma: f64,
    pub yaw_sigma: f64,
    /// Correlation between the score latent and the standardized true IoU.
    pub rho: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
    /// Probability that a ground-truth object is missed.
    pub fn_rate: f64,
    /// Noise added to the simulated IoU branch, in target space.
    pub iou_head_sigma: f64,
    /// Mean of the standard-normal score latent of false positives. Their IoU-branch
    /// output is uniform on [0, 1], since that branch is only supervised on objects.
    #[serde(default = "default_fp_latent_mean")]
    pub fp_latent_mean: f64,
    /// Mean and standard deviation used to standardize `probit(iou)`.
    #[serde(default = "default_latent_ref")]
    pub latent_ref: [f64; 2],
    pub seed: u64,
}

fn default_fp_latent_mean() -> f64 {
    -1.5
}

fn default_latent_ref() -> [f64; 2] {
    [0.5, 0.6]
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            center_sigma: 0.08,
            dim_sigma: 0.05,
            yaw_sigma: 0.05,
            rho: -0.5,
            fp_rate: 4.0,
            fn_rate: 0.05,
            iou_head_sigma: 0.1,
            fp_latent_mean: default_fp_latent_mean(),
            latent_ref: default_latent_ref(),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// No perturbation, no false positives or negatives, scores tied to IoU.
    pub fn perfect() -> Self {
        NoiseSpec {
            center_sigma: 0.0,
            dim_sigma: 0.0,
            yaw_sigma: 0.0,
            rho: 1.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            iou_head_sigma: 0.0,
            fp_latent_mean: default_fp_latent_mean(),
            latent_ref: default_latent_ref(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sig = [self.center_sigma, self.dim_sigma, self.yaw_sigma, self.iou_head_sigma, self.fp_rate];
        if !sig.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid("noise sigmas and fp_rate must be finite and >= 0"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid("rho must lie in [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fn_rate) {
            return Err(Error::invalid("fn_rate must lie in [0, 1]"));
        }
        if !self.fp_latent_mean.is_finite() {
            return Err(Error::invalid("fp_latent_mean must be finite"));
        }
        if !(self.latent_ref[1] > 0.0) {
            return Err(Error::invalid("latent reference deviation must be positive"));
        }
        Ok(())
    }
}

const IOU_CLAMP: f64 = 1e-3;

fn probit_iou(iou: f64) -> f64 {
    let n = StdNormal::standard();
    n.inverse_cdf(iou.clamp(IOU_CLAMP, 1.0 - IOU_CLAMP))
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

/// Score and IoU-branch output for a detection whose true IoU is `iou`.
fn score_and_iou_pred<R: Rng + ?Sized>(iou: f64, noise: &NoiseSpec, rng: &mut R) -> (f64, f64) {
    let z = (probit_iou(iou) - noise.latent_ref[0]) / noise.latent_ref[1];
    let eps: f64 = rng.sample(rand_distr::StandardNormal);
    let latent = noise.rho * z + (1.0 - noise.rho * noise.rho).max(0.0).sqrt() * eps;
    let iou_pred = iou_from_target(iou_target(iou) + normal(noise.iou_head_sigma).sample(rng));
    (logistic(latent), iou_pred)
}

fn perturb<R: Rng + ?Sized>(gt: &Box3D, noise: &NoiseSpec, rng: &mut R) -> Box3D {
    let c = normal(noise.center_sigma);
    let d = normal(noise.dim_sigma);
    let y = normal(noise.yaw_sigma);
    let mut b = *gt;
    b.cx += c.sample(rng);
    b.cy += c.sample(rng);
    b.cz += c.sample(rng);
    b.l = (b.l + d.sample(rng)).max(0.1 * gt.l);
    b.w = (b.w + d.sample(rng)).max(0.1 * gt.w);
    b.h = (b.h + d.sample(rng)).max(0.1 * gt.h);
    Box3D::new(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw + y.sample(rng), b.class_id).expect("finite perturbation")
}

/// Noisy detections of a frame's ground truth plus random false positives whose
/// dimensions follow the scene's class ranges.
pub fn synth_detector<R: Rng + ?Sized>(
    frame: &Frame,
    scene: &SceneSpec,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<DetectionSet> {
    noise.validate()?;
    scene.validate()?;
    let mut boxes = Vec::new();
    for obj in &frame.objects {
        if rng.random::<f64>() < noise.fn_rate {
            continue;
        }
        let det = perturb(&obj.bbox, noise, rng);
        let iou = rotated_iou3d(&det, &obj.bbox);
        let (score, iou_pred) = score_and_iou_pred(iou, noise, rng);
        boxes.push(det.with_score(score).with_iou_pred(iou_pred));
    }
    let num_fp = if noise.fp_rate > 0.0 {
        Poisson::new(noise.fp_rate).expect("rate validated").sample(rng) as usize
    } else {
        0
    };
    for _ in 0..num_fp {
        let class = rng.random_range(0..scene.num_classes());
        let [l, w, h] = random_dims(rng, &scene.dim_ranges[class]);
        let cx = uniform(rng, [-scene.area, scene.area]);
        let cy = uniform(rng, [-scene.area, scene.area]);
        let yaw = uniform(rng, [-PI, PI]);
        let b = Box3D::new(cx, cy, h / 2.0, l, w, h, yaw, class)?;
        let latent = noise.fp_latent_mean + rng.sample::<f64, _>(rand_distr::StandardNormal);
        let (score, iou_pred) = (logistic(latent), rng.random::<f64>());
        boxes.push(b.with_score(score).with_iou_pred(iou_pred));
    }
    let mut set = DetectionSet::new(frame.frame_id, boxes);
    set.sort_by_score();
    Ok(set)
}

/// Detections for every frame, each from the stream of its frame id.
pub fn synth_detections(frames: &[Frame], scene: &SceneSpec, noise: &NoiseSpec) -> Result<Vec<DetectionSet>> {
    frames
        .par_iter()
        .map(|f| synth_detector(f, scene, noise, &mut frame_rng(noise.seed, f.frame_id)))
        .collect()
}

/// Mean and deviation of `probit(iou)` over matched detections, for use as
/// `latent_ref`.
pub fn calibrate_latent(frames: &[Frame], noise: &NoiseSpec) -> [f64; 2] {
    let mut values = Vec::new();
    for f in frames {
        let mut rng = frame_rng(noise.seed ^ 0x5eed, f.frame_id);
        for o in &f.objects {
            let det = perturb(&o.bbox, noise, &mut rng);
            values.push(probit_iou(rotated_iou3d(&det, &o.bbox)));
        }
    }
    if values.len() < 2 {
        return default_latent_ref();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    [mean, var.sqrt().max(1e-6)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub report: EvalReport,
}

/// Rescoring, class-wise NMS and evaluation of fixed detections for each alpha.
pub fn ablate_alpha(
    dets: &[DetectionSet],
    gt: &BTreeMap<u64, Vec<GtObject>>,
    alphas: &[f64],
    params: &RescoreParams,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    alphas
        .par_iter()
        .map(|&alpha| {
            let p = params.clone().with_alpha(alpha);
            p.validate()?;
            let processed = dets
                .iter()
                .map(|d| class_nms(&rescore(d, &p)?, &p))
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow {
                alpha,
                report: evaluate(&processed, gt, eval)?,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Columns `alpha,class,level,ap,aph`; class `ALL` is the mean over classes.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["alpha", "class", "level", "ap", "aph"]).map_err(io)?;
    for row in rows {
        for level in Level::ALL {
            for c in &row.report.classes {
                let m = c.level(level);
                w.write_record([
                    row.alpha.to_string(),
                    c.class_id.to_string(),
                    level.to_string(),
                    fmt_opt(m.ap),
                    fmt_opt(m.aph),
                ])
                .map_err(io)?;
            }
            let all = row.report.all(level);
            w.write_record([
                row.alpha.to_string(),
                "ALL".to_string(),
                level.to_string(),
                fmt_opt(all.ap),
                fmt_opt(all.aph),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_map(frames: &[Frame]) -> BTreeMap<u64, Vec<GtObject>> {
        frames.iter().map(|f| (f.frame_id, f.objects.clone())).collect()
    }

    #[test]
    fn empty_scene_is_background_only() {
        let spec = SceneSpec {
            objects_per_class: vec![[0, 0]; 3],
            background_points: 50,
            ..Default::default()
        };
        let f = generate_scene(&spec, 0, &mut frame_rng(1, 0)).unwrap();
        assert!(f.objects.is_empty());
        assert_eq!(f.points.len(), 50);
    }

    #[test]
    fn scenes_are_seeded_and_non_overlapping() {
        let spec = SceneSpec::default();
        let a = generate_scenes(&spec, 20).unwrap();
        assert_eq!(a, generate_scenes(&spec, 20).unwrap());
        for f in &a {
            for i in 0..f.objects.len() {
                assert!(f.objects[i].num_points >= spec.points_per_object[0]);
                for j in i + 1..f.objects.len() {
                    assert_eq!(rotated_bev_iou(&f.objects[i].bbox, &f.objects[j].bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn crowded_scene_places_fewer_objects() {
        let spec = SceneSpec {
            objects_per_class: vec![[30, 30]],
            dim_ranges: vec![[[4.0, 4.0], [2.0, 2.0], [1.5, 1.5]]],
            area: 3.0,
            background_points: 0,
            ..Default::default()
        };
        let f = generate_scene(&spec, 0, &mut frame_rng(0, 0)).unwrap();
        assert!(f.objects.len() < 30);
    }

    #[test]
    fn perfect_detector_scores_ap_one() {
        let spec = SceneSpec::default();
        let frames = generate_scenes(&spec, 5).unwrap();
        let dets = synth_detections(&frames, &spec, &NoiseSpec::perfect()).unwrap();
        for (d, f) in dets.iter().zip(&frames) {
            assert_eq!(d.len(), f.objects.len());
            for b in &d.boxes {
                assert!(b.iou_pred.unwrap() >= 0.75);
            }
        }
        let report = evaluate(&dets, &gt_map(&frames), &EvalConfig::default()).unwrap();
        for level in Level::ALL {
            assert_eq!(report.all(level).ap, Some(1.0));
            assert_eq!(report.all(level).aph, Some(1.0));
        }
    }

    #[test]
    fn perfect_rows_identical() {
        let spec = SceneSpec::default();
        let frames = generate_scenes(&spec, 5).unwrap();
        let dets = synth_detections(&frames, &spec, &NoiseSpec::perfect()).unwrap();
        let rows = ablate_alpha(&dets, &gt_map(&frames), &[0.0, 0.5, 1.0], &RescoreParams::waymo(), &EvalConfig::default()).unwrap();
        for r in &rows {
            assert_eq!(r.report.all(Level::L2).aph, Some(1.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_ablation_csv(&rows, &p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap().lines().count(), 1 + 3 * 2 * 4);
    }

    #[test]
    fn positive_rho_correlates_score_with_iou() {
        let spec = SceneSpec::default();
        let frames = generate_scenes(&spec, 30).unwrap();
        let noise = NoiseSpec {
            rho: 0.9,
            fp_rate: 0.0,
            ..Default::default()
        };
        let dets = synth_detections(&frames, &spec, &noise).unwrap();
        let mut pairs = Vec::new();
        for (d, f) in dets.iter().zip(&frames) {
            for b in &d.boxes {
                let iou = f
                    .objects
                    .iter()
                    .map(|o| rotated_iou3d(b, &o.bbox))
                    .fold(0.0, f64::max);
                pairs.push((b.score.unwrap(), iou));
            }
        }
        let n = pairs.len() as f64;
        let (ms, mi) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let cov: f64 = pairs.iter().map(|p| (p.0 - ms) * (p.1 - mi)).sum();
        assert!(cov > 0.0);
    }

    #[test]
    fn misaligned_sweep_peaks_inside() {
        let spec = SceneSpec::default();
        let frames = generate_scenes(&spec, 60).unwrap();
        let mut noise = NoiseSpec::default();
        noise.latent_ref = calibrate_latent(&frames, &noise);
        let dets = synth_detections(&frames, &spec, &noise).unwrap();
        let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let rows = ablate_alpha(&dets, &gt_map(&frames), &alphas, &RescoreParams::waymo(), &EvalConfig::default()).unwrap();
        let aph: Vec<f64> = rows.iter().map(|r| r.report.all(Level::L2).aph.unwrap()).collect();
        let best = (0..aph.len()).max_by(|&a, &b| aph[a].total_cmp(&aph[b])).unwrap();
        assert!(best > 0 && best < 10, "{aph:?}");
        assert!(aph[7] > aph[0], "{aph:?}");
    }

    #[test]
    fn calibration_is_finite() {
        let spec = SceneSpec::default();
        let frames = generate_scenes(&spec, 5).unwrap();
        let [m, s] = calibrate_latent(&frames, &NoiseSpec::default());
        assert!(m.is_finite() && s > 0.0);
    }
}
