//! Training-time scene augmentation: ground-truth sampling, global transforms and
//! per-instance noise.
//!
//! All randomness comes from the caller's generator. Each stochastic operation has a
//! deterministic counterpart (`apply_*`) that takes the drawn parameters explicitly.

use std::f64::consts::{FRAC_PI_4, PI};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{contains_local, rotated_bev_iou, wrap_angle, Box3D};
use crate::pointcloud::{read_points_bin, read_to_string, write_points_bin, Frame, GtObject, Point};

/// A stored object: its box and the points it enclosed, in the box frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub bbox: Box3D,
    pub points: Vec<Point>,
}

impl DbEntry {
    pub fn world_points(&self) -> Vec<Point> {
        self.points.iter().map(|p| p.with_xyz(self.bbox.to_world(p.xyz()))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtDatabase {
    /// Entries per class.
    pub classes: Vec<Vec<DbEntry>>,
}

#[derive(Serialize, Deserialize)]
struct DbIndexEntry {
    class: usize,
    file: String,
    bbox: Box3D,
    num_points: usize,
}

#[derive(Serialize, Deserialize)]
struct DbIndex {
    num_classes: usize,
    entries: Vec<DbIndexEntry>,
}

impl GtDatabase {
    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `index.json` plus one binary point file per object under `objects/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let obj_dir = dir.join("objects");
        std::fs::create_dir_all(&obj_dir).map_err(|e| Error::io(&obj_dir, e))?;
        let mut index = DbIndex {
            num_classes: self.classes.len(),
            entries: Vec::new(),
        };
        for (k, entries) in self.classes.iter().enumerate() {
            for (i, e) in entries.iter().enumerate() {
                let file = format!("objects/{k}_{i:06}.bin");
                write_points_bin(&dir.join(&file), &e.points)?;
                index.entries.push(DbIndexEntry {
                    class: k,
                    file,
                    bbox: e.bbox,
                    num_points: e.points.len(),
                });
            }
        }
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let index: DbIndex = serde_json::from_str(&read_to_string(&path)?)
            .map_err(|e| Error::parse(&path, format!("line {}", e.line()), e.to_string()))?;
        let mut db = GtDatabase {
            classes: vec![Vec::new(); index.num_classes],
        };
        for e in index.entries {
            let points = read_points_bin(&dir.join(&e.file))?;
            if points.len() != e.num_points || e.class >= index.num_classes {
                return Err(Error::parse(&path, &e.file, "entry does not match its point file"));
            }
            e.bbox.validate()?;
            db.classes[e.class].push(DbEntry { bbox: e.bbox, points });
        }
        Ok(db)
    }
}

/// Pairs every ground-truth box with the points it contains (closed containment).
pub fn build_gt_database(frames: &[Frame], num_classes: usize) -> Result<GtDatabase> {
    let mut db = GtDatabase {
        classes: vec![Vec::new(); num_classes],
    };
    for f in frames {
        for obj in &f.objects {
            let b = obj.bbox;
            if b.class_id >= num_classes {
                return Err(Error::invalid(format!(
                    "frame {}: class {} out of range",
                    f.frame_id, b.class_id
                )));
            }
            let points: Vec<Point> = f
                .points
                .iter()
                .filter(|p| b.contains(p.xyz()))
                .map(|p| p.with_xyz(b.to_local(p.xyz())))
                .collect();
            debug_assert!(points.iter().all(|p| contains_local(p.xyz(), b.l, b.w, b.h)));
            db.classes[b.class_id].push(DbEntry { bbox: b, points });
        }
    }
    Ok(db)
}

/// Which coordinate a "flip along the x-axis" negates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipConvention {
    /// Mirror across the named axis: the x-flip negates y.
    #[default]
    MirrorAcrossAxis,
    /// Negate the named coordinate: the x-flip negates x.
    NegateAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub samples_per_class: Vec<usize>,
    pub flip_prob: f64,
    #[serde(default)]
    pub flip_convention: FlipConvention,
    pub rot_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub trans_range: [f64; 2],
    pub inst_rot_range: [f64; 2],
    pub inst_loc_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            samples_per_class: vec![15, 10, 10],
            flip_prob: 0.5,
            flip_convention: FlipConvention::MirrorAcrossAxis,
            rot_range: [-FRAC_PI_4, FRAC_PI_4],
            scale_range: [0.95, 1.05],
            trans_range: [-0.2, 0.2],
            inst_rot_range: [-PI / 20.0, PI / 20.0],
            inst_loc_sigma: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none(num_classes: usize) -> Self {
        AugmentConfig {
            samples_per_class: vec![0; num_classes],
            flip_prob: 0.0,
            flip_convention: FlipConvention::MirrorAcrossAxis,
            rot_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            trans_range: [0.0, 0.0],
            inst_rot_range: [0.0, 0.0],
            inst_loc_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if ![self.rot_range, self.scale_range, self.trans_range, self.inst_rot_range]
            .iter()
            .all(ordered)
        {
            return Err(Error::invalid("augmentation ranges must be finite with lo <= hi"));
        }
        if self.scale_range[0] <= 0.0 {
            return Err(Error::invalid("scale range must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob must lie in [0, 1]"));
        }
        if !(self.inst_loc_sigma >= 0.0 && self.inst_loc_sigma.is_finite()) {
            return Err(Error::invalid("inst_loc_sigma must be >= 0"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Pastes database objects into the scene, rejecting any that overlap (in BEV) a box
/// already present or pasted earlier.
pub fn sample_gt<R: Rng + ?Sized>(db: &GtDatabase, scene: &Frame, cfg: &AugmentConfig, rng: &mut R) -> Frame {
    let mut out = scene.clone();
    for (k, entries) in db.classes.iter().enumerate() {
        let want = cfg.samples_per_class.get(k).copied().unwrap_or(0).min(entries.len());
        if want == 0 {
            continue;
        }
        for i in rand::seq::index::sample(rng, entries.len(), want) {
            let e = &entries[i];
            let collides = out.objects.iter().any(|o| rotated_bev_iou(&o.bbox, &e.bbox) > 0.0);
            if collides {
                continue;
            }
            out.points.extend(e.world_points());
            out.objects.push(GtObject {
                bbox: e.bbox,
                num_points: e.points.len(),
                marked_l2: false,
            });
        }
    }
    out
}

/// Parameters of one global augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl GlobalParams {
    pub const IDENTITY: GlobalParams = GlobalParams {
        flip_x: false,
        flip_y: false,
        rotation: 0.0,
        scale: 1.0,
        translation: [0.0; 3],
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip_x = rng.random::<f64>() < cfg.flip_prob;
        let flip_y = rng.random::<f64>() < cfg.flip_prob;
        let rotation = uniform(rng, cfg.rot_range);
        let scale = uniform(rng, cfg.scale_range);
        let translation = [
            uniform(rng, cfg.trans_range),
            uniform(rng, cfg.trans_range),
            uniform(rng, cfg.trans_range),
        ];
        GlobalParams {
            flip_x,
            flip_y,
            rotation,
            scale,
            translation,
        }
    }
}

fn negate_y(p: [f64; 3], yaw: f64) -> ([f64; 3], f64) {
    ([p[0], -p[1], p[2]], -yaw)
}

fn negate_x(p: [f64; 3], yaw: f64) -> ([f64; 3], f64) {
    ([-p[0], p[1], p[2]], PI - yaw)
}

/// Applies flips, rotation about the origin, scaling and translation, in that order,
/// to points and boxes alike.
pub fn apply_global(scene: &Frame, params: &GlobalParams, convention: FlipConvention) -> Frame {
    let (flip_x_fn, flip_y_fn): (fn([f64; 3], f64) -> ([f64; 3], f64), fn([f64; 3], f64) -> ([f64; 3], f64)) =
        match convention {
            FlipConvention::MirrorAcrossAxis => (negate_y, negate_x),
            FlipConvention::NegateAxis => (negate_x, negate_y),
        };
    let (s, c) = params.rotation.sin_cos();
    let t = params.translation;
    let map = |p: [f64; 3], yaw: f64| -> ([f64; 3], f64) {
        let (mut p, mut yaw) = (p, yaw);
        if params.flip_x {
            (p, yaw) = flip_x_fn(p, yaw);
        }
        if params.flip_y {
            (p, yaw) = flip_y_fn(p, yaw);
        }
        let r = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
        let q = [
            r[0] * params.scale + t[0],
            r[1] * params.scale + t[1],
            r[2] * params.scale + t[2],
        ];
        (q, yaw + params.rotation)
    };
    let mut out = scene.clone();
    for p in &mut out.points {
        *p = p.with_xyz(map(p.xyz(), 0.0).0);
    }
    for o in &mut out.objects {
        let b = &mut o.bbox;
        let (q, yaw) = map([b.cx, b.cy, b.cz], b.yaw);
        (b.cx, b.cy, b.cz) = (q[0], q[1], q[2]);
        b.yaw = wrap_angle(yaw);
        b.l *= params.scale;
        b.w *= params.scale;
        b.h *= params.scale;
    }
    out
}

pub fn global_augment<R: Rng + ?Sized>(scene: &Frame, cfg: &AugmentConfig, rng: &mut R) -> Frame {
    let params = GlobalParams::sample(cfg, rng);
    apply_global(scene, &params, cfg.flip_convention)
}

/// Rigid motion applied to one instance and the points it owns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceNoise {
    pub dyaw: f64,
    pub dloc: [f64; 3],
}

/// Rotates each box's points about its center by `dyaw` and translates box and points
/// by `dloc`. A point inside several boxes belongs to the first in GT order; points
/// inside none are untouched.
pub fn apply_instance_noise(scene: &Frame, noise: &[InstanceNoise]) -> Result<Frame> {
    if noise.len() != scene.objects.len() {
        return Err(Error::ShapeMismatch {
            expected: scene.objects.len(),
            actual: noise.len(),
        });
    }
    let mut out = scene.clone();
    let owners: Vec<Option<usize>> = scene
        .points
        .iter()
        .map(|p| scene.objects.iter().position(|o| o.bbox.contains(p.xyz())))
        .collect();
    for (p, owner) in out.points.iter_mut().zip(owners) {
        let Some(i) = owner else { continue };
        let b = &scene.objects[i].bbox;
        let n = &noise[i];
        if n.dyaw == 0.0 {
            *p = p.with_xyz([p.x + n.dloc[0], p.y + n.dloc[1], p.z + n.dloc[2]]);
            continue;
        }
        let (s, c) = n.dyaw.sin_cos();
        let (dx, dy) = (p.x - b.cx, p.y - b.cy);
        *p = p.with_xyz([
            b.cx + c * dx - s * dy + n.dloc[0],
            b.cy + s * dx + c * dy + n.dloc[1],
            p.z + n.dloc[2],
        ]);
    }
    for (o, n) in out.objects.iter_mut().zip(noise) {
        o.bbox.cx += n.dloc[0];
        o.bbox.cy += n.dloc[1];
        o.bbox.cz += n.dloc[2];
        o.bbox.yaw = wrap_angle(o.bbox.yaw + n.dyaw);
    }
    Ok(out)
}

pub fn instance_augment<R: Rng + ?Sized>(scene: &Frame, cfg: &AugmentConfig, rng: &mut R) -> Frame {
    let normal = Normal::new(0.0, cfg.inst_loc_sigma).unwrap_or_else(|_| Normal::new(0.0, 0.0).unwrap());
    let noise: Vec<InstanceNoise> = scene
        .objects
        .iter()
        .map(|_| InstanceNoise {
            dyaw: uniform(rng, cfg.inst_rot_range),
            dloc: [normal.sample(rng), normal.sample(rng), normal.sample(rng)],
        })
        .collect();
    apply_instance_noise(scene, &noise).expect("one noise draw per object")
}

/// GT sampling, then global transforms, then per-instance noise.
pub fn augment_scene<R: Rng + ?Sized>(
    db: Option<&GtDatabase>,
    scene: &Frame,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Frame> {
    cfg.validate()?;
    let pasted = match db {
        Some(db) => sample_gt(db, scene, cfg, rng),
        None => scene.clone(),
    };
    let global = global_augment(&pasted, cfg, rng);
    Ok(instance_augment(&global, cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Frame {
        let b = Box3D::new(1.0, 3.0, 0.75, 4.0, 2.0, 1.5, 0.4, 0).unwrap();
        let mut points: Vec<Point> = (0..10)
            .map(|i| {
                let t = i as f64 / 10.0 - 0.45;
                let q = [t * 3.5, t * 1.5, t];
                Point::new(0.0, 0.0, 0.0, 0.2).with_xyz(b.to_world(q))
            })
            .collect();
        points.push(Point::new(20.0, 20.0, 0.0, 0.0));
        let mut f = Frame {
            frame_id: 1,
            points,
            objects: vec![GtObject::new(b)],
        };
        f.recount_points();
        f
    }

    #[test]
    fn database_entries_and_round_trip() {
        let s = scene();
        let db = build_gt_database(&[s.clone()], 3).unwrap();
        assert_eq!(db.classes[0].len(), 1);
        let e = &db.classes[0][0];
        assert_eq!(e.points.len(), 10);
        for (w, orig) in e.world_points().iter().zip(&s.points) {
            assert_abs_diff_eq!(w.x, orig.x, epsilon = 1e-9);
            assert_abs_diff_eq!(w.y, orig.y, epsilon = 1e-9);
            assert_abs_diff_eq!(w.z, orig.z, epsilon = 1e-9);
        }
    }

    #[test]
    fn face_point_is_inside() {
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0).unwrap();
        let f = Frame {
            frame_id: 0,
            points: vec![Point::new(1.0, 0.0, 0.0, 0.0)],
            objects: vec![GtObject::new(b)],
        };
        let db = build_gt_database(&[f], 1).unwrap();
        assert_eq!(db.classes[0][0].points.len(), 1);
    }

    #[test]
    fn database_persistence() {
        let db = build_gt_database(&[scene()], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        let back = GtDatabase::load(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.classes[0][0].bbox, db.classes[0][0].bbox);
        for (a, b) in back.classes[0][0].points.iter().zip(&db.classes[0][0].points) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-6);
        }
    }

    #[test]
    fn empty_database_leaves_scene() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = sample_gt(&GtDatabase::default(), &s, &AugmentConfig::default(), &mut rng);
        assert_eq!(out, s);
    }

    #[test]
    fn giant_box_blocks_pasting() {
        let src = Frame {
            frame_id: 0,
            points: vec![],
            objects: vec![
                GtObject::new(Box3D::new(5.0, 5.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0).unwrap()),
                GtObject::new(Box3D::new(-5.0, 5.0, 0.0, 1.0, 1.0, 1.5, 0.0, 1).unwrap()),
            ],
        };
        let db = build_gt_database(&[src], 3).unwrap();
        let cover = Frame {
            frame_id: 1,
            points: vec![],
            objects: vec![GtObject::new(Box3D::new(0.0, 0.0, 0.0, 500.0, 500.0, 10.0, 0.0, 0).unwrap())],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = sample_gt(&db, &cover, &AugmentConfig::default(), &mut rng);
        assert_eq!(out, cover);
    }

    #[test]
    fn pasted_objects_do_not_overlap() {
        let mut objs = Vec::new();
        for i in 0..30 {
            // heavily overlapping candidates
            objs.push(GtObject::new(Box3D::new(i as f64 * 0.5, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0).unwrap()));
        }
        let db = build_gt_database(&[Frame { frame_id: 0, points: vec![], objects: objs }], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = sample_gt(&db, &Frame::default(), &AugmentConfig::default(), &mut rng);
        assert!(!out.objects.is_empty());
        for i in 0..out.objects.len() {
            for j in i + 1..out.objects.len() {
                assert_eq!(rotated_bev_iou(&out.objects[i].bbox, &out.objects[j].bbox), 0.0);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let db = build_gt_database(&[scene()], 3).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_scene(Some(&db), &Frame::default(), &AugmentConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn disabled_global_is_identity() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(global_augment(&s, &AugmentConfig::none(3), &mut rng), s);
    }

    #[test]
    fn x_flip_mirrors_across_x_axis() {
        let f = Frame {
            frame_id: 0,
            points: vec![],
            objects: vec![GtObject::new(Box3D::new(1.0, 3.0, 0.0, 4.0, 2.0, 1.5, 0.4, 0).unwrap())],
        };
        let p = GlobalParams {
            flip_x: true,
            ..GlobalParams::IDENTITY
        };
        let b = apply_global(&f, &p, FlipConvention::MirrorAcrossAxis).objects[0].bbox;
        assert_eq!((b.cx, b.cy, b.yaw), (1.0, -3.0, -0.4));
        let b = apply_global(&f, &p, FlipConvention::NegateAxis).objects[0].bbox;
        assert_eq!((b.cx, b.cy), (-1.0, 3.0));
        assert_abs_diff_eq!(b.yaw, PI - 0.4, epsilon = 1e-15);
    }

    #[test]
    fn forced_instance_rotation() {
        let s = scene();
        let noise = [InstanceNoise {
            dyaw: PI / 20.0,
            dloc: [0.0; 3],
        }];
        let out = apply_instance_noise(&s, &noise).unwrap();
        let before = s.objects[0].bbox;
        let after = out.objects[0].bbox;
        assert_abs_diff_eq!(after.yaw, before.yaw + PI / 20.0, epsilon = 1e-15);
        // local coordinates of every owned point are unchanged
        for (p0, p1) in s.points.iter().zip(&out.points).take(10) {
            let a = before.to_local(p0.xyz());
            let b = after.to_local(p1.xyz());
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9);
            }
        }
        // background point untouched, bit for bit
        assert_eq!(s.points[10], out.points[10]);
    }

    #[test]
    fn disabled_instance_noise_is_identity() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(instance_augment(&s, &AugmentConfig::none(3), &mut rng), s);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            rot_range: [1.0, -1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
