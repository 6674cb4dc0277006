//! JSON-lines files of detections and ground truth.
//!
//! One box per line:
//! `{"frame_id":0,"class":1,"cx":..,"cy":..,"cz":..,"l":..,"w":..,"h":..,"yaw":..,"score":..,"iou_pred":..}`.
//! Ground-truth lines drop `score`/`iou_pred` and may add `num_points` and `marked_l2`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::pointcloud::GtObject;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    frame_id: u64,
    class: usize,
    cx: f64,
    cy: f64,
    cz: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
    score: Option<f64>,
    iou_pred: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GtRecord {
    frame_id: u64,
    class: usize,
    cx: f64,
    cy: f64,
    cz: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
    #[serde(default)]
    num_points: usize,
    #[serde(default)]
    marked_l2: bool,
}

fn to_box(r: (usize, [f64; 7])) -> Result<Box3D> {
    let (class, [cx, cy, cz, l, w, h, yaw]) = r;
    Box3D::new(cx, cy, cz, l, w, h, yaw, class)
}

fn for_each_line<T: for<'de> Deserialize<'de>>(
    path: &Path,
    mut f: impl FnMut(T) -> Result<()>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::parse(path, &loc, e.to_string()))?;
        f(rec).map_err(|e| match e {
            Error::Invalid(m) => Error::parse(path, &loc, m),
            other => other,
        })?;
    }
    Ok(())
}

/// Reads detections grouped by frame, frames ascending, boxes sorted by score.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionSet>> {
    let mut frames: BTreeMap<u64, Vec<Box3D>> = BTreeMap::new();
    for_each_line(path, |r: DetectionRecord| {
        let mut b = to_box((r.class, [r.cx, r.cy, r.cz, r.l, r.w, r.h, r.yaw]))?;
        b.score = r.score;
        b.iou_pred = r.iou_pred;
        b.validate()?;
        if let Some(iou) = b.iou_pred {
            if !iou.is_finite() {
                return Err(Error::invalid("iou_pred must be finite"));
            }
        }
        frames.entry(r.frame_id).or_default().push(b);
        Ok(())
    })?;
    Ok(frames
        .into_iter()
        .map(|(id, boxes)| {
            let mut d = DetectionSet::new(id, boxes);
            d.sort_by_score();
            d
        })
        .collect())
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes frames in ascending `frame_id` order, boxes in their set order.
pub fn write_detections(path: &Path, sets: &[DetectionSet]) -> Result<()> {
    let mut order: Vec<&DetectionSet> = sets.iter().collect();
    order.sort_by_key(|d| d.frame_id);
    let records = order.into_iter().flat_map(|d| {
        d.boxes.iter().map(move |b| DetectionRecord {
            frame_id: d.frame_id,
            class: b.class_id,
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
            score: b.score,
            iou_pred: b.iou_pred,
        })
    });
    write_lines(path, records)
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<u64, Vec<GtObject>>> {
    let mut frames: BTreeMap<u64, Vec<GtObject>> = BTreeMap::new();
    for_each_line(path, |r: GtRecord| {
        let b = to_box((r.class, [r.cx, r.cy, r.cz, r.l, r.w, r.h, r.yaw]))?;
        frames.entry(r.frame_id).or_default().push(GtObject {
            bbox: b,
            num_points: r.num_points,
            marked_l2: r.marked_l2,
        });
        Ok(())
    })?;
    Ok(frames)
}

pub fn write_ground_truth(path: &Path, frames: &BTreeMap<u64, Vec<GtObject>>) -> Result<()> {
    let records = frames.iter().flat_map(|(&frame_id, objs)| {
        objs.iter().map(move |o| GtRecord {
            frame_id,
            class: o.bbox.class_id,
            cx: o.bbox.cx,
            cy: o.bbox.cy,
            cz: o.bbox.cz,
            l: o.bbox.l,
            w: o.bbox.w,
            h: o.bbox.h,
            yaw: o.bbox.yaw,
            num_points: o.num_points,
            marked_l2: o.marked_l2,
        })
    });
    write_lines(path, records)
}

/// Ground truth as perfect detections: score 1, IoU estimate 1.
pub fn gt_as_detections(frames: &BTreeMap<u64, Vec<GtObject>>) -> Vec<DetectionSet> {
    frames
        .iter()
        .map(|(&id, objs)| {
            DetectionSet::new(
                id,
                objs.iter().map(|o| o.bbox.with_score(1.0).with_iou_pred(1.0)).collect(),
            )
        })
        .collect()
}
