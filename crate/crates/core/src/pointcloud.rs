//! Point clouds, annotated frames and their on-disk formats.
//!
//! Binary clouds are packed little-endian `f32` records `(x, y, z, intensity)`,
//! 16 bytes per point. CSV clouds carry the header `x,y,z,intensity`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(default)]
    pub intensity: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn with_xyz(self, p: [f64; 3]) -> Self {
        Point {
            x: p[0],
            y: p[1],
            z: p[2],
            ..self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

pub type PointCloud = Vec<Point>;

/// A ground-truth object with the metadata needed for difficulty assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: Box3D,
    pub num_points: usize,
    #[serde(default)]
    pub marked_l2: bool,
}

impl GtObject {
    pub fn new(bbox: Box3D) -> Self {
        GtObject {
            bbox,
            num_points: 0,
            marked_l2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub frame_id: u64,
    pub points: PointCloud,
    pub objects: Vec<GtObject>,
}

impl Frame {
    pub fn boxes(&self) -> impl Iterator<Item = &Box3D> + '_ {
        self.objects.iter().map(|o| &o.bbox)
    }

    /// Recounts the points inside every box (a point may count toward several boxes).
    pub fn recount_points(&mut self) {
        for obj in &mut self.objects {
            obj.num_points = self.points.iter().filter(|p| obj.bbox.contains(p.xyz())).count();
        }
    }
}

pub fn read_points_bin(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len % 16 != 0 {
        return Err(Error::parse(
            path,
            format!("byte {}", len - len % 16),
            "file length is not a multiple of the 16-byte point record",
        ));
    }
    let mut reader = BufReader::new(file);
    let mut points = Vec::with_capacity((len / 16) as usize);
    let mut rec = [0f32; 4];
    for i in 0..len / 16 {
        reader
            .read_f32_into::<LittleEndian>(&mut rec)
            .map_err(|e| Error::io(path, e))?;
        let p = Point::new(rec[0] as f64, rec[1] as f64, rec[2] as f64, rec[3] as f64);
        if !p.is_finite() {
            return Err(Error::parse(path, format!("byte {}", i * 16), "non-finite coordinate"));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_points_bin(path: &Path, points: &[Point]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            w.write_f32::<LittleEndian>(v as f32)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points_csv(path: &Path) -> Result<PointCloud> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut points = Vec::new();
    for (i, rec) in rdr.deserialize::<Point>().enumerate() {
        // header is line 1
        let p = rec.map_err(|e| Error::parse(path, format!("line {}", i + 2), e.to_string()))?;
        if !p.is_finite() {
            return Err(Error::parse(path, format!("line {}", i + 2), "non-finite coordinate"));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_points_csv(path: &Path, points: &[Point]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in points {
        wtr.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads either format, chosen by extension (`.csv`, otherwise binary).
pub fn read_points(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_points_csv(path),
        _ => read_points_bin(path),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, "csv", format!("{other:?}")),
    }
}

/// Reads a whole file, mapping failures to [`Error::Io`].
pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![Point::new(1.5, -2.25, 0.125, 0.5), Point::new(0.0, 3.0, -1.0, 0.0)];
        let bin = dir.path().join("a.bin");
        write_points_bin(&bin, &pts).unwrap();
        assert_eq!(std::fs::metadata(&bin).unwrap().len(), 32);
        assert_eq!(read_points(&bin).unwrap(), pts);
        let csv = dir.path().join("a.csv");
        write_points_csv(&csv, &pts).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("x,y,z,intensity\n"));
        assert_eq!(read_points(&csv).unwrap(), pts);
    }

    #[test]
    fn truncated_bin_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, [0u8; 20]).unwrap();
        let err = read_points_bin(&p).unwrap_err();
        assert!(err.to_string().contains("byte 16"), "{err}");
    }

    #[test]
    fn bad_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x,y,z,intensity\n1,2,3,4\n1,oops,3,4\n").unwrap();
        let err = read_points_csv(&p).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
