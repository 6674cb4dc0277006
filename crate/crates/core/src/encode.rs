//! Ground-truth boxes to per-pixel head targets.
//!
//! Maps are laid out class-major, row-major: `(k * height + row) * width + col`,
//! with rows along world +y and columns along world +x.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_corners, Box3D};
use crate::grid::{pseudo_image_shape, world_to_grid, GridConfig};

/// Smallest splat radius for the heatmap and keypoint heads, in output pixels.
pub const MIN_GAUSSIAN_RADIUS: f64 = 2.0;

/// Overlap the corner-perturbation radius formula guarantees.
pub const GAUSSIAN_MIN_OVERLAP: f64 = 0.7;

const MAGIC: &[u8; 4] = b"VXTM";
const VERSION: u32 = 1;

/// The three corner-perturbation radii of a `l_pix x w_pix` box at the given overlap.
///
/// These follow the widely used closed form from the corner-keypoint detector line of
/// work; each is the larger root of `r^2 - b r + a c = 0` for that case's `(a, b, c)`.
pub fn gaussian_radius_candidates(l_pix: f64, w_pix: f64, min_overlap: f64) -> [f64; 3] {
    let (h, w, o) = (l_pix, w_pix, min_overlap);

    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    [r1, r2, r3]
}

/// Splat radius in output pixels, floored at [`MIN_GAUSSIAN_RADIUS`].
pub fn gaussian_radius(l_pix: f64, w_pix: f64) -> f64 {
    let [r1, r2, r3] = gaussian_radius_candidates(l_pix, w_pix, GAUSSIAN_MIN_OVERLAP);
    r1.min(r2).min(r3).max(MIN_GAUSSIAN_RADIUS)
}

/// Integer radius used when splatting: the truncated [`gaussian_radius`].
pub fn splat_radius(l_pix: f64, w_pix: f64) -> usize {
    gaussian_radius(l_pix, w_pix).floor() as usize
}

/// Keypoint splats use half the heatmap radius, at least one pixel.
pub fn keypoint_radius(radius: usize) -> usize {
    ((radius as f64 / 2.0).round() as usize).max(1)
}

/// Max-combines a Gaussian with `sigma = radius / 3` into one `height x width` channel.
/// The window is clipped at the borders; the center pixel becomes exactly 1.
pub fn draw_gaussian(channel: &mut [f64], height: usize, width: usize, row: usize, col: usize, radius: usize) {
    debug_assert_eq!(channel.len(), height * width);
    debug_assert!(row < height && col < width);
    let r = radius.max(1);
    let sigma = r as f64 / 3.0;
    let denom = 2.0 * sigma * sigma;
    let r0 = row.saturating_sub(r);
    let r1 = (row + r).min(height - 1);
    let c0 = col.saturating_sub(r);
    let c1 = (col + r).min(width - 1);
    for y in r0..=r1 {
        let dy = y as f64 - row as f64;
        for x in c0..=c1 {
            let dx = x as f64 - col as f64;
            let v = (-(dx * dx + dy * dy) / denom).exp();
            let cell = &mut channel[y * width + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Maps an IoU in `[0, 1]` to the regression target of the IoU branch.
pub fn iou_target(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(-1.0, 1.0)
}

/// Inverse of [`iou_target`] on its unclamped range, clamped back into `[0, 1]`.
pub fn iou_from_target(y: f64) -> f64 {
    ((y + 0.5) / 2.0).clamp(0.0, 1.0)
}

/// Every training target for one frame.
///
/// Per-object arrays are padded to `capacity` slots; `mask` flags the live ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMaps {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub capacity: usize,
    pub heatmap: Vec<f64>,
    pub keypoint_map: Vec<f64>,
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub mask: Vec<bool>,
    /// Position of the slot's box in the list passed to the encoder.
    pub source: Vec<usize>,
    /// Sub-pixel `(dx, dy)` of the center within its output pixel.
    pub offset: Vec<[f64; 2]>,
    pub z: Vec<f64>,
    pub size: Vec<[f64; 3]>,
    /// `(sin yaw, cos yaw)`.
    pub orientation: Vec<[f64; 2]>,
    pub iou_target: Vec<f64>,
}

impl TargetMaps {
    pub fn empty(num_classes: usize, height: usize, width: usize, capacity: usize) -> Self {
        let hw = height * width;
        TargetMaps {
            num_classes,
            height,
            width,
            capacity,
            heatmap: vec![0.0; num_classes * hw],
            keypoint_map: vec![0.0; num_classes * hw],
            indices: vec![0; capacity],
            classes: vec![0; capacity],
            mask: vec![false; capacity],
            source: vec![0; capacity],
            offset: vec![[0.0; 2]; capacity],
            z: vec![0.0; capacity],
            size: vec![[0.0; 3]; capacity],
            orientation: vec![[0.0; 2]; capacity],
            iou_target: vec![0.0; capacity],
        }
    }

    pub fn num_objects(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn channel(&self, map: &[f64], class: usize) -> std::ops::Range<usize> {
        debug_assert_eq!(map.len(), self.num_classes * self.height * self.width);
        let hw = self.height * self.width;
        class * hw..(class + 1) * hw
    }

    /// Overwrites IoU targets from per-box IoUs, indexed like the encoder's input list.
    pub fn assign_iou_targets(&mut self, ious: &[f64]) -> Result<()> {
        for slot in 0..self.capacity {
            if !self.mask[slot] {
                continue;
            }
            let src = self.source[slot];
            let iou = *ious.get(src).ok_or(Error::ShapeMismatch {
                expected: src + 1,
                actual: ious.len(),
            })?;
            self.iou_target[slot] = iou_target(iou);
        }
        Ok(())
    }

    pub fn write_bin(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        for n in [self.num_classes, self.height, self.width, self.capacity] {
            w.write_u32::<LittleEndian>(n as u32)?;
        }
        for v in self.heatmap.iter().chain(&self.keypoint_map) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for i in 0..self.capacity {
            w.write_u64::<LittleEndian>(self.indices[i] as u64)?;
            w.write_u32::<LittleEndian>(self.classes[i] as u32)?;
            w.write_u8(self.mask[i] as u8)?;
            w.write_u32::<LittleEndian>(self.source[i] as u32)?;
            let vals = self.offset[i]
                .iter()
                .chain(std::iter::once(&self.z[i]))
                .chain(&self.size[i])
                .chain(&self.orientation[i])
                .chain(std::iter::once(&self.iou_target[i]));
            for v in vals {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_bin(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = CountingReader {
            inner: BufReader::new(file),
            pos: 0,
        };
        Self::read_from(&mut r).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::InvalidData => {
                Error::parse(path, format!("byte {}", r.pos), e.to_string())
            }
            _ => Error::io(path, e),
        })
    }

    fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a target-map container"));
        }
        if r.read_u32::<LittleEndian>()? != VERSION {
            return Err(bad("unsupported container version"));
        }
        let mut hdr = [0usize; 4];
        for h in &mut hdr {
            *h = r.read_u32::<LittleEndian>()? as usize;
        }
        let [k, height, width, cap] = hdr;
        let n_map = k
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&v| v <= 1 << 28)
            .ok_or_else(|| bad("map dimensions too large"))?;
        let mut t = TargetMaps::empty(k, height, width, cap);
        r.read_f64_into::<LittleEndian>(&mut t.heatmap)?;
        r.read_f64_into::<LittleEndian>(&mut t.keypoint_map)?;
        debug_assert_eq!(t.heatmap.len(), n_map);
        for i in 0..cap {
            t.indices[i] = r.read_u64::<LittleEndian>()? as usize;
            t.classes[i] = r.read_u32::<LittleEndian>()? as usize;
            t.mask[i] = r.read_u8()? != 0;
            t.source[i] = r.read_u32::<LittleEndian>()? as usize;
            let mut v = [0f64; 9];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            t.offset[i] = [v[0], v[1]];
            t.z[i] = v[2];
            t.size[i] = [v[3], v[4], v[5]];
            t.orientation[i] = [v[6], v[7]];
            t.iou_target[i] = v[8];
            if t.mask[i] && (t.indices[i] >= height * width || t.classes[i] >= k) {
                return Err(bad("object slot out of range"));
            }
        }
        Ok(t)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

/// Output-pixel position of a world point: `(col, row, fractional x, fractional y)`.
fn pixel_of(x: f64, y: f64, cfg: &GridConfig, stride: usize) -> ([f64; 2], [i64; 2]) {
    let g = world_to_grid([x, y, 0.0], cfg);
    let px = [g[0] / stride as f64, g[1] / stride as f64];
    (px, [px[0].floor() as i64, px[1].floor() as i64])
}

pub fn encode_targets(boxes: &[Box3D], cfg: &GridConfig, stride: usize) -> Result<TargetMaps> {
    cfg.validate()?;
    let shape = pseudo_image_shape(cfg, stride)?;
    let (height, width) = (shape.height, shape.width);
    let k = cfg.num_classes;
    let mut t = TargetMaps::empty(k, height, width, cfg.max_objects);

    let in_map = |p: [i64; 2]| p[0] >= 0 && p[1] >= 0 && (p[0] as usize) < width && (p[1] as usize) < height;

    let mut live: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        b.validate()?;
        if b.class_id >= k {
            return Err(Error::invalid(format!(
                "box {i} has class {} but only {k} classes are configured",
                b.class_id
            )));
        }
        if in_map(pixel_of(b.cx, b.cy, cfg, stride).1) {
            live.push(i);
        }
    }
    if live.len() > cfg.max_objects {
        let mut by_area = live.clone();
        by_area.sort_by(|&a, &b| boxes[b].bev_area().total_cmp(&boxes[a].bev_area()));
        by_area.truncate(cfg.max_objects);
        by_area.sort_unstable();
        live = by_area;
    }

    let pix_l = cfg.voxel_size[0] * stride as f64;
    let pix_w = cfg.voxel_size[1] * stride as f64;
    for (slot, &i) in live.iter().enumerate() {
        let b = &boxes[i];
        let (px, [col, row]) = pixel_of(b.cx, b.cy, cfg, stride);
        let (col, row) = (col as usize, row as usize);
        // dims measured in output pixels along x and y respectively
        let radius = splat_radius(b.l / pix_l, b.w / pix_w);
        let ch = t.channel(&t.heatmap, b.class_id);
        draw_gaussian(&mut t.heatmap[ch.clone()], height, width, row, col, radius);

        let kr = keypoint_radius(radius);
        let corners = bev_corners(b);
        let keypoints = corners
            .vertices()
            .iter()
            .copied()
            .chain(std::iter::once([b.cx, b.cy]));
        for [x, y] in keypoints {
            let (_, p) = pixel_of(x, y, cfg, stride);
            if in_map(p) {
                draw_gaussian(&mut t.keypoint_map[ch.clone()], height, width, p[1] as usize, p[0] as usize, kr);
            }
        }

        let (s, c) = b.yaw.sin_cos();
        t.indices[slot] = row * width + col;
        t.classes[slot] = b.class_id;
        t.mask[slot] = true;
        t.source[slot] = i;
        t.offset[slot] = [px[0] - col as f64, px[1] - row as f64];
        t.z[slot] = b.cz;
        t.size[slot] = [b.l, b.w, b.h];
        t.orientation[slot] = [s, c];
        // a ground-truth box overlaps itself perfectly
        t.iou_target[slot] = iou_target(1.0);
    }
    Ok(t)
}
