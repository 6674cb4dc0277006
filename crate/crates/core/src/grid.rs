//! Detection-range grids, voxelization and feature-extractor shape planning.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::Point;

/// Tolerance on the range / voxel-size ratio being integral.
const INTEGRAL_TOL: f64 = 1e-6;

pub const DEFAULT_MAX_OBJECTS: usize = 500;

fn default_max_objects() -> usize {
    DEFAULT_MAX_OBJECTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    /// `None` means unlimited.
    #[serde(default)]
    pub max_points_per_voxel: Option<usize>,
    /// `None` means unlimited.
    #[serde(default)]
    pub max_voxels: Option<usize>,
    pub num_classes: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            let (lo, hi, s) = (self.range_min[k], self.range_max[k], self.voxel_size[k]);
            if !(lo.is_finite() && hi.is_finite() && s.is_finite()) {
                return Err(Error::invalid("grid config has non-finite values"));
            }
            if hi <= lo {
                return Err(Error::invalid(format!("axis {k}: range_max {hi} <= range_min {lo}")));
            }
            if s <= 0.0 {
                return Err(Error::invalid(format!("axis {k}: voxel size {s} must be positive")));
            }
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        if matches!(self.max_points_per_voxel, Some(0)) {
            return Err(Error::invalid("max_points_per_voxel must be >= 1"));
        }
        grid_dims(self).map(|_| ())
    }
}

/// Voxel counts per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

/// Exact voxel counts per axis; errors unless each extent is an integral number of voxels.
pub fn grid_dims(cfg: &GridConfig) -> Result<GridDims> {
    let mut out = [0usize; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        let ratio = (cfg.range_max[k] - cfg.range_min[k]) / cfg.voxel_size[k];
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > INTEGRAL_TOL {
            return Err(Error::invalid(format!(
                "axis {k}: extent / voxel size = {ratio} is not integral"
            )));
        }
        *slot = n as usize;
    }
    Ok(GridDims {
        x: out[0],
        y: out[1],
        z: out[2],
    })
}

/// BEV pseudo-image shape after a feature extractor with the same stride on all axes;
/// the remaining z slabs are folded into channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoImageShape {
    pub width: usize,
    pub height: usize,
    pub z_slabs: usize,
}

pub fn pseudo_image_shape(cfg: &GridConfig, stride: usize) -> Result<PseudoImageShape> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let d = grid_dims(cfg)?;
    for (name, n) in [("x", d.x), ("y", d.y), ("z", d.z)] {
        if n % stride != 0 {
            return Err(Error::invalid(format!(
                "{name} grid dimension {n} is not divisible by stride {stride}"
            )));
        }
    }
    Ok(PseudoImageShape {
        width: d.x / stride,
        height: d.y / stride,
        z_slabs: d.z / stride,
    })
}

/// Continuous grid coordinates in voxel units.
pub fn world_to_grid(p: [f64; 3], cfg: &GridConfig) -> [f64; 3] {
    std::array::from_fn(|k| (p[k] - cfg.range_min[k]) / cfg.voxel_size[k])
}

pub fn grid_to_world(g: [f64; 3], cfg: &GridConfig) -> [f64; 3] {
    std::array::from_fn(|k| cfg.range_min[k] + g[k] * cfg.voxel_size[k])
}

/// Which points survive when a voxel or voxel-count cap binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum CapPolicy {
    #[default]
    InputOrder,
    /// Visit points in a seeded random permutation.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoxelSet {
    pub coords: Vec<[usize; 3]>,
    /// Mean `(x, y, z, intensity)` of the points kept in each voxel.
    pub features: Vec<[f64; 4]>,
    pub counts: Vec<usize>,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Voxel index of a point, or `None` if it lies outside `[range_min, range_max)`.
pub fn voxel_of(p: &Point, cfg: &GridConfig, dims: &GridDims) -> Option<[usize; 3]> {
    let xyz = p.xyz();
    let n = [dims.x, dims.y, dims.z];
    let mut idx = [0usize; 3];
    for k in 0..3 {
        if !(xyz[k] >= cfg.range_min[k] && xyz[k] < cfg.range_max[k]) {
            return None;
        }
        let g = ((xyz[k] - cfg.range_min[k]) / cfg.voxel_size[k]).floor() as usize;
        // rounding can push a point just below range_max onto index n
        idx[k] = g.min(n[k] - 1);
    }
    Some(idx)
}

pub fn voxelize(points: &[Point], cfg: &GridConfig) -> Result<VoxelSet> {
    voxelize_with(points, cfg, CapPolicy::InputOrder)
}

/// Mean-feature voxelization. Output voxels are sorted by `(ix, iy, iz)`.
pub fn voxelize_with(points: &[Point], cfg: &GridConfig, policy: CapPolicy) -> Result<VoxelSet> {
    cfg.validate()?;
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("point {i} is not finite")));
    }
    let dims = grid_dims(cfg)?;
    let order: Vec<usize> = match policy {
        CapPolicy::InputOrder => (0..points.len()).collect(),
        CapPolicy::Shuffled { seed } => {
            let mut o: Vec<usize> = (0..points.len()).collect();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            o
        }
    };

    let max_pts = cfg.max_points_per_voxel.unwrap_or(usize::MAX);
    let max_vox = cfg.max_voxels.unwrap_or(usize::MAX);
    let mut slot_of: HashMap<[usize; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut sums: Vec<[f64; 4]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();

    for &i in &order {
        let p = &points[i];
        let Some(c) = voxel_of(p, cfg, &dims) else {
            continue;
        };
        let slot = match slot_of.get(&c) {
            Some(&s) => s,
            None => {
                if coords.len() >= max_vox {
                    continue;
                }
                slot_of.insert(c, coords.len());
                coords.push(c);
                sums.push([0.0; 4]);
                counts.push(0);
                coords.len() - 1
            }
        };
        if counts[slot] >= max_pts {
            continue;
        }
        let s = &mut sums[slot];
        s[0] += p.x;
        s[1] += p.y;
        s[2] += p.z;
        s[3] += p.intensity;
        counts[slot] += 1;
    }

    let mut perm: Vec<usize> = (0..coords.len()).collect();
    perm.sort_unstable_by_key(|&i| coords[i]);
    let mut out = VoxelSet::default();
    for i in perm {
        let n = counts[i] as f64;
        out.coords.push(coords[i]);
        out.features.push(sums[i].map(|v| v / n));
        out.counts.push(counts[i]);
    }
    Ok(out)
}
