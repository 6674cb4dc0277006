//! Pipeline configuration files and named presets.
//!
//! Presets carry only the published settings of each detector variant. Sections that
//! were not published (augmentation, evaluation thresholds, TTA) stay empty and must be
//! supplied in a config file when a command needs them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::decode::RescoreParams;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::grid::{pseudo_image_shape, GridConfig, DEFAULT_MAX_OBJECTS};
use crate::losses::LossWeights;
use crate::pointcloud::read_to_string;
use crate::tta::TtaGrid;

pub const PRESETS: [&str; 3] = ["afdetv2-lite", "afdetv2", "nuscenes"];

/// Output stride of the feature extractor.
pub const DEFAULT_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stride: usize,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescore: Option<RescoreParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tta: Option<TtaGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
}

fn waymo_grid(range_max: [f64; 3], voxel_size: [f64; 3]) -> GridConfig {
    GridConfig {
        range_min: [-range_max[0], -range_max[1], -2.0],
        range_max,
        voxel_size,
        max_points_per_voxel: Some(5),
        max_voxels: None,
        num_classes: 3,
        max_objects: DEFAULT_MAX_OBJECTS,
    }
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let waymo = |grid| PipelineConfig {
            stride: DEFAULT_STRIDE,
            grid,
            rescore: Some(RescoreParams::waymo()),
            loss_weights: Some(LossWeights::uniform(2.0)),
            augment: None,
            tta: None,
            eval: None,
        };
        match name {
            "afdetv2-lite" => Ok(waymo(waymo_grid([75.2, 75.2, 4.0], [0.1, 0.1, 0.15]))),
            "afdetv2" => Ok(waymo(waymo_grid([75.2, 73.6, 4.0], [0.1, 0.08, 0.15]))),
            "nuscenes" => Ok(PipelineConfig {
                stride: DEFAULT_STRIDE,
                grid: GridConfig {
                    range_min: [-54.0, -54.0, -5.0],
                    range_max: [54.0, 54.0, 3.0],
                    voxel_size: [0.075, 0.075, 0.2],
                    max_points_per_voxel: Some(10),
                    max_voxels: None,
                    num_classes: 10,
                    max_objects: DEFAULT_MAX_OBJECTS,
                },
                rescore: None,
                loss_weights: Some(LossWeights::uniform(2.0)),
                augment: None,
                tta: None,
                eval: None,
            }),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        pseudo_image_shape(&self.grid, self.stride)?;
        let k = self.grid.num_classes;
        if let Some(r) = &self.rescore {
            r.validate()?;
            if r.num_classes() != k {
                return Err(Error::invalid(format!(
                    "rescore has {} classes, grid has {k}",
                    r.num_classes()
                )));
            }
        }
        if let Some(w) = &self.loss_weights {
            w.validate()?;
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if let Some(t) = &self.tta {
            t.transforms()?;
        }
        if let Some(e) = &self.eval {
            e.validate()?;
            if e.num_classes() != k {
                return Err(Error::invalid(format!(
                    "eval has {} class thresholds, grid has {k}",
                    e.num_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let loc = match e.span() {
                Some(span) => format!("line {}", text[..span.start].lines().count().max(1)),
                None => "toml".to_string(),
            };
            Error::parse(origin, loc, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_to_string(path)?, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}
