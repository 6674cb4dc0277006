//! Frame directories: `gt.jsonl` plus one `points/<frame_id>.bin` per frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use voxdet::detio::{read_ground_truth, write_ground_truth};
use voxdet::pointcloud::{read_points_bin, write_points_bin, Frame};
use voxdet::{Error, Result};

pub const GT_FILE: &str = "gt.jsonl";

fn points_path(dir: &Path, frame_id: u64) -> PathBuf {
    dir.join("points").join(format!("{frame_id:06}.bin"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Frame ids from the point files, so frames without objects are kept.
fn frame_ids(dir: &Path) -> Result<Vec<u64>> {
    let pdir = dir.join("points");
    let entries = std::fs::read_dir(&pdir).map_err(|source| Error::Io {
        path: pdir.clone(),
        source,
    })?;
    let mut ids = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| Error::Io {
                path: pdir.clone(),
                source,
            })?
            .path();
        if path.extension().and_then(|s| s.to_str()) != Some("bin") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id = stem.parse::<u64>().map_err(|_| Error::Parse {
            path: path.clone(),
            location: "file name".into(),
            message: "expected <frame_id>.bin".into(),
        })?;
        ids.push(id);
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut gt = read_ground_truth(&dir.join(GT_FILE))?;
    frame_ids(dir)?
        .into_iter()
        .map(|id| {
            Ok(Frame {
                frame_id: id,
                points: read_points_bin(&points_path(dir, id))?,
                objects: gt.remove(&id).unwrap_or_default(),
            })
        })
        .collect()
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    create_dir(&dir.join("points"))?;
    let mut gt = BTreeMap::new();
    for f in frames {
        write_points_bin(&points_path(dir, f.frame_id), &f.points)?;
        gt.insert(f.frame_id, f.objects.clone());
    }
    write_ground_truth(&dir.join(GT_FILE), &gt)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    create_dir(dir)
}
