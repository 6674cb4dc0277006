use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use voxdet::augment::{augment_scene, build_gt_database, AugmentConfig, GtDatabase};
use voxdet::config::PipelineConfig;
use voxdet::decode::{class_nms, decode_frame, rescore, DetectionSet, HeadOutput, RescoreParams};
use voxdet::detio::{read_detections, read_ground_truth, write_detections};
use voxdet::encode::{encode_targets, TargetMaps};
use voxdet::eval::{evaluate, EvalConfig};
use voxdet::grid::{grid_dims, pseudo_image_shape};
use voxdet::sim::{
    ablate_alpha, calibrate_latent, frame_rng, generate_scenes, synth_detections, write_ablation_csv, NoiseSpec,
    SceneSpec,
};
use voxdet::tta::{fuse_detections, FusionMode, DEFAULT_FUSE_IOU};
use voxdet::{Error, Result};

mod frames;

#[derive(Parser)]
#[command(name = "voxdet", version, about = "Voxel-based anchor-free 3D detection toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML pipeline config; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: afdetv2-lite, afdetv2 or nuscenes.
    #[arg(long, global = true, default_value = "afdetv2-lite")]
    preset: String,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Output does not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode ground truth into per-frame target maps.
    Encode {
        #[arg(long)]
        gt: PathBuf,
        /// Output directory of <frame_id>.vxtm files.
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSON dump next to each container.
        #[arg(long)]
        json: bool,
    },
    /// Decode head maps (stored as target containers) into detections.
    Decode {
        /// Directory of <frame_id>.vxtm files.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace scores by the IoU-aware fused score.
    Rescore {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Same alpha for every class instead of the configured ones.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Class-specific rotated NMS.
    Nms {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Same IoU threshold for every class instead of the configured ones.
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Fuse detection files of the same frames (TTA or ensemble passes).
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FUSE_IOU)]
        fuse_iou: f64,
        #[arg(long, value_enum, default_value = "score-weighted")]
        mode: FusionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// GT sampling, global and per-instance augmentation of a frame directory.
    Augment {
        #[arg(long)]
        frames: PathBuf,
        /// Existing object database; built from --frames when absent.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Persist the database used.
        #[arg(long)]
        save_db: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic frames.
    Simulate {
        /// Scene spec JSON; built-in defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the rescoring alpha over simulated detections.
    Ablate {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        alphas: Vec<f64>,
        /// Noise spec JSON; built-in defaults when absent.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Scene spec used for false-positive dimensions.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Estimate the score latent reference from the frames.
        #[arg(long)]
        calibrate: bool,
        /// Also write the simulated detections.
        #[arg(long)]
        dump_dets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP/APH per class and difficulty.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PR-curve CSV; defaults to the report path with a `.pr.csv` extension.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Print grid and pseudo-image shapes of the configuration.
    PlanShapes,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FusionArg {
    ScoreWeighted,
    Unweighted,
}

impl From<FusionArg> for FusionMode {
    fn from(a: FusionArg) -> Self {
        match a {
            FusionArg::ScoreWeighted => FusionMode::ScoreWeighted,
            FusionArg::Unweighted => FusionMode::Unweighted,
        }
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    match &g.config {
        Some(path) => PipelineConfig::load(path),
        None => PipelineConfig::preset(&g.preset),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {}", e.line()),
        message: e.to_string(),
    })
}

fn rescore_params(cfg: &PipelineConfig) -> Result<RescoreParams> {
    cfg.rescore
        .clone()
        .ok_or_else(|| Error::Invalid("configuration has no [rescore] section".into()))
}

fn eval_config(cfg: &PipelineConfig) -> EvalConfig {
    cfg.eval.clone().unwrap_or_else(|| {
        log::info!("no [eval] section, using IoU thresholds 0.7/0.5/0.5");
        EvalConfig::default()
    })
}

fn vxtm_path(dir: &Path, frame_id: u64) -> PathBuf {
    dir.join(format!("{frame_id:06}.vxtm"))
}

fn list_vxtm(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.extension().and_then(|s| s.to_str()) != Some("vxtm") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.clone(),
                location: "file name".into(),
                message: "expected <frame_id>.vxtm".into(),
            })?;
        out.push((id, path));
    }
    out.sort();
    Ok(out)
}

fn map_sets(
    sets: &[DetectionSet],
    f: impl Fn(&DetectionSet) -> Result<DetectionSet> + Sync + Send,
) -> Result<Vec<DetectionSet>> {
    sets.par_iter().map(f).collect()
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::PlanShapes => {
            let d = grid_dims(&cfg.grid)?;
            let s = pseudo_image_shape(&cfg.grid, cfg.stride)?;
            println!("grid {}x{}x{}", d.x, d.y, d.z);
            println!(
                "pseudo-image {}x{} with {} z-slabs at stride {}",
                s.width, s.height, s.z_slabs, cfg.stride
            );
        }
        Command::Encode { gt, out, json } => {
            let frames = read_ground_truth(&gt)?;
            frames::ensure_dir(&out)?;
            let items: Vec<_> = frames.into_iter().collect();
            items.par_iter().try_for_each(|(id, objs)| {
                let boxes: Vec<_> = objs.iter().map(|o| o.bbox).collect();
                let t = encode_targets(&boxes, &cfg.grid, cfg.stride)?;
                let path = vxtm_path(&out, *id);
                t.write_bin(&path)?;
                if json {
                    t.write_json(&path.with_extension("json"))?;
                }
                Ok::<_, Error>(())
            })?;
        }
        Command::Decode { targets, out } => {
            let params = rescore_params(&cfg)?;
            let files = list_vxtm(&targets)?;
            let sets = files
                .par_iter()
                .map(|(id, path)| {
                    let head = HeadOutput::from_targets(&TargetMaps::read_bin(path)?);
                    decode_frame(&head, &cfg.grid, cfg.stride, &params, *id)
                })
                .collect::<Result<Vec<_>>>()?;
            write_detections(&out, &sets)?;
        }
        Command::Rescore { dets, out, alpha } => {
            let mut params = rescore_params(&cfg)?;
            if let Some(a) = alpha {
                params = params.with_alpha(a);
            }
            params.validate()?;
            let sets = map_sets(&read_detections(&dets)?, |d| rescore(d, &params))?;
            write_detections(&out, &sets)?;
        }
        Command::Nms { dets, out, iou } => {
            let mut params = rescore_params(&cfg)?;
            if let Some(t) = iou {
                params.nms_iou.iter_mut().for_each(|x| *x = t);
            }
            params.validate()?;
            let sets = map_sets(&read_detections(&dets)?, |d| class_nms(d, &params))?;
            write_detections(&out, &sets)?;
        }
        Command::Fuse {
            inputs,
            fuse_iou,
            mode,
            out,
        } => {
            let passes = inputs
                .iter()
                .map(|p| read_detections(p))
                .collect::<Result<Vec<_>>>()?;
            let mut ids: Vec<u64> = passes.iter().flatten().map(|d| d.frame_id).collect();
            ids.sort_unstable();
            ids.dedup();
            let sets = ids
                .par_iter()
                .map(|&id| {
                    let per_pass: Vec<DetectionSet> = passes
                        .iter()
                        .map(|pass| {
                            pass.iter()
                                .find(|d| d.frame_id == id)
                                .cloned()
                                .unwrap_or_else(|| DetectionSet::new(id, Vec::new()))
                        })
                        .collect();
                    fuse_detections(&per_pass, fuse_iou, mode.into())
                })
                .collect::<Result<Vec<_>>>()?;
            write_detections(&out, &sets)?;
        }
        Command::Augment {
            frames: dir,
            db,
            save_db,
            out,
        } => {
            let aug = cfg.augment.clone().unwrap_or_else(|| {
                log::info!("no [augment] section, using default augmentation settings");
                AugmentConfig::default()
            });
            let input = frames::read_frames(&dir)?;
            let database = match db {
                Some(p) => GtDatabase::load(&p)?,
                None => build_gt_database(&input, cfg.grid.num_classes)?,
            };
            if let Some(p) = save_db {
                database.save(&p)?;
            }
            let seed = g.seed.unwrap_or(0);
            let augmented = input
                .par_iter()
                .map(|f| augment_scene(Some(&database), f, &aug, &mut frame_rng(seed, f.frame_id)))
                .collect::<Result<Vec<_>>>()?;
            frames::write_frames(&out, &augmented)?;
        }
        Command::Simulate { spec, count, out } => {
            let mut spec: SceneSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SceneSpec::default(),
            };
            if let Some(s) = g.seed {
                spec.seed = s;
            }
            let scenes = generate_scenes(&spec, count)?;
            frames::write_frames(&out, &scenes)?;
        }
        Command::Ablate {
            frames: dir,
            alphas,
            noise,
            spec,
            calibrate,
            dump_dets,
            out,
        } => {
            let mut noise: NoiseSpec = match noise {
                Some(p) => read_json(&p)?,
                None => NoiseSpec::default(),
            };
            if let Some(s) = g.seed {
                noise.seed = s;
            }
            let scene: SceneSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SceneSpec::default(),
            };
            let input = frames::read_frames(&dir)?;
            if calibrate {
                noise.latent_ref = calibrate_latent(&input, &noise);
                log::info!("latent reference {:?}", noise.latent_ref);
            }
            let dets = synth_detections(&input, &scene, &noise)?;
            if let Some(p) = dump_dets {
                write_detections(&p, &dets)?;
            }
            let gt = input.iter().map(|f| (f.frame_id, f.objects.clone())).collect();
            let rows = ablate_alpha(&dets, &gt, &alphas, &rescore_params(&cfg)?, &eval_config(&cfg))?;
            write_ablation_csv(&rows, &out)?;
        }
        Command::Eval { dets, gt, out, pr_csv } => {
            let report = evaluate(&read_detections(&dets)?, &read_ground_truth(&gt)?, &eval_config(&cfg))?;
            report.write_json(&out)?;
            report.write_pr_csv(&pr_csv.unwrap_or_else(|| out.with_extension("pr.csv")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
