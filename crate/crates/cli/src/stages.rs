//! Stage implementations and the sequential runner.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use panosplat::fusion::{run_denoise_round, window_schedule};
use panosplat::hooks::DepthEstimator;
use panosplat::io::{
    read_embedding, read_pfm, read_png, read_poses, read_scene_ply, write_pfm, write_png, write_point_cloud_ply,
    write_poses, write_scene_ply, BitDepth,
};
use panosplat::losses::{image_metrics, Embedder, Embedding, ImageMetrics};
use panosplat::panorama::{equirect_to_perspective, sliding_schedule, CameraIntrinsics, EquirectImage, PerspectiveView};
use panosplat::pointinit::{backproject, default_voxel_size, gaussians_from_cloud, merge_clouds, SeedOptions};
use panosplat::rasterizer::render;
use panosplat::refine::{run_refinement, RefineSettings};
use panosplat::scene::{CameraPose, SceneModel};
use panosplat::trainer::{train_with, TrainContext};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::manifest::{hash_files, list_outputs, record_key, Manifest, MANIFEST_NAME};
use crate::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Refine,
    Slide,
    Init,
    Train,
    Render,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Refine,
        Stage::Slide,
        Stage::Init,
        Stage::Train,
        Stage::Render,
        Stage::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Refine => "refine",
            Stage::Slide => "slide",
            Stage::Init => "init",
            Stage::Train => "train",
            Stage::Render => "render",
            Stage::Metrics => "metrics",
        }
    }

    /// Stages run by `all`: refinement only with a generator, slicing only
    /// when there is a panorama to slice.
    pub fn default_chain(cfg: &PipelineConfig) -> Vec<Stage> {
        let generate = cfg.hooks.generator.is_some();
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Refine => generate,
                Stage::Slide => generate || cfg.paths.panorama.is_some() || cfg.paths.views_dir.is_none(),
                _ => true,
            })
            .collect()
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::User(format!("unknown stage \"{s}\"")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "done",
            StageStatus::UpToDate => "up to date",
        })
    }
}

/// Camera list written next to sliced views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<CameraEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub index: usize,
    pub image: String,
    pub yaw_deg: f64,
    pub pose: CameraPose,
}

pub const CAMERAS_NAME: &str = "cameras.json";

fn view_name(i: usize) -> String {
    format!("view_{i:02}.png")
}

fn depth_name(i: usize) -> String {
    format!("depth_{i:02}.pfm")
}

fn io_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Internal(format!("{}: {e}", path.display()))
}

/// Runs `stages` in pipeline order. An empty list touches nothing.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    stages: &[Stage],
    force: bool,
) -> Result<Vec<(Stage, StageStatus)>, PipelineError> {
    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    let mut done = Vec::with_capacity(order.len());
    for stage in order {
        let runner = Runner::new(cfg, stage);
        done.push((stage, runner.run(force)?));
    }
    Ok(done)
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    stage: Stage,
    root: PathBuf,
    dir: PathBuf,
}

/// What a stage consumes: files to hash and the stage-specific slice of the
/// configuration.
struct Plan {
    inputs: Vec<PathBuf>,
    config: serde_json::Value,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig, stage: Stage) -> Self {
        let root = cfg.paths.output_dir.clone();
        let dir = root.join(stage.name());
        Self { cfg, stage, root, dir }
    }

    fn run(&self, force: bool) -> Result<StageStatus, PipelineError> {
        let plan = self.plan()?;
        let wanted = Manifest {
            stage: self.stage.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            config_sha256: crate::manifest::sha256_hex(plan.config.to_string().as_bytes()),
            inputs: hash_files(&self.root, &plan.inputs)?,
            outputs: BTreeMap::new(),
        };
        let manifest_path = self.dir.join(MANIFEST_NAME);
        if !force && Manifest::read(&manifest_path).is_some_and(|m| m.is_current(&wanted, &self.root)) {
            return Ok(StageStatus::UpToDate);
        }
        if self.dir.exists() {
            std::fs::remove_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| {
            PipelineError::User(format!("output directory {} is not writable: {e}", self.dir.display()))
        })?;
        match self.stage {
            Stage::Refine => self.refine()?,
            Stage::Slide => self.slide()?,
            Stage::Init => self.init()?,
            Stage::Train => self.train()?,
            Stage::Render => self.render()?,
            Stage::Metrics => self.metrics()?,
        }
        let outputs = hash_files(&self.root, &list_outputs(&self.dir)?)?;
        Manifest { outputs, ..wanted }.write(&manifest_path)?;
        Ok(StageStatus::Ran)
    }

    fn stage_dir(&self, s: Stage) -> PathBuf {
        self.root.join(s.name())
    }

    /// Existing file produced by `producer`, or a dependency error.
    fn artifact(&self, producer: Stage, name: &str) -> Result<PathBuf, PipelineError> {
        let path = self.stage_dir(producer).join(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::Dependency {
                needed_by: self.stage.name(),
                artifact: record_key(&self.root, &path),
                producer: producer.name(),
            })
        }
    }

    fn user_file(&self, path: &Path, what: &str) -> Result<PathBuf, PipelineError> {
        if path.is_file() {
            Ok(path.to_path_buf())
        } else {
            Err(PipelineError::User(format!("{what} {} does not exist", path.display())))
        }
    }

    fn panorama_path(&self) -> Result<PathBuf, PipelineError> {
        let refined = self.stage_dir(Stage::Refine).join("panorama.png");
        if refined.is_file() {
            return Ok(refined);
        }
        match &self.cfg.paths.panorama {
            Some(p) => self.user_file(p, "paths.panorama"),
            None => self.artifact(Stage::Refine, "panorama.png"),
        }
    }

    /// Directory holding `cameras.json` and the views it lists.
    fn views_dir(&self) -> Result<PathBuf, PipelineError> {
        match &self.cfg.paths.views_dir {
            Some(d) => {
                self.user_file(&d.join(CAMERAS_NAME), "camera list")?;
                Ok(d.clone())
            }
            None => {
                self.artifact(Stage::Slide, CAMERAS_NAME)?;
                Ok(self.stage_dir(Stage::Slide))
            }
        }
    }

    fn cameras(&self, dir: &Path) -> Result<CamerasFile, PipelineError> {
        let path = dir.join(CAMERAS_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let cams: CamerasFile = serde_json::from_str(&text)
            .map_err(|e| PipelineError::User(format!("{} is malformed: {e}", path.display())))?;
        cams.intrinsics.validate()?;
        Ok(cams)
    }

    fn view_files(&self, dir: &Path, cams: &CamerasFile) -> Result<Vec<PathBuf>, PipelineError> {
        let mut files = vec![dir.join(CAMERAS_NAME)];
        for v in &cams.views {
            let p = dir.join(&v.image);
            if !p.is_file() {
                return Err(match &self.cfg.paths.views_dir {
                    Some(_) => PipelineError::User(format!("view image {} does not exist", p.display())),
                    None => PipelineError::Dependency {
                        needed_by: self.stage.name(),
                        artifact: record_key(&self.root, &p),
                        producer: Stage::Slide.name(),
                    },
                });
            }
            files.push(p);
        }
        Ok(files)
    }

    fn load_views(&self, dir: &Path, cams: &CamerasFile) -> Result<Vec<PerspectiveView>, PipelineError> {
        cams.views
            .iter()
            .map(|v| {
                let image = read_png(dir.join(&v.image))?;
                if (image.width(), image.height()) != (cams.intrinsics.width, cams.intrinsics.height) {
                    return Err(PipelineError::User(format!(
                        "{} is {}x{}, cameras.json declares {}x{}",
                        v.image,
                        image.width(),
                        image.height(),
                        cams.intrinsics.width,
                        cams.intrinsics.height
                    )));
                }
                Ok(PerspectiveView {
                    image,
                    intrinsics: cams.intrinsics,
                    pose: v.pose.clone(),
                    depth: None,
                })
            })
            .collect()
    }

    fn plan(&self) -> Result<Plan, PipelineError> {
        let c = self.cfg;
        Ok(match self.stage {
            Stage::Refine => {
                if c.hooks.generator.is_none() {
                    return Err(PipelineError::User("stage refine needs hooks.generator".into()));
                }
                Plan {
                    inputs: vec![],
                    config: json!({
                        "refine": c.refine,
                        "generator": c.hooks.generator,
                        "critic": c.hooks.critic,
                        "denoiser": c.hooks.denoiser,
                        "super_resolution": c.hooks.super_resolution,
                    }),
                }
            }
            Stage::Slide => Plan {
                inputs: vec![self.panorama_path()?],
                config: json!({ "schedule": c.schedule }),
            },
            Stage::Init => {
                let dir = self.views_dir()?;
                let cams = self.cameras(&dir)?;
                let mut inputs = self.view_files(&dir, &cams)?;
                match (&c.paths.depth_dir, &c.hooks.depth_estimator) {
                    (Some(d), _) => {
                        for v in &cams.views {
                            inputs.push(self.user_file(&d.join(depth_name(v.index)), "depth map")?);
                        }
                    }
                    (None, Some(_)) => {}
                    (None, None) => {
                        return Err(PipelineError::User(
                            "stage init needs depth: set paths.depth_dir or hooks.depth_estimator".into(),
                        ))
                    }
                }
                Plan {
                    inputs,
                    config: json!({
                        "init": c.init,
                        "depth_estimator": if c.paths.depth_dir.is_none() { c.hooks.depth_estimator.clone() } else { None },
                    }),
                }
            }
            Stage::Train => {
                let mut inputs = vec![
                    self.artifact(Stage::Init, "scene.ply")?,
                    self.artifact(Stage::Init, "poses.json")?,
                ];
                let dir = self.views_dir()?;
                let cams = self.cameras(&dir)?;
                inputs.extend(self.view_files(&dir, &cams)?);
                for v in &cams.views {
                    inputs.push(self.artifact(Stage::Init, &depth_name(v.index))?);
                }
                if let Some(e) = &c.paths.embeddings_dir {
                    for v in &cams.views {
                        let stem = e.join(format!("view_{:02}", v.index));
                        inputs.push(self.user_file(&stem.with_extension("bin"), "embedding")?);
                        inputs.push(self.user_file(&stem.with_extension("json"), "embedding sidecar")?);
                    }
                }
                Plan {
                    inputs,
                    config: json!({ "seed": c.seed, "train": c.train, "embedder": c.hooks.embedder }),
                }
            }
            Stage::Render => {
                let dir = self.views_dir()?;
                Plan {
                    inputs: vec![
                        self.artifact(Stage::Train, "scene.ply")?,
                        self.artifact(Stage::Train, "poses.json")?,
                        dir.join(CAMERAS_NAME),
                    ],
                    config: json!({}),
                }
            }
            Stage::Metrics => {
                let dir = self.views_dir()?;
                let cams = self.cameras(&dir)?;
                let mut inputs = self.view_files(&dir, &cams)?;
                for v in &cams.views {
                    inputs.push(self.artifact(Stage::Render, &view_name(v.index))?);
                }
                Plan {
                    inputs,
                    config: json!({}),
                }
            }
        })
    }

    fn refine(&self) -> Result<(), PipelineError> {
        let c = self.cfg;
        let generator = c.hooks.generator.as_ref().expect("checked in plan").image_hook("generator")?;
        let critic = c.hooks.critic.as_ref().map(|h| h.critic()).transpose()?;
        let settings = RefineSettings {
            max_rounds: c.refine.max_rounds,
            panorama_height: c.refine.panorama_height,
            session_dir: self.dir.clone(),
        };
        let outcome = run_refinement(
            &c.refine.prompt,
            &generator,
            critic.as_ref().map(|c| c as &dyn panosplat::hooks::Critic),
            &settings,
        )?;
        if let Some(msg) = &outcome.critic_error {
            eprintln!("warning: {msg}; keeping the best completed round");
        }
        let mut pano = read_png(self.dir.join(&outcome.best.panorama_path))?;
        if let Some(spec) = &c.hooks.denoiser {
            let denoiser = spec.image_hook("denoiser")?;
            let win = c.refine.denoise_window.min(pano.height()).min(pano.width());
            let stride = c.refine.denoise_stride.min(win);
            let schedule = window_schedule(pano.width(), pano.height(), win, win, stride)?;
            pano = run_denoise_round(&pano, &[outcome.best.prompt.clone()], &denoiser, &schedule)?;
        }
        if let Some(spec) = &c.hooks.super_resolution {
            pano = spec.image_hook("super_resolution")?.apply(&pano, &outcome.best.prompt)?;
        }
        EquirectImage::new(pano.clone())?;
        write_png(self.dir.join("panorama.png"), &pano, BitDepth::Sixteen)?;
        Ok(())
    }

    fn slide(&self) -> Result<(), PipelineError> {
        let s = &self.cfg.schedule;
        let pano = EquirectImage::new(read_png(self.panorama_path()?)?)?;
        let intr = CameraIntrinsics::new(s.fov_deg, s.view_size, s.view_size)?;
        let mut views = Vec::new();
        for (rot, intr) in sliding_schedule(&intr)? {
            let view = equirect_to_perspective(&pano, &rot, &intr);
            write_png(self.dir.join(view_name(rot.index)), &view.image, BitDepth::Sixteen)?;
            views.push(CameraEntry {
                index: rot.index,
                image: view_name(rot.index),
                yaw_deg: rot.yaw().to_degrees(),
                pose: view.pose,
            });
        }
        self.write_json(CAMERAS_NAME, &CamerasFile { intrinsics: intr, views })
    }

    fn init(&self) -> Result<(), PipelineError> {
        let c = self.cfg;
        let dir = self.views_dir()?;
        let cams = self.cameras(&dir)?;
        let mut views = self.load_views(&dir, &cams)?;
        let estimator = match (&c.paths.depth_dir, &c.hooks.depth_estimator) {
            (None, Some(h)) => Some(h.depth()?),
            _ => None,
        };
        for (v, entry) in views.iter_mut().zip(&cams.views) {
            let depth = match (&c.paths.depth_dir, &estimator) {
                (Some(d), _) => read_pfm(d.join(depth_name(entry.index)))?,
                (None, Some(est)) => est.estimate(&v.image)?,
                (None, None) => unreachable!("checked in plan"),
            };
            if depth.channels() != 1 || (depth.width(), depth.height()) != (v.image.width(), v.image.height()) {
                return Err(PipelineError::User(format!(
                    "depth for view {} must be a {}x{} single-channel map",
                    entry.index,
                    v.image.width(),
                    v.image.height()
                )));
            }
            write_pfm(self.dir.join(depth_name(entry.index)), &depth)?;
            v.depth = Some(depth);
        }
        let maps = views.iter().map(backproject).collect::<Result<Vec<_>, _>>()?;
        let voxel = c.init.voxel.unwrap_or_else(|| default_voxel_size(&maps));
        let cloud = merge_clouds(&maps, voxel)?;
        let viewer = views.iter().map(|v| v.pose.camera_center()).sum::<Vector3<f64>>() / views.len() as f64;
        let opts = SeedOptions {
            neighbors: c.init.neighbors,
            scale_factor: c.init.scale_factor,
            target_sigma: c.init.target_sigma,
            focal: cams.intrinsics.focal(),
            viewer,
        };
        let gaussians = gaussians_from_cloud(&cloud, &opts)?;
        let poses: Vec<CameraPose> = views.iter().map(|v| v.pose.clone()).collect();
        write_point_cloud_ply(self.dir.join("points.ply"), &cloud)?;
        write_scene_ply(self.dir.join("scene.ply"), &gaussians, &Vector3::from(c.init.background))?;
        write_poses(self.dir.join("poses.json"), &poses)?;
        Ok(())
    }

    fn train(&self) -> Result<(), PipelineError> {
        let c = self.cfg;
        let (gaussians, background) = read_scene_ply(self.artifact(Stage::Init, "scene.ply")?)?;
        let poses = read_poses(self.artifact(Stage::Init, "poses.json")?)?;
        let dir = self.views_dir()?;
        let cams = self.cameras(&dir)?;
        let mut views = self.load_views(&dir, &cams)?;
        if poses.len() != views.len() {
            return Err(PipelineError::User(format!(
                "init produced {} poses for {} views",
                poses.len(),
                views.len()
            )));
        }
        for ((v, entry), pose) in views.iter_mut().zip(&cams.views).zip(&poses) {
            v.depth = Some(read_pfm(self.artifact(Stage::Init, &depth_name(entry.index))?)?);
            v.pose = pose.clone();
        }
        let external = c.hooks.embedder.as_ref().map(|h| h.embedder()).transpose()?;
        let target_embeddings = match &c.paths.embeddings_dir {
            Some(d) => Some(
                cams.views
                    .iter()
                    .map(|v| read_embedding(d.join(format!("view_{:02}", v.index))))
                    .collect::<Result<Vec<Embedding>, _>>()?,
            ),
            None => None,
        };
        let mut tc = c.train.clone();
        tc.seed = c.seed;
        let scene = SceneModel::new(gaussians, poses, background);
        let ctx = TrainContext {
            embedder: external.as_ref().map(|e| e as &dyn Embedder),
            target_embeddings,
            trace_path: Some(self.dir.join("trace.jsonl")),
            checkpoint_dir: (tc.checkpoint_every > 0).then(|| self.dir.join("checkpoints")),
            ..Default::default()
        };
        let (trained, _trace) = train_with(&scene, &views, &tc, ctx)?;
        write_scene_ply(self.dir.join("scene.ply"), &trained.gaussians, &trained.background)?;
        write_poses(self.dir.join("poses.json"), &trained.poses)?;
        Ok(())
    }

    fn render(&self) -> Result<(), PipelineError> {
        let (gaussians, background) = read_scene_ply(self.artifact(Stage::Train, "scene.ply")?)?;
        let poses = read_poses(self.artifact(Stage::Train, "poses.json")?)?;
        let cams = self.cameras(&self.views_dir()?)?;
        if poses.len() != cams.views.len() {
            return Err(PipelineError::User(format!(
                "train produced {} poses for {} cameras",
                poses.len(),
                cams.views.len()
            )));
        }
        let scene = SceneModel::new(gaussians, poses, background);
        for (entry, pose) in cams.views.iter().zip(&scene.poses) {
            let out = render(&scene, pose, &cams.intrinsics);
            write_png(self.dir.join(view_name(entry.index)), &out.rgb, BitDepth::Sixteen)?;
            write_pfm(self.dir.join(depth_name(entry.index)), &out.depth)?;
            write_pfm(self.dir.join(format!("alpha_{:02}.pfm", entry.index)), &out.alpha)?;
        }
        Ok(())
    }

    fn metrics(&self) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Row {
            view: usize,
            #[serde(flatten)]
            metrics: ImageMetrics,
        }
        let dir = self.views_dir()?;
        let cams = self.cameras(&dir)?;
        let views = self.load_views(&dir, &cams)?;
        let mut rows = Vec::new();
        for (v, entry) in views.iter().zip(&cams.views) {
            let rendered = read_png(self.artifact(Stage::Render, &view_name(entry.index))?)?;
            rows.push(Row {
                view: entry.index,
                metrics: image_metrics(&rendered, &v.image)?,
            });
        }
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.metrics.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.metrics.ssim).sum::<f64>() / n;
        self.write_json(
            "metrics.json",
            &json!({ "mean_psnr": mean_psnr, "mean_ssim": mean_ssim, "views": rows }),
        )
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

/// Manifest left by `stage` under output directory `root`.
pub fn read_manifest(root: &Path, stage: Stage) -> Option<Manifest> {
    Manifest::read(&root.join(stage.name()).join(MANIFEST_NAME))
}
