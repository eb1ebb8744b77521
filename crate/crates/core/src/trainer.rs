//! Optimization of a Gaussian scene (and optionally camera poses) against
//! posed target views.
//!
//! Parameters are updated with Adam, one state per parameter class. Opacity
//! and scale are optimized in log space, rotations as raw quaternions that
//! are renormalized after every step, and poses through a left tangent
//! rotation plus a plain translation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::io::{write_poses, write_scene_ply};
use crate::losses::{
    image_metrics, l_geo_masked, l_sem_grad, photometric_grad, total_loss, Embedder, Embedding, FallbackEmbedder,
    ImageMetrics, LossReport, GEO_EPSILON,
};
use crate::panorama::PerspectiveView;
use crate::raster::Image;
use crate::rasterizer::{render, Prepared, SceneGradients, DEPTH_ALPHA_MIN};
use crate::scene::{CameraPose, SceneModel};

const MIN_OPACITY: f64 = 1e-12;
const MIN_SCALE: f64 = 1e-9;
/// Smoothing of the per-pixel color residual norm in bundle adjustment.
pub const RESIDUAL_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub color: f64,
    /// Step size on `ln α`.
    pub opacity: f64,
    /// Step size on `ln s`.
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub lambda_sem: f64,
    pub lambda_geo: f64,
    /// Ramp both loss weights linearly from 0 over the first
    /// `ramp_fraction` of the iterations.
    pub ramp_weights: bool,
    pub ramp_fraction: f64,
    /// Weight of the `1 − SSIM` term mixed into the photometric loss.
    pub ssim_weight: f64,
    pub pose_opt_enabled: bool,
    /// Step size for pose rotation (radians) and translation.
    pub pose_lr: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Evaluate image metrics every this many iterations (0 disables).
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Bundle adjustment stops when the loss rises this many times in a row.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr: LearningRates::default(),
            lambda_sem: 0.1,
            lambda_geo: 0.03,
            ramp_weights: true,
            ramp_fraction: 0.2,
            ssim_weight: 0.0,
            pose_opt_enabled: false,
            pose_lr: 1e-4,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-15,
            eval_every: 0,
            checkpoint_every: 0,
            divergence_patience: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::Precondition("iterations must be at least 1".into()));
        }
        let rates = [
            ("position", self.lr.position),
            ("color", self.lr.color),
            ("opacity", self.lr.opacity),
            ("scale", self.lr.scale),
            ("rotation", self.lr.rotation),
            ("pose", self.pose_lr),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(TrainError::Precondition(format!("{name} learning rate {r} must be positive")));
            }
        }
        if !(self.lambda_sem >= 0.0 && self.lambda_geo >= 0.0) {
            return Err(TrainError::Precondition("loss weights must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(TrainError::Precondition("ssim weight must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Loss weights in effect at `iteration`.
    pub fn weights_at(&self, iteration: usize) -> (f64, f64) {
        if !self.ramp_weights || self.ramp_fraction <= 0.0 {
            return (self.lambda_sem, self.lambda_geo);
        }
        let span = self.ramp_fraction * self.iterations as f64;
        let f = (iteration as f64 / span).min(1.0);
        (self.lambda_sem * f, self.lambda_geo * f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Trained view, or `None` for a full-batch step.
    pub view: Option<usize>,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ImageMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// Seconds spent in the loop. Not persisted, so trace files stay
    /// byte-identical across runs.
    pub wall_time: f64,
}

impl TrainTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> crate::Result<TrainTrace> {
    let path = path.as_ref();
    let mut trace = TrainTrace::default();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| crate::io::format_error(path, format!("line {}: {e}", i + 1)))?;
        if trace.records.last().is_some_and(|p| p.iteration >= rec.iteration) {
            return Err(crate::io::format_error(path, format!("line {}: iterations not increasing", i + 1)));
        }
        trace.records.push(rec);
    }
    Ok(trace)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Precondition(String),
    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite {
        term: &'static str,
        iteration: usize,
        trace: Box<TrainTrace>,
    },
    #[error("loss increased {patience} consecutive times, stopping at iteration {iteration}")]
    Diverged {
        iteration: usize,
        patience: usize,
        trace: Box<TrainTrace>,
    },
    #[error(transparent)]
    Core(#[from] Error),
    #[error("trace or checkpoint output: {0}")]
    Io(#[from] std::io::Error),
}

/// Optional inputs beyond the scene, views and config.
#[derive(Default)]
pub struct TrainContext<'a> {
    /// Embedder for rendered images; the built-in fallback when `None`.
    pub embedder: Option<&'a dyn Embedder>,
    /// Per-view target embeddings; computed from the target images with the
    /// same embedder when `None`.
    pub target_embeddings: Option<Vec<Embedding>>,
    /// Per-view reference depth for the geometric term; the view's own depth
    /// map when `None`.
    pub reference_depths: Option<Vec<Option<Image>>>,
    /// Views scored at each evaluation; the training views when empty.
    pub eval_views: Vec<PerspectiveView>,
    /// Streams the trace as JSON lines while training.
    pub trace_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Adam over one flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, cfg: &TrainConfig) -> Self {
        Self {
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update in place. Entries whose gradient or result is not finite
    /// are left untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                continue;
            }
            let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            let next = params[i] - step;
            if next.is_finite() {
                self.m[i] = m;
                self.v[i] = v;
                params[i] = next;
            }
        }
    }
}

/// Flat optimizer-space copy of the scene parameters.
#[derive(Clone)]
struct Params {
    position: Vec<f64>,
    color: Vec<f64>,
    log_opacity: Vec<f64>,
    log_scale: Vec<f64>,
    rotation: Vec<f64>,
}

impl Params {
    fn from_scene(scene: &SceneModel) -> Self {
        let n = scene.gaussians.len();
        let mut p = Self {
            position: Vec::with_capacity(3 * n),
            color: Vec::with_capacity(3 * n),
            log_opacity: Vec::with_capacity(n),
            log_scale: Vec::with_capacity(3 * n),
            rotation: Vec::with_capacity(4 * n),
        };
        for g in &scene.gaussians {
            p.position.extend(g.position.iter());
            p.color.extend(g.color.iter());
            p.log_opacity.push(g.opacity.max(MIN_OPACITY).ln());
            p.log_scale.extend(g.scale.iter().map(|s| s.max(MIN_SCALE).ln()));
            let q = g.rotation / g.rotation.norm();
            p.rotation.extend([q.w, q.i, q.j, q.k]);
        }
        p
    }

    /// Copies stepped values into the scene. Fields whose optimizer-space
    /// values are unchanged keep their exact scene values, so the log and
    /// normalization round trips never perturb an untouched Gaussian.
    fn write_back(&mut self, scene: &mut SceneModel, before: &Params) {
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            for k in 0..3 {
                self.color[3 * i + k] = self.color[3 * i + k].clamp(0.0, 1.0);
            }
            let moved = |a: &[f64], b: &[f64], r: std::ops::Range<usize>| a[r.clone()] != b[r];
            if moved(&self.position, &before.position, 3 * i..3 * i + 3) {
                g.position = Vector3::from_column_slice(&self.position[3 * i..3 * i + 3]);
            }
            if moved(&self.color, &before.color, 3 * i..3 * i + 3) {
                g.color = Vector3::from_column_slice(&self.color[3 * i..3 * i + 3]);
            }
            if self.log_opacity[i] != before.log_opacity[i] {
                g.opacity = self.log_opacity[i].exp();
            }
            if moved(&self.log_scale, &before.log_scale, 3 * i..3 * i + 3) {
                g.scale = Vector3::from_column_slice(&self.log_scale[3 * i..3 * i + 3]).map(f64::exp);
            }
            if moved(&self.rotation, &before.rotation, 4 * i..4 * i + 4) {
                let r = &mut self.rotation[4 * i..4 * i + 4];
                let q = Quaternion::new(r[0], r[1], r[2], r[3]);
                let n = q.norm();
                let q = if n > 0.0 && n.is_finite() { q / n } else { g.rotation };
                r.copy_from_slice(&[q.w, q.i, q.j, q.k]);
                g.rotation = q;
            }
        }
    }
}

struct Optimizers {
    position: Adam,
    color: Adam,
    opacity: Adam,
    scale: Adam,
    rotation: Adam,
    pose_rotation: Vec<Adam>,
    pose_translation: Vec<Adam>,
}

impl Optimizers {
    fn new(scene: &SceneModel, poses: usize, cfg: &TrainConfig) -> Self {
        let n = scene.gaussians.len();
        Self {
            position: Adam::new(3 * n, cfg.lr.position * scene.extent(), cfg),
            color: Adam::new(3 * n, cfg.lr.color, cfg),
            opacity: Adam::new(n, cfg.lr.opacity, cfg),
            scale: Adam::new(3 * n, cfg.lr.scale, cfg),
            rotation: Adam::new(4 * n, cfg.lr.rotation, cfg),
            pose_rotation: (0..poses).map(|_| Adam::new(3, cfg.pose_lr, cfg)).collect(),
            pose_translation: (0..poses).map(|_| Adam::new(3, cfg.pose_lr, cfg)).collect(),
        }
    }

    fn step_gaussians(&mut self, params: &mut Params, scene: &SceneModel, grads: &SceneGradients) {
        let n = scene.gaussians.len();
        let (mut gp, mut gc, mut go, mut gs, mut gr) =
            (vec![0.0; 3 * n], vec![0.0; 3 * n], vec![0.0; n], vec![0.0; 3 * n], vec![0.0; 4 * n]);
        for (i, (g, d)) in scene.gaussians.iter().zip(&grads.gaussians).enumerate() {
            gp[3 * i..3 * i + 3].copy_from_slice(d.position.as_slice());
            gc[3 * i..3 * i + 3].copy_from_slice(d.color.as_slice());
            go[i] = d.opacity * g.opacity;
            for k in 0..3 {
                gs[3 * i + k] = d.scale[k] * g.scale[k];
            }
            gr[4 * i..4 * i + 4].copy_from_slice(d.rotation.as_slice());
        }
        self.position.step(&mut params.position, &gp);
        self.color.step(&mut params.color, &gc);
        self.opacity.step(&mut params.log_opacity, &go);
        self.scale.step(&mut params.log_scale, &gs);
        self.rotation.step(&mut params.rotation, &gr);
    }

    fn step_pose(&mut self, view: usize, pose: &mut CameraPose, grads: &SceneGradients) {
        let mut omega = [0.0; 3];
        self.pose_rotation[view].step(&mut omega, grads.pose.rotation.as_slice());
        pose.rotate_tangent(&Vector3::from(omega));
        let mut t = [pose.translation.x, pose.translation.y, pose.translation.z];
        self.pose_translation[view].step(&mut t, grads.pose.translation.as_slice());
        pose.translation = Vector3::from(t);
    }
}

fn initial_poses(scene: &SceneModel, views: &[PerspectiveView]) -> Result<Vec<CameraPose>, TrainError> {
    if scene.poses.is_empty() {
        return Ok(views.iter().map(|v| v.pose.clone()).collect());
    }
    if scene.poses.len() != views.len() {
        return Err(TrainError::Precondition(format!(
            "scene has {} poses for {} views",
            scene.poses.len(),
            views.len()
        )));
    }
    Ok(scene.poses.clone())
}

fn check_views(views: &[PerspectiveView]) -> Result<(), TrainError> {
    if views.is_empty() {
        return Err(TrainError::Precondition("at least one view is required".into()));
    }
    for (i, v) in views.iter().enumerate() {
        v.intrinsics.validate()?;
        if (v.image.width(), v.image.height(), v.image.channels()) != (v.intrinsics.width, v.intrinsics.height, 3) {
            return Err(TrainError::Precondition(format!("view {i} image does not match its intrinsics")));
        }
    }
    Ok(())
}

/// Seeded shuffle of the view indices, visited round-robin.
pub fn view_order(count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

struct TraceSink {
    trace: TrainTrace,
    file: Option<BufWriter<File>>,
}

impl TraceSink {
    fn new(path: Option<&Path>) -> Result<Self, TrainError> {
        let file = match path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(Self {
            trace: TrainTrace::default(),
            file,
        })
    }

    fn push(&mut self, rec: TraceRecord) -> Result<(), TrainError> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        self.trace.records.push(rec);
        Ok(())
    }

    fn finish(mut self, start: Instant) -> Result<TrainTrace, TrainError> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        self.trace.wall_time = start.elapsed().as_secs_f64();
        Ok(self.trace)
    }

    fn snapshot(&self, start: Instant) -> Box<TrainTrace> {
        let mut t = self.trace.clone();
        t.wall_time = start.elapsed().as_secs_f64();
        Box::new(t)
    }
}

fn mean_metrics(scene: &SceneModel, views: &[PerspectiveView], poses: &[CameraPose]) -> crate::Result<ImageMetrics> {
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for (i, v) in views.iter().enumerate() {
        let pose = poses.get(i).unwrap_or(&v.pose);
        let m = image_metrics(&render(scene, pose, &v.intrinsics).rgb, &v.image)?;
        psnr += m.psnr;
        ssim += m.ssim;
    }
    let n = views.len() as f64;
    Ok(ImageMetrics {
        psnr: psnr / n,
        ssim: ssim / n,
    })
}

fn write_checkpoint(dir: &Path, iteration: usize, scene: &SceneModel) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    write_scene_ply(dir.join(format!("scene_{iteration:06}.ply")), &scene.gaussians, &scene.background)?;
    write_poses(dir.join(format!("poses_{iteration:06}.json")), &scene.poses)?;
    Ok(())
}

pub fn train(scene: &SceneModel, views: &[PerspectiveView], cfg: &TrainConfig) -> Result<(SceneModel, TrainTrace), TrainError> {
    train_with(scene, views, cfg, TrainContext::default())
}

/// Per-view stochastic training on `L_rgb + λ₁ L_sem + λ₂ L_geo`.
pub fn train_with(
    scene: &SceneModel,
    views: &[PerspectiveView],
    cfg: &TrainConfig,
    ctx: TrainContext<'_>,
) -> Result<(SceneModel, TrainTrace), TrainError> {
    cfg.validate()?;
    check_views(views)?;
    scene.validate()?;
    let start = Instant::now();
    let fallback = FallbackEmbedder;
    let embedder: &dyn Embedder = ctx.embedder.unwrap_or(&fallback);

    let mut scene = scene.clone();
    scene.poses = initial_poses(&scene, views)?;
    let targets: Option<Vec<Embedding>> = if cfg.lambda_sem > 0.0 {
        match ctx.target_embeddings {
            Some(t) if t.len() == views.len() => Some(t),
            Some(t) => {
                return Err(TrainError::Precondition(format!(
                    "{} target embeddings for {} views",
                    t.len(),
                    views.len()
                )))
            }
            None => Some(views.iter().map(|v| embedder.embed(&v.image)).collect::<crate::Result<_>>()?),
        }
    } else {
        None
    };
    let ref_depths: Vec<Option<Image>> = match ctx.reference_depths {
        Some(d) if d.len() == views.len() => d,
        Some(d) => {
            return Err(TrainError::Precondition(format!(
                "{} reference depths for {} views",
                d.len(),
                views.len()
            )))
        }
        None => views.iter().map(|v| v.depth.clone()).collect(),
    };

    let order = view_order(views.len(), cfg.seed);
    let mut params = Params::from_scene(&scene);
    let mut opt = Optimizers::new(&scene, views.len(), cfg);
    let mut sink = TraceSink::new(ctx.trace_path.as_deref())?;
    let eval_views = if ctx.eval_views.is_empty() { views } else { &ctx.eval_views[..] };

    for it in 0..cfg.iterations {
        let vi = order[it % order.len()];
        let view = &views[vi];
        let (lam_sem, lam_geo) = cfg.weights_at(it);
        let pose = scene.poses[vi].clone();
        let prepared = Prepared::new(&scene, &pose, &view.intrinsics);
        let out = prepared.forward();

        let nonfinite = |term: &'static str, sink: &TraceSink| TrainError::NonFinite {
            term,
            iteration: it,
            trace: sink.snapshot(start),
        };

        let (l_rgb, mut grad_rgb) = photometric_grad(&out.rgb, &view.image, cfg.ssim_weight)?;
        if !l_rgb.is_finite() {
            return Err(nonfinite("l_rgb", &sink));
        }

        let mut l_sem = 0.0;
        if let Some(targets) = &targets {
            let rendered = embedder.embed(&out.rgb)?;
            let (value, g_emb) = l_sem_grad(&rendered, &targets[vi])?;
            if !value.is_finite() {
                return Err(nonfinite("l_sem", &sink));
            }
            l_sem = value;
            if lam_sem > 0.0 {
                if let Some(g) = embedder.backward(&out.rgb, &g_emb) {
                    for (o, d) in grad_rgb.data_mut().iter_mut().zip(g.data()) {
                        *o += lam_sem * d;
                    }
                }
            }
        }

        let mut l_geo = 0.0;
        let mut grad_depth = Image::new(out.depth.width(), out.depth.height(), 1);
        if cfg.lambda_geo > 0.0 {
            if let Some(reference) = &ref_depths[vi] {
                let mask: Vec<bool> = out
                    .alpha
                    .data()
                    .iter()
                    .zip(reference.data())
                    .map(|(a, r)| *a > DEPTH_ALPHA_MIN && *r > 0.0 && r.is_finite())
                    .collect();
                // too little coverage to correlate counts as uncorrelated
                let (value, g) = if mask.iter().filter(|m| **m).count() >= 2 {
                    l_geo_masked(&out.depth, reference, &mask, GEO_EPSILON)?
                } else {
                    (1.0, grad_depth.clone())
                };
                if !value.is_finite() {
                    return Err(nonfinite("l_geo", &sink));
                }
                l_geo = value;
                grad_depth = g.map(|v| v * lam_geo);
            }
        }

        let report = total_loss(l_rgb, l_sem, l_geo, lam_sem, lam_geo);
        if !report.total.is_finite() {
            return Err(nonfinite("total", &sink));
        }

        let grads = prepared.backward(&grad_rgb, &grad_depth)?;
        drop(prepared);
        let before = params.clone();
        opt.step_gaussians(&mut params, &scene, &grads);
        params.write_back(&mut scene, &before);
        if cfg.pose_opt_enabled && vi != 0 {
            opt.step_pose(vi, &mut scene.poses[vi], &grads);
        }

        let metrics = if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
            let poses = if ctx.eval_views.is_empty() { &scene.poses[..] } else { &[] };
            Some(mean_metrics(&scene, eval_views, poses)?)
        } else {
            None
        };
        sink.push(TraceRecord {
            iteration: it,
            view: Some(vi),
            loss: report,
            metrics,
        })?;
        if let Some(dir) = &ctx.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                write_checkpoint(dir, it + 1, &scene)?;
            }
        }
    }
    Ok((scene, sink.finish(start)?))
}

/// Smoothed per-pixel residual norm `√(‖r‖² + ε²) − ε` summed over pixels,
/// with its gradient with respect to the rendered image.
fn residual_norm_grad(rendered: &Image, target: &Image) -> (f64, Image) {
    let mut grad = Image::new(rendered.width(), rendered.height(), 3);
    let mut total = 0.0;
    for ((g, a), b) in grad
        .data_mut()
        .chunks_exact_mut(3)
        .zip(rendered.data().chunks_exact(3))
        .zip(target.data().chunks_exact(3))
    {
        let r = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + RESIDUAL_EPSILON * RESIDUAL_EPSILON).sqrt();
        total += n - RESIDUAL_EPSILON;
        for k in 0..3 {
            g[k] = r[k] / n;
        }
    }
    (total, grad)
}

/// Summed smoothed color residual norm over every pixel of every view,
/// rendered with `scene.poses`.
pub fn bundle_objective(scene: &SceneModel, views: &[PerspectiveView]) -> crate::Result<f64> {
    if scene.poses.len() != views.len() {
        return Err(Error::Contract(format!(
            "scene has {} poses for {} views",
            scene.poses.len(),
            views.len()
        )));
    }
    let mut total = 0.0;
    for (v, pose) in views.iter().zip(&scene.poses) {
        let out = render(scene, pose, &v.intrinsics);
        v.image.ensure_same_shape(&out.rgb, "bundle objective")?;
        total += residual_norm_grad(&out.rgb, &v.image).0;
    }
    Ok(total)
}

/// Joint full-batch refinement of Gaussians and poses on the summed
/// rendering error over all views. View 0's pose is held fixed.
pub fn bundle_adjust(scene: &SceneModel, views: &[PerspectiveView], cfg: &TrainConfig) -> Result<(SceneModel, TrainTrace), TrainError> {
    if !cfg.pose_opt_enabled {
        return Err(TrainError::Precondition("bundle adjustment needs pose optimization enabled".into()));
    }
    if views.len() < 2 {
        return Err(TrainError::Precondition(
            "≥2 views required: a single view leaves the pose gauge unconstrained".into(),
        ));
    }
    cfg.validate()?;
    check_views(views)?;
    scene.validate()?;
    let start = Instant::now();
    let mut scene = scene.clone();
    scene.poses = initial_poses(&scene, views)?;
    let pixels: usize = views.iter().map(|v| v.image.pixel_count()).sum();
    let norm = 1.0 / pixels as f64;

    let mut params = Params::from_scene(&scene);
    let mut opt = Optimizers::new(&scene, views.len(), cfg);
    let mut sink = TraceSink::new(None)?;
    let mut previous = f64::INFINITY;
    let mut rising = 0;

    for it in 0..cfg.iterations {
        let mut total = 0.0;
        let mut sum = SceneGradients {
            gaussians: vec![Default::default(); scene.gaussians.len()],
            pose: Default::default(),
        };
        let mut pose_grads = Vec::with_capacity(views.len());
        for (v, pose) in views.iter().zip(&scene.poses) {
            let prepared = Prepared::new(&scene, pose, &v.intrinsics);
            let out = prepared.forward();
            let (value, g) = residual_norm_grad(&out.rgb, &v.image);
            total += value * norm;
            let grads = prepared.backward(&g.map(|x| x * norm), &Image::new(v.image.width(), v.image.height(), 1))?;
            for (s, d) in sum.gaussians.iter_mut().zip(&grads.gaussians) {
                s.position += d.position;
                s.color += d.color;
                s.opacity += d.opacity;
                s.scale += d.scale;
                s.rotation += d.rotation;
            }
            pose_grads.push(grads);
        }
        if !total.is_finite() {
            return Err(TrainError::NonFinite {
                term: "l_rgb",
                iteration: it,
                trace: sink.snapshot(start),
            });
        }
        sink.push(TraceRecord {
            iteration: it,
            view: None,
            loss: total_loss(total, 0.0, 0.0, 0.0, 0.0),
            metrics: None,
        })?;
        rising = if total > previous { rising + 1 } else { 0 };
        previous = total;
        if rising >= cfg.divergence_patience.max(1) {
            return Err(TrainError::Diverged {
                iteration: it,
                patience: cfg.divergence_patience,
                trace: sink.snapshot(start),
            });
        }
        let before = params.clone();
        opt.step_gaussians(&mut params, &scene, &sum);
        params.write_back(&mut scene, &before);
        for (vi, grads) in pose_grads.iter().enumerate().skip(1) {
            opt.step_pose(vi, &mut scene.poses[vi], grads);
        }
    }
    Ok((scene, sink.finish(start)?))
}

/// Geodesic rotation angle (radians) and camera-center distance between two
/// poses.
pub fn pose_error(a: &CameraPose, b: &CameraPose) -> (f64, f64) {
    let angle = crate::scene::rotation_angle_between(&a.rotation_matrix(), &b.rotation_matrix());
    (angle, (a.camera_center() - b.camera_center()).norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_reaches_full_weight() {
        let cfg = TrainConfig {
            iterations: 100,
            ..Default::default()
        };
        assert_eq!(cfg.weights_at(0), (0.0, 0.0));
        let (s, g) = cfg.weights_at(10);
        assert!((s - 0.05).abs() < 1e-15 && (g - 0.015).abs() < 1e-15);
        assert_eq!(cfg.weights_at(20), (0.1, 0.03));
        assert_eq!(cfg.weights_at(99), (0.1, 0.03));
        let flat = TrainConfig {
            ramp_weights: false,
            ..cfg
        };
        assert_eq!(flat.weights_at(0), (0.1, 0.03));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = TrainConfig::default();
        let mut a = Adam::new(2, 0.1, &cfg);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 1.1).abs() < 1e-12);
        a.step(&mut p, &[f64::NAN, 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let cfg = TrainConfig::default();
        let mut a = Adam::new(1, 0.1, &cfg);
        let mut p = [2.0];
        for _ in 0..5 {
            a.step(&mut p, &[0.0]);
        }
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn view_order_is_a_seeded_permutation() {
        let a = view_order(30, 7);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..30).collect::<Vec<_>>());
        assert_eq!(a, view_order(30, 7));
        assert_ne!(a, view_order(30, 8));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.iterations = 1;
        cfg.lr.scale = 0.0;
        assert!(cfg.validate().is_err());
    }
}
