#![allow(dead_code)]

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use panosplat::panorama::CameraIntrinsics;
use panosplat::raster::Image;
use panosplat::rasterizer::{render, render_backward, SceneGradients};
use panosplat::scene::{CameraPose, Gaussian3D, SceneModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() > 1e-6 { axis.normalize() } else { Vector3::y() };
    UnitQuaternion::from_scaled_axis(axis * rng.gen_range(-max_angle..max_angle))
}

/// Random scene whose Gaussians project well inside a `size`² view of
/// `pose`, with moderate peak opacities.
pub fn random_scene(rng: &mut ChaCha8Rng, count: usize, size: usize) -> (SceneModel, CameraPose, CameraIntrinsics) {
    let intr = CameraIntrinsics::new(rng.gen_range(60.0..90.0), size, size).unwrap();
    let pose = CameraPose {
        rotation: random_rotation(rng, 0.5).into_inner(),
        translation: Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
    };
    let margin = size as f64 * 0.2;
    let gaussians = (0..count)
        .map(|_| {
            let u = rng.gen_range(margin..size as f64 - margin);
            let v = rng.gen_range(margin..size as f64 - margin);
            let z = rng.gen_range(2.0..5.0);
            let cam = intr.ray(u, v) * z;
            let q: Quaternion<f64> = random_rotation(rng, 3.0).into_inner();
            // deliberately non-unit raw quaternion: the renderer normalizes
            let q = q * rng.gen_range(0.8..1.25);
            Gaussian3D {
                position: pose.to_world(&cam),
                color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                opacity: rng.gen_range(0.05..0.6),
                scale: Vector3::new(rng.gen_range(0.03..0.12), rng.gen_range(0.03..0.12), rng.gen_range(0.03..0.12)),
                rotation: q,
            }
        })
        .collect();
    let bg = Vector3::new(rng.gen(), rng.gen(), rng.gen());
    (SceneModel::new(gaussians, vec![pose.clone()], bg), pose, intr)
}

/// Random linear functional of the rendered color and depth.
pub struct Projection {
    pub rgb: Image,
    pub depth: Image,
}

impl Projection {
    /// Rendered depth jumps where accumulated opacity crosses its reporting
    /// threshold, so depth weights are only placed on clearly covered pixels.
    pub fn random(rng: &mut ChaCha8Rng, scene: &SceneModel, pose: &CameraPose, intr: &CameraIntrinsics) -> Self {
        let (w, h) = (intr.width, intr.height);
        let n = (w * h) as f64;
        let alpha = render(scene, pose, intr).alpha;
        let rgb = Image::from_fn(w, h, 3, |_, _, px| px.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0) / n.sqrt()));
        let depth = Image::from_fn(w, h, 1, |x, y, px| {
            let v = rng.gen_range(-1.0..1.0) / n.sqrt() * 0.2;
            px[0] = if alpha.get(x, y, 0) > 1e-3 { v } else { 0.0 };
        });
        Self { rgb, depth }
    }

    pub fn eval(&self, scene: &SceneModel, pose: &CameraPose, intr: &CameraIntrinsics) -> f64 {
        let out = render(scene, pose, intr);
        let a: f64 = out.rgb.data().iter().zip(self.rgb.data()).map(|(x, w)| x * w).sum();
        let b: f64 = out.depth.data().iter().zip(self.depth.data()).map(|(x, w)| x * w).sum();
        a + b
    }

    pub fn grad(&self, scene: &SceneModel, pose: &CameraPose, intr: &CameraIntrinsics) -> SceneGradients {
        render_backward(scene, pose, intr, &self.rgb, &self.depth).unwrap()
    }
}

/// Every scalar parameter as a (name, getter/setter) pair over a scene and pose.
pub enum Param {
    Position(usize, usize),
    Color(usize, usize),
    Opacity(usize),
    Scale(usize, usize),
    Rotation(usize, usize),
    PoseRotation(usize),
    PoseTranslation(usize),
}

impl Param {
    pub fn all(count: usize) -> Vec<Param> {
        let mut out = Vec::new();
        for i in 0..count {
            for k in 0..3 {
                out.push(Param::Position(i, k));
                out.push(Param::Color(i, k));
                out.push(Param::Scale(i, k));
            }
            out.push(Param::Opacity(i));
            for k in 0..4 {
                out.push(Param::Rotation(i, k));
            }
        }
        for k in 0..3 {
            out.push(Param::PoseRotation(k));
            out.push(Param::PoseTranslation(k));
        }
        out
    }

    pub fn class(&self) -> &'static str {
        match self {
            Param::Position(..) => "position",
            Param::Color(..) => "color",
            Param::Opacity(..) => "opacity",
            Param::Scale(..) => "scale",
            Param::Rotation(..) => "rotation",
            Param::PoseRotation(..) => "pose_rotation",
            Param::PoseTranslation(..) => "pose_translation",
        }
    }

    pub fn analytic(&self, g: &SceneGradients) -> f64 {
        match *self {
            Param::Position(i, k) => g.gaussians[i].position[k],
            Param::Color(i, k) => g.gaussians[i].color[k],
            Param::Opacity(i) => g.gaussians[i].opacity,
            Param::Scale(i, k) => g.gaussians[i].scale[k],
            Param::Rotation(i, k) => g.gaussians[i].rotation[k],
            Param::PoseRotation(k) => g.pose.rotation[k],
            Param::PoseTranslation(k) => g.pose.translation[k],
        }
    }

    pub fn perturbed(&self, scene: &SceneModel, pose: &CameraPose, h: f64) -> (SceneModel, CameraPose) {
        let mut s = scene.clone();
        let mut p = pose.clone();
        match *self {
            Param::Position(i, k) => s.gaussians[i].position[k] += h,
            Param::Color(i, k) => s.gaussians[i].color[k] += h,
            Param::Opacity(i) => s.gaussians[i].opacity += h,
            Param::Scale(i, k) => s.gaussians[i].scale[k] += h,
            Param::Rotation(i, k) => {
                let q = &mut s.gaussians[i].rotation;
                match k {
                    0 => q.w += h,
                    1 => q.i += h,
                    2 => q.j += h,
                    _ => q.k += h,
                }
            }
            Param::PoseRotation(k) => {
                let mut w = Vector3::zeros();
                w[k] = h;
                p.rotate_tangent(&w);
            }
            Param::PoseTranslation(k) => p.translation[k] += h,
        }
        (s, p)
    }
}

/// Central difference of the projection along one parameter.
pub fn central_difference(proj: &Projection, scene: &SceneModel, pose: &CameraPose, intr: &CameraIntrinsics, param: &Param, h: f64) -> f64 {
    let (sp, pp) = param.perturbed(scene, pose, h);
    let (sm, pm) = param.perturbed(scene, pose, -h);
    (proj.eval(&sp, &pp, intr) - proj.eval(&sm, &pm, intr)) / (2.0 * h)
}

pub fn gradients_agree(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

pub struct SyntheticWorld {
    pub truth: SceneModel,
    pub intrinsics: CameraIntrinsics,
    pub train_poses: Vec<CameraPose>,
    pub held_out: CameraPose,
}

/// Camera on a horizontal arc of radius `radius` around `target`, looking at it.
pub fn orbit_pose(target: &Vector3<f64>, radius: f64, yaw: f64, height: f64) -> CameraPose {
    let center = target + Vector3::new(radius * yaw.sin(), height, -radius * yaw.cos());
    let fwd = (target - center).normalize();
    let right = Vector3::y().cross(&fwd).normalize();
    let up = fwd.cross(&right);
    let cam_to_world = nalgebra::Matrix3::from_columns(&[right, up, fwd]);
    CameraPose::looking(&cam_to_world, center)
}

/// `count` opaque Gaussians filling a slab in front of a backdrop, seen by
/// `views` cameras on a short arc; the held-out camera sits between the
/// two middle training cameras.
pub fn synthetic_world(seed: u64, count: usize, views: usize, size: usize) -> SyntheticWorld {
    let mut r = rng(seed);
    let target = Vector3::new(0.0, 0.0, 4.0);
    let intr = CameraIntrinsics::new(60.0, size, size).unwrap();
    let backdrop = count / 4;
    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        let (position, s) = if i < backdrop {
            // coarse tiles on a back wall
            let k = (backdrop as f64).sqrt().ceil() as usize;
            let (gx, gy) = (i % k, i / k);
            let step = 5.0 / k as f64;
            (
                Vector3::new(-2.5 + (gx as f64 + 0.5) * step, -2.5 + (gy as f64 + 0.5) * step, 6.5 + r.gen_range(-0.1..0.1)),
                Vector3::new(step * 0.6, step * 0.6, 0.05),
            )
        } else {
            (
                Vector3::new(r.gen_range(-1.2..1.2), r.gen_range(-1.2..1.2), r.gen_range(2.8..5.5)),
                Vector3::new(r.gen_range(0.06..0.2), r.gen_range(0.06..0.2), r.gen_range(0.06..0.2)),
            )
        };
        gaussians.push(Gaussian3D {
            position,
            color: Vector3::new(r.gen(), r.gen(), r.gen()),
            opacity: 0.0,
            scale: s,
            rotation: random_rotation(&mut r, 3.0).into_inner(),
        });
    }
    let train_poses: Vec<CameraPose> = (0..views)
        .map(|i| {
            let yaw = (i as f64 / (views - 1) as f64 - 0.5) * 0.5;
            orbit_pose(&target, 4.0, yaw, 0.15 * ((i % 2) as f64 - 0.5))
        })
        .collect();
    let held_out = orbit_pose(&target, 4.0, (0.5 / (views - 1) as f64) * 0.5, 0.0);
    // opacity so the peak weight is about 0.9 from the nominal viewpoint
    let f = intr.focal();
    let viewer = train_poses[views / 2].camera_center();
    for g in &mut gaussians {
        let z = (g.position - viewer).norm();
        let s = (g.scale.x * g.scale.y).sqrt();
        let px = f * s / z;
        g.opacity = -(1.0f64 - 0.9).ln() * (px * px + 0.3);
    }
    let truth = SceneModel::new(gaussians, train_poses.clone(), Vector3::new(0.1, 0.1, 0.15));
    SyntheticWorld {
        truth,
        intrinsics: intr,
        train_poses,
        held_out,
    }
}
