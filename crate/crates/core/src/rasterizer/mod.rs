//! Differentiable Gaussian splat rasterization.
//!
//! Each Gaussian is projected with the first-order (EWA) approximation to a
//! screen-space footprint. Per pixel, footprints are visited front to back
//! and composited as `C = Σ cᵢ σᵢ Πⱼ<ᵢ (1 − σⱼ) + T·background`, where
//! `σᵢ(p) = σ_peak · exp(−½ dᵀ Σ₂ᴅ⁻¹ d)` and `σ_peak = 1 − exp(−α / √det Σ₂ᴅ)`.
//!
//! Footprints are binned into 8×8 tiles purely as an acceleration
//! structure: a footprint is attached to every tile its evaluation ellipse
//! touches, so tiled and untiled evaluation give identical results.

mod backward;

pub use backward::{GaussianGrad, PoseGrad, SceneGradients};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::panorama::CameraIntrinsics;
use crate::raster::Image;
use crate::scene::{sigma_from_sqrt_det, CameraPose, Gaussian3D, SceneModel};

/// Camera-space depth at or below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic screen-space dilation added to every projected covariance (px²).
pub const DILATION: f64 = 0.3;
/// Upper clip of the per-pixel compositing weight.
pub const SIGMA_MAX: f64 = 0.999;
/// Footprints are evaluated where `½ dᵀ Σ₂ᴅ⁻¹ d` stays below this; the
/// dropped tail is below 1e-13 of the peak.
pub const POWER_CUTOFF: f64 = 30.0;
/// Accumulated opacity below which rendered depth is reported as 0.
pub const DEPTH_ALPHA_MIN: f64 = 1e-6;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-12;

pub(crate) const TILE: usize = 8;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatFootprint {
    /// Index of the source Gaussian in the scene.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub sigma_peak: f64,
    pub color: Vector3<f64>,
    pub(crate) conic: Matrix2<f64>,
    pub(crate) cam: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
    pub(crate) sqrt_det: f64,
    pub(crate) half_extent: Vector2<f64>,
}

impl SplatFootprint {
    /// Compositing weight at continuous pixel position `p`, before clipping.
    pub fn sigma_at(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.mean2d;
        let power = 0.5 * (d.transpose() * self.conic * d)[0];
        if power > POWER_CUTOFF {
            0.0
        } else {
            self.sigma_peak * (-power).exp()
        }
    }
}

/// Rendered color, alpha-normalized expected depth and accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Image,
    pub alpha: Image,
}

/// Projects `g` into the camera; `None` when culled (behind the near plane,
/// its 3σ box entirely off-screen, or a degenerate footprint).
pub fn project_gaussian(g: &Gaussian3D, pose: &CameraPose, intr: &CameraIntrinsics) -> Option<SplatFootprint> {
    Projector::new(pose, intr).project(0, g)
}

pub(crate) struct Projector {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Projector {
    pub fn new(pose: &CameraPose, intr: &CameraIntrinsics) -> Self {
        let (cx, cy) = intr.principal_point();
        Self {
            rot: pose.rotation_matrix(),
            trans: pose.translation,
            focal: intr.focal(),
            cx,
            cy,
            width: intr.width as f64,
            height: intr.height as f64,
        }
    }

    pub fn project(&self, index: usize, g: &Gaussian3D) -> Option<SplatFootprint> {
        let cam = self.rot * g.position + self.trans;
        if !(cam.z > NEAR_PLANE) {
            return None;
        }
        let f = self.focal;
        let (x, y, z) = (cam.x, cam.y, cam.z);
        let mean2d = Vector2::new(self.cx + f * x / z, self.cy - f * y / z);
        #[rustfmt::skip]
        let jacobian = Matrix2x3::new(
            f / z, 0.0,    -f * x / (z * z),
            0.0,   -f / z, f * y / (z * z),
        );
        let cov_cam = self.rot * g.covariance() * self.rot.transpose();
        let mut cov2d = jacobian * cov_cam * jacobian.transpose();
        cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(1, 0)] = cov2d[(0, 1)];
        cov2d[(0, 0)] += DILATION;
        cov2d[(1, 1)] += DILATION;
        let det = cov2d.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let (sx, sy) = (cov2d[(0, 0)].sqrt(), cov2d[(1, 1)].sqrt());
        let (u, v) = (mean2d.x, mean2d.y);
        if u + 3.0 * sx < 0.0 || u - 3.0 * sx > self.width || v + 3.0 * sy < 0.0 || v - 3.0 * sy > self.height {
            return None;
        }
        let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
        let sqrt_det = det.sqrt();
        let reach = (2.0 * POWER_CUTOFF).sqrt();
        Some(SplatFootprint {
            index,
            mean2d,
            cov2d,
            depth: z,
            sigma_peak: sigma_from_sqrt_det(g.opacity, sqrt_det),
            color: g.color,
            conic,
            cam,
            jacobian,
            cov_cam,
            sqrt_det,
            half_extent: Vector2::new(reach * sx, reach * sy),
        })
    }
}

/// The per-pixel evaluation data of a footprint, packed for the inner loop.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Splat2D {
    pub mean: [f64; 2],
    /// Upper triangle `(a, b, c)` of the conic.
    pub conic: [f64; 3],
    pub sigma_peak: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

impl Splat2D {
    fn new(fp: &SplatFootprint) -> Self {
        Self {
            mean: [fp.mean2d.x, fp.mean2d.y],
            conic: [fp.conic[(0, 0)], fp.conic[(0, 1)], fp.conic[(1, 1)]],
            sigma_peak: fp.sigma_peak,
            color: [fp.color.x, fp.color.y, fp.color.z],
            depth: fp.depth,
        }
    }

    fn power(&self, dx: f64, dy: f64) -> f64 {
        0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) + self.conic[1] * dx * dy
    }

    /// Lower bound of the power over the rectangle `xs × ys`.
    fn min_power(&self, xs: (f64, f64), ys: (f64, f64)) -> f64 {
        let [mx, my] = self.mean;
        if (xs.0..=xs.1).contains(&mx) && (ys.0..=ys.1).contains(&my) {
            return 0.0;
        }
        let [a, b, c] = self.conic;
        let mut best = f64::INFINITY;
        for x in [xs.0, xs.1] {
            let dx = x - mx;
            let dy = (-b * dx / c).clamp(ys.0 - my, ys.1 - my);
            best = best.min(self.power(dx, dy));
        }
        for y in [ys.0, ys.1] {
            let dy = y - my;
            let dx = (-b * dy / a).clamp(xs.0 - mx, xs.1 - mx);
            best = best.min(self.power(dx, dy));
        }
        best
    }

    /// `(σ before clipping, falloff, dx, dy)` at pixel center `(px, py)`,
    /// or `None` outside the evaluation ellipse.
    #[inline(always)]
    pub fn eval(&self, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let power = self.power(dx, dy);
        if power > POWER_CUTOFF {
            return None;
        }
        let falloff = (-power).exp();
        Some((self.sigma_peak * falloff, falloff, dx, dy))
    }
}

/// Footprints attached to one row of tiles.
pub(crate) struct TileRow {
    /// Positions into the depth-sorted footprint list, ascending.
    pub splats: Vec<u32>,
    /// Packed copies of the footprints in `splats`.
    pub packed: Vec<Splat2D>,
    /// Per tile column, indices into `splats` in front-to-back order.
    pub tiles: Vec<Vec<u32>>,
}

/// Projected, depth-sorted and binned scene for one camera.
pub struct Prepared<'a> {
    pub(crate) scene: &'a SceneModel,
    pub(crate) projector: Projector,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) footprints: Vec<SplatFootprint>,
    pub(crate) rows: Vec<TileRow>,
}

impl<'a> Prepared<'a> {
    pub fn new(scene: &'a SceneModel, pose: &CameraPose, intr: &CameraIntrinsics) -> Self {
        let projector = Projector::new(pose, intr);
        let mut footprints: Vec<SplatFootprint> = scene
            .gaussians
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| projector.project(i, g))
            .collect();
        // stable: equal depths keep input order
        footprints.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let (w, h) = (intr.width, intr.height);
        let (tiles_x, tiles_y) = (w.div_ceil(TILE), h.div_ceil(TILE));
        let mut rows: Vec<TileRow> = (0..tiles_y)
            .map(|_| TileRow {
                splats: Vec::new(),
                packed: Vec::new(),
                tiles: vec![Vec::new(); tiles_x],
            })
            .collect();
        for (pos, fp) in footprints.iter().enumerate() {
            // pixel centers sit at integer + 0.5
            let lo_x = (fp.mean2d.x - fp.half_extent.x - 0.5).ceil().max(0.0);
            let hi_x = (fp.mean2d.x + fp.half_extent.x - 0.5).floor().min((w - 1) as f64);
            let lo_y = (fp.mean2d.y - fp.half_extent.y - 0.5).ceil().max(0.0);
            let hi_y = (fp.mean2d.y + fp.half_extent.y - 0.5).floor().min((h - 1) as f64);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let (tx0, tx1) = (lo_x as usize / TILE, hi_x as usize / TILE);
            let (ty0, ty1) = (lo_y as usize / TILE, hi_y as usize / TILE);
            let packed = Splat2D::new(fp);
            for (ty, row) in rows.iter_mut().enumerate().take(ty1 + 1).skip(ty0) {
                let ys = ((ty * TILE) as f64 + 0.5, ((ty * TILE + TILE).min(h) - 1) as f64 + 0.5);
                let mut local = None;
                for tx in tx0..=tx1 {
                    let xs = ((tx * TILE) as f64 + 0.5, ((tx * TILE + TILE).min(w) - 1) as f64 + 0.5);
                    if packed.min_power(xs, ys) > POWER_CUTOFF {
                        continue;
                    }
                    let l = *local.get_or_insert_with(|| {
                        row.splats.push(pos as u32);
                        row.packed.push(packed);
                        (row.splats.len() - 1) as u32
                    });
                    row.tiles[tx].push(l);
                }
            }
        }
        Self {
            scene,
            projector,
            width: w,
            height: h,
            footprints,
            rows,
        }
    }

    pub fn footprints(&self) -> &[SplatFootprint] {
        &self.footprints
    }

    pub fn forward(&self) -> RenderOutput {
        let (w, h) = (self.width, self.height);
        let bg = self.scene.background;
        let bands: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = self
            .rows
            .par_iter()
            .enumerate()
            .map(|(ty, row)| {
                let y_end = ((ty + 1) * TILE).min(h);
                let n = (y_end - ty * TILE) * w;
                let (mut rgb, mut depth, mut alpha) = (Vec::with_capacity(n * 3), Vec::with_capacity(n), Vec::with_capacity(n));
                for y in ty * TILE..y_end {
                    for x in 0..w {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let mut t = 1.0;
                        let mut c = [0.0; 3];
                        let mut dn = 0.0;
                        // Σ weights equals 1 − T but keeps full precision when T ≈ 1
                        let mut a = 0.0;
                        for &local in &row.tiles[x / TILE] {
                            let sp = &row.packed[local as usize];
                            let Some((raw, ..)) = sp.eval(px, py) else { continue };
                            if raw <= 0.0 {
                                continue;
                            }
                            let s = raw.min(SIGMA_MAX);
                            let wgt = s * t;
                            c[0] += sp.color[0] * wgt;
                            c[1] += sp.color[1] * wgt;
                            c[2] += sp.color[2] * wgt;
                            dn += sp.depth * wgt;
                            a += wgt;
                            t *= 1.0 - s;
                            if t < TRANSMITTANCE_MIN {
                                break;
                            }
                        }
                        let c = Vector3::from(c) + bg * t;
                        rgb.extend_from_slice(&[c.x, c.y, c.z]);
                        alpha.push(a);
                        depth.push(if a > DEPTH_ALPHA_MIN { dn / a } else { 0.0 });
                    }
                }
                (rgb, depth, alpha)
            })
            .collect();
        let (mut rgb, mut depth, mut alpha) = (Vec::with_capacity(w * h * 3), Vec::with_capacity(w * h), Vec::with_capacity(w * h));
        for (r, d, a) in bands {
            rgb.extend(r);
            depth.extend(d);
            alpha.extend(a);
        }
        RenderOutput {
            rgb: Image::from_vec(w, h, 3, rgb).expect("rgb band sizes"),
            depth: Image::from_vec(w, h, 1, depth).expect("depth band sizes"),
            alpha: Image::from_vec(w, h, 1, alpha).expect("alpha band sizes"),
        }
    }
}

/// Front-to-back compositing of one pixel's ordered `(σ, color)` list.
///
/// Returns the composited color, the per-entry weights `σᵢ Πⱼ<ᵢ(1−σⱼ)` and
/// the residual transmittance that multiplies the background.
pub fn composite(sigmas: &[f64], colors: &[Vector3<f64>], background: &Vector3<f64>) -> (Vector3<f64>, Vec<f64>, f64) {
    let mut t = 1.0;
    let mut c = Vector3::zeros();
    let mut weights = Vec::with_capacity(sigmas.len());
    for (&s, col) in sigmas.iter().zip(colors) {
        let s = s.clamp(0.0, SIGMA_MAX);
        let w = s * t;
        c += col * w;
        weights.push(w);
        t *= 1.0 - s;
    }
    (c + background * t, weights, t)
}

pub fn render(scene: &SceneModel, pose: &CameraPose, intr: &CameraIntrinsics) -> RenderOutput {
    Prepared::new(scene, pose, intr).forward()
}

/// Gradients of a scalar loss with respect to every Gaussian parameter and
/// the camera pose, given `∂L/∂rgb` and `∂L/∂depth` of the paired forward
/// pass.
pub fn render_backward(
    scene: &SceneModel,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    grad_rgb: &Image,
    grad_depth: &Image,
) -> Result<SceneGradients> {
    Prepared::new(scene, pose, intr).backward(grad_rgb, grad_depth)
}
