//! Reverse-mode pass through compositing, the effective-opacity formula and
//! the EWA projection.
//!
//! Per-pixel gradients land in screen-space accumulators (one buffer per
//! tile row), are summed over rows in a fixed order, and only then pushed
//! through the projection per Gaussian. Results therefore do not depend on
//! the number of worker threads.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{Prepared, SplatFootprint, DEPTH_ALPHA_MIN, SIGMA_MAX, TILE, TRANSMITTANCE_MIN};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scene::quat_to_matrix;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub scale: Vector3<f64>,
    /// With respect to the raw `(w, x, y, z)` quaternion components.
    pub rotation: Vector4<f64>,
}

/// Pose gradient. `rotation` is taken with respect to a left perturbation
/// `R ← exp([ω]×) R` at `ω = 0`; `translation` is the plain gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGrad {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGradients {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: PoseGrad,
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    sigma_peak: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.sigma_peak += o.sigma_peak;
        self.color += o.color;
        self.depth += o.depth;
    }
}

struct Hit {
    local: u32,
    sigma: f64,
    trans: f64,
    falloff: f64,
    clipped: bool,
    d: Vector2<f64>,
}

impl Prepared<'_> {
    pub fn backward(&self, grad_rgb: &Image, grad_depth: &Image) -> Result<SceneGradients> {
        let (w, h) = (self.width, self.height);
        if (grad_rgb.width(), grad_rgb.height(), grad_rgb.channels()) != (w, h, 3) {
            return Err(Error::Contract(format!(
                "rgb gradient is {}x{}x{}, render is {w}x{h}x3",
                grad_rgb.width(),
                grad_rgb.height(),
                grad_rgb.channels()
            )));
        }
        if (grad_depth.width(), grad_depth.height(), grad_depth.channels()) != (w, h, 1) {
            return Err(Error::Contract(format!(
                "depth gradient is {}x{}x{}, render is {w}x{h}x1",
                grad_depth.width(),
                grad_depth.height(),
                grad_depth.channels()
            )));
        }
        let bg = self.scene.background;

        let row_grads: Vec<Vec<ScreenGrad>> = self
            .rows
            .par_iter()
            .enumerate()
            .map(|(ty, row)| {
                let mut acc = vec![ScreenGrad::default(); row.splats.len()];
                let mut hits: Vec<Hit> = Vec::new();
                for y in ty * TILE..((ty + 1) * TILE).min(h) {
                    for x in 0..w {
                        let g_rgb = Vector3::from_column_slice(grad_rgb.pixel(x, y));
                        let g_depth = grad_depth.get(x, y, 0);
                        if g_rgb == Vector3::zeros() && g_depth == 0.0 {
                            continue;
                        }
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        hits.clear();
                        let mut t = 1.0;
                        let mut dn = 0.0;
                        let mut alpha = 0.0;
                        for &local in &row.tiles[x / TILE] {
                            let sp = &row.packed[local as usize];
                            let Some((raw, falloff, dx, dy)) = sp.eval(px, py) else { continue };
                            if raw <= 0.0 {
                                continue;
                            }
                            let clipped = raw > SIGMA_MAX;
                            let sigma = raw.min(SIGMA_MAX);
                            dn += sp.depth * sigma * t;
                            alpha += sigma * t;
                            hits.push(Hit {
                                local,
                                sigma,
                                trans: t,
                                falloff,
                                clipped,
                                d: Vector2::new(dx, dy),
                            });
                            t *= 1.0 - sigma;
                            if t < TRANSMITTANCE_MIN {
                                break;
                            }
                        }
                        let t_final = t;
                        // depth = dn / alpha where alpha is large enough
                        let (g_dn, g_alpha) = if alpha > DEPTH_ALPHA_MIN {
                            let depth = dn / alpha;
                            (g_depth / alpha, -g_depth * depth / alpha)
                        } else {
                            (0.0, 0.0)
                        };
                        let g_bg_term = g_rgb.dot(&bg);
                        let mut suffix_c = t_final * g_bg_term;
                        let mut suffix_z = 0.0;
                        for hit in hits.iter().rev() {
                            let sp = &row.packed[hit.local as usize];
                            let (color, depth) = (Vector3::from(sp.color), sp.depth);
                            let wgt = hit.sigma * hit.trans;
                            let one_minus = 1.0 - hit.sigma;
                            let gc_dot = g_rgb.dot(&color);
                            let g_sigma = (gc_dot * hit.trans - suffix_c / one_minus)
                                + g_dn * (depth * hit.trans - suffix_z / one_minus)
                                + g_alpha * t_final / one_minus;
                            let a = &mut acc[hit.local as usize];
                            a.color += g_rgb * wgt;
                            a.depth += g_dn * wgt;
                            if !hit.clipped {
                                a.sigma_peak += g_sigma * hit.falloff;
                                let g_power_term = g_sigma * sp.sigma_peak * hit.falloff;
                                let (ca, cb, cc) = (sp.conic[0], sp.conic[1], sp.conic[2]);
                                a.mean += Vector2::new(ca * hit.d.x + cb * hit.d.y, cb * hit.d.x + cc * hit.d.y) * g_power_term;
                                a.conic += hit.d * hit.d.transpose() * (-0.5 * g_power_term);
                            }
                            suffix_c += gc_dot * wgt;
                            suffix_z += depth * wgt;
                        }
                    }
                }
                acc
            })
            .collect();

        let mut screen = vec![ScreenGrad::default(); self.footprints.len()];
        for (row, grads) in self.rows.iter().zip(&row_grads) {
            for (&pos, g) in row.splats.iter().zip(grads) {
                screen[pos as usize].add(g);
            }
        }

        let per_splat: Vec<(GaussianGrad, Vector3<f64>, Matrix3<f64>)> = self
            .footprints
            .par_iter()
            .zip(screen.par_iter())
            .map(|(fp, sg)| self.project_backward(fp, sg))
            .collect();

        let mut out = SceneGradients {
            gaussians: vec![GaussianGrad::default(); self.scene.gaussians.len()],
            pose: PoseGrad::default(),
        };
        let mut g_rot_cam = Matrix3::zeros();
        for (fp, (gg, g_t, g_w)) in self.footprints.iter().zip(per_splat) {
            out.gaussians[fp.index] = gg;
            out.pose.translation += g_t;
            g_rot_cam += g_w;
        }
        let m = g_rot_cam * self.projector.rot.transpose();
        out.pose.rotation = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
        Ok(out)
    }

    /// Chain rule from screen-space gradients of one footprint to its
    /// Gaussian's parameters. Also returns this splat's contribution to
    /// `∂L/∂t` and `∂L/∂W` of the camera.
    fn project_backward(&self, fp: &SplatFootprint, sg: &ScreenGrad) -> (GaussianGrad, Vector3<f64>, Matrix3<f64>) {
        let g = &self.scene.gaussians[fp.index];
        let f = self.projector.focal;
        let w_cam = self.projector.rot;

        // σ_peak = 1 − exp(−α / s),  s = √det Σ₂ᴅ
        let s = fp.sqrt_det;
        let e = (-g.opacity / s).exp();
        let g_opacity = sg.sigma_peak * e / s;
        let g_s = -sg.sigma_peak * e * g.opacity / (s * s);
        // ∂s/∂Σ₂ᴅ = ½ s Σ₂ᴅ⁻¹;  ∂L/∂Σ₂ᴅ via the conic is −Q G Q
        let q = fp.conic;
        let g_cov2d: Matrix2<f64> = q * (0.5 * s * g_s) - q * sg.conic * q;

        // Σ₂ᴅ = J Σc Jᵀ + dilation
        let jac = fp.jacobian;
        let g_sym = g_cov2d + g_cov2d.transpose();
        let g_jac: Matrix2x3<f64> = g_sym * jac * fp.cov_cam;
        let g_cov_cam: Matrix3<f64> = jac.transpose() * g_cov2d * jac;

        // Σc = W Σ Wᵀ
        let sigma = g.covariance();
        let g_cc_sym = g_cov_cam + g_cov_cam.transpose();
        let mut g_w: Matrix3<f64> = g_cc_sym * w_cam * sigma;
        let g_sigma: Matrix3<f64> = w_cam.transpose() * g_cov_cam * w_cam;

        // Σ = R S² Rᵀ
        let r = quat_to_matrix(&g.rotation);
        let s2 = g.scale.component_mul(&g.scale);
        let g_r: Matrix3<f64> = (g_sigma + g_sigma.transpose()) * r * Matrix3::from_diagonal(&s2);
        let local = r.transpose() * g_sigma * r;
        let g_scale = Vector3::new(
            2.0 * g.scale.x * local[(0, 0)],
            2.0 * g.scale.y * local[(1, 1)],
            2.0 * g.scale.z * local[(2, 2)],
        );
        let g_rotation = quat_backward(&g.rotation, &g_r);

        // camera-space position: mean2d, Jacobian and depth all depend on it
        let (x, y, z) = (fp.cam.x, fp.cam.y, fp.cam.z);
        let (z2, z3) = (z * z, z * z * z);
        let mut g_cam = Vector3::new(
            sg.mean.x * f / z,
            -sg.mean.y * f / z,
            -sg.mean.x * f * x / z2 + sg.mean.y * f * y / z2 + sg.depth,
        );
        g_cam.x += g_jac[(0, 2)] * (-f / z2);
        g_cam.y += g_jac[(1, 2)] * (f / z2);
        g_cam.z += g_jac[(0, 0)] * (-f / z2)
            + g_jac[(0, 2)] * (2.0 * f * x / z3)
            + g_jac[(1, 1)] * (f / z2)
            + g_jac[(1, 2)] * (-2.0 * f * y / z3);

        // cam = W μ + t
        let g_position = w_cam.transpose() * g_cam;
        g_w += g_cam * g.position.transpose();

        (
            GaussianGrad {
                position: g_position,
                color: sg.color,
                opacity: g_opacity,
                scale: g_scale,
                rotation: g_rotation,
            },
            g_cam,
            g_w,
        )
    }
}

/// Gradient with respect to raw quaternion components of a loss that
/// depends on `R(q / |q|)`, given `∂L/∂R`.
pub(crate) fn quat_backward(q: &Quaternion<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let gm = |i: usize, j: usize| g[(i, j)];
    let gw = 2.0 * (-z * gm(0, 1) + y * gm(0, 2) + z * gm(1, 0) - x * gm(1, 2) - y * gm(2, 0) + x * gm(2, 1));
    let gx = 2.0
        * (y * gm(0, 1) + z * gm(0, 2) + y * gm(1, 0) - 2.0 * x * gm(1, 1) - w * gm(1, 2) + z * gm(2, 0)
            + w * gm(2, 1)
            - 2.0 * x * gm(2, 2));
    let gy = 2.0
        * (-2.0 * y * gm(0, 0) + x * gm(0, 1) + w * gm(0, 2) + x * gm(1, 0) + z * gm(1, 2) - w * gm(2, 0)
            + z * gm(2, 1)
            - 2.0 * y * gm(2, 2));
    let gz = 2.0
        * (-2.0 * z * gm(0, 0) - w * gm(0, 1) + x * gm(0, 2) + w * gm(1, 0) - 2.0 * z * gm(1, 1)
            + y * gm(1, 2)
            + x * gm(2, 0)
            + y * gm(2, 1));
    let unit = Vector4::new(w, x, y, z);
    let g_unit = Vector4::new(gw, gx, gy, gz);
    // through q ↦ q / |q|
    (g_unit - unit * unit.dot(&g_unit)) / n
}
