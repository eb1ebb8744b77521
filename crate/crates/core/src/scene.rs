//! Gaussian primitives, camera poses and the closed-form density and
//! effective-opacity formulas.

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-9;
const COVARIANCE_UNIT_TOLERANCE: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e12;

/// Rotation matrix of `q / |q|` for a quaternion stored as `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quaternion<f64> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    UnitQuaternion::from_rotation_matrix(&rot).into_inner()
}

/// Geodesic angle in radians between two rotation matrices.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a * b.transpose();
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// A 3D Gaussian primitive with degree-0 color.
///
/// Covariance is never stored: it is rebuilt from `scale` (standard
/// deviations along the local axes) and the unit quaternion `rotation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub scale: Vector3<f64>,
    pub rotation: Quaternion<f64>,
}

impl Gaussian3D {
    pub fn new(
        position: Vector3<f64>,
        color: Vector3<f64>,
        opacity: f64,
        scale: Vector3<f64>,
        rotation: Quaternion<f64>,
    ) -> Result<Self> {
        let g = Self {
            position,
            color,
            opacity,
            scale,
            rotation,
        };
        g.validate()?;
        Ok(g)
    }

    /// Isotropic, axis-aligned Gaussian.
    pub fn isotropic(position: Vector3<f64>, color: Vector3<f64>, opacity: f64, std: f64) -> Self {
        Self {
            position,
            color,
            opacity,
            scale: Vector3::repeat(std),
            rotation: Quaternion::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("gaussian position is not finite".into()));
        }
        if !self.color.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!("gaussian color {:?} outside [0,1]", self.color)));
        }
        if !(self.opacity.is_finite() && self.opacity >= 0.0) {
            return Err(Error::Contract(format!("gaussian opacity {} must be >= 0", self.opacity)));
        }
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Contract(format!("gaussian scale {:?} must be positive", self.scale)));
        }
        let n = self.rotation.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Normalization(n));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    /// `R · diag(s²) · Rᵀ` without the quaternion norm check.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.scale.component_mul(&self.scale);
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }
}

/// World-to-camera rigid transform: `x_cam = R(rotation) · x_world + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "crate::io::PoseRecord", into = "crate::io::PoseRecord")]
pub struct CameraPose {
    pub rotation: Quaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: matrix_to_quat(rotation),
            translation,
        }
    }

    /// Pose of a camera at world position `center` whose camera-to-world
    /// rotation is `cam_to_world`.
    pub fn looking(cam_to_world: &Matrix3<f64>, center: Vector3<f64>) -> Self {
        let r = cam_to_world.transpose();
        Self::from_matrix(&r, -(r * center))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rotation.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Normalization(n));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("pose translation is not finite".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (cam - self.translation)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// Left-multiplies the rotation by `exp([omega]×)` and renormalizes.
    pub fn rotate_tangent(&mut self, omega: &Vector3<f64>) {
        let delta = UnitQuaternion::from_scaled_axis(*omega).into_inner();
        let q = delta * self.rotation;
        self.rotation = q / q.norm();
    }

    /// Applies `x ↦ rotation·x + translation` to the world; the returned pose
    /// sees the moved world exactly as `self` saw the original one.
    pub fn after_world_motion(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let r = self.rotation_matrix() * rotation.transpose();
        let t = self.translation - r * translation;
        Self::from_matrix(&r, t)
    }
}

/// The reconstructed scene: Gaussians plus one pose per registered view.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub gaussians: Vec<Gaussian3D>,
    pub poses: Vec<CameraPose>,
    pub background: Vector3<f64>,
}

impl SceneModel {
    pub fn new(gaussians: Vec<Gaussian3D>, poses: Vec<CameraPose>, background: Vector3<f64>) -> Self {
        Self {
            gaussians,
            poses,
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::Contract(format!("gaussian {i}: {e}")))?;
        }
        for (i, p) in self.poses.iter().enumerate() {
            p.validate().map_err(|e| Error::Contract(format!("pose {i}: {e}")))?;
        }
        Ok(())
    }

    /// Half the diagonal of the bounding box of all Gaussian centers.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 1.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.position);
            hi = hi.sup(&g.position);
        }
        let e = 0.5 * (hi - lo).norm();
        if e > 0.0 {
            e
        } else {
            1.0
        }
    }
}

/// `Σ = R · diag(scale²) · Rᵀ`.
pub fn covariance_from(scale: &Vector3<f64>, rotation: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    let n = rotation.norm();
    if (n - 1.0).abs() > COVARIANCE_UNIT_TOLERANCE {
        return Err(Error::Normalization(n));
    }
    if !scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
        return Err(Error::Contract(format!("scale {scale:?} must be positive")));
    }
    let r = quat_to_matrix(rotation);
    let s2 = scale.component_mul(scale);
    let sigma = r * Matrix3::from_diagonal(&s2) * r.transpose();
    // exact symmetry regardless of rounding in the two products
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Density `α · exp(−½ (p−μ)ᵀ Σ⁻¹ (p−μ))` of a single Gaussian.
pub fn eval_gaussian(g: &Gaussian3D, p: &Vector3<f64>) -> Result<f64> {
    let s2 = g.scale.component_mul(&g.scale);
    let (lo, hi) = (s2.min(), s2.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateCovariance(format!(
            "condition number {:.3e} exceeds {MAX_CONDITION:e}",
            hi / lo
        )));
    }
    // Σ⁻¹ = R diag(1/s²) Rᵀ, so the Mahalanobis term is a rotated weighted norm.
    let r = g.rotation_matrix();
    let local = r.transpose() * (p - g.position);
    let m = local.x * local.x / s2.x + local.y * local.y / s2.y + local.z * local.z / s2.z;
    Ok(g.opacity * (-0.5 * m).exp())
}

/// Effective compositing opacity `1 − exp(−α / √det Σ₂ᴅ)`.
pub fn sigma_effective(alpha: f64, cov2d: &Matrix2<f64>) -> Result<f64> {
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return Err(Error::DegenerateCovariance(format!("2D covariance determinant {det} <= 0")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("opacity {alpha} must be >= 0")));
    }
    Ok(sigma_from_sqrt_det(alpha, det.sqrt()))
}

#[inline]
pub(crate) fn sigma_from_sqrt_det(alpha: f64, sqrt_det: f64) -> f64 {
    // largest double below 1, keeps the range half-open once exp underflows
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    (-(-alpha / sqrt_det).exp_m1()).min(BELOW_ONE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn yaw90() -> Quaternion<f64> {
        let h = std::f64::consts::FRAC_PI_4;
        Quaternion::new(h.cos(), 0.0, h.sin(), 0.0)
    }

    #[test]
    fn covariance_identity_cases() {
        let id = covariance_from(&Vector3::repeat(1.0), &Quaternion::identity()).unwrap();
        assert_relative_eq!(id, Matrix3::identity(), epsilon = 1e-15);
        let d = covariance_from(&Vector3::new(2.0, 1.0, 1.0), &Quaternion::identity()).unwrap();
        assert_relative_eq!(d, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-15);
    }

    #[test]
    fn yaw_quaternion_moves_long_axis_to_z() {
        let sigma = covariance_from(&Vector3::new(2.0, 1.0, 1.0), &yaw90()).unwrap();
        // a quarter turn about +y swaps the x and z axes
        assert_relative_eq!(sigma, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 4.0)), epsilon = 1e-12);
        let mut ev: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_relative_eq!(ev[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[2], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_non_unit_quaternion() {
        let q = Quaternion::new(1.0 + 1e-5, 0.0, 0.0, 0.0);
        assert!(matches!(
            covariance_from(&Vector3::repeat(1.0), &q),
            Err(Error::Normalization(_))
        ));
        let q = Quaternion::new(1.0 + 1e-7, 0.0, 0.0, 0.0);
        assert!(covariance_from(&Vector3::repeat(1.0), &q).is_ok());
    }

    #[test]
    fn density_anchor_values() {
        let g = Gaussian3D::isotropic(Vector3::new(1.0, 2.0, 3.0), Vector3::repeat(0.5), 0.7, 1.0);
        assert_eq!(eval_gaussian(&g, &g.position).unwrap(), 0.7);
        let mut unit = g.clone();
        unit.opacity = 1.0;
        let p = g.position + Vector3::new(1.0, 1.0, 0.0);
        assert_relative_eq!(eval_gaussian(&unit, &p).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(eval_gaussian(&unit, &p).unwrap(), 0.367879441171, epsilon = 1e-12);
        let mut zero = g;
        zero.opacity = 0.0;
        assert_eq!(eval_gaussian(&zero, &p).unwrap(), 0.0);
    }

    #[test]
    fn density_rejects_ill_conditioned_covariance() {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), Vector3::zeros(), 1.0, 1.0);
        g.scale = Vector3::new(1.0, 1.0, 1e-7);
        assert!(matches!(
            eval_gaussian(&g, &Vector3::zeros()),
            Err(Error::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn sigma_anchor_values() {
        let id = Matrix2::identity();
        assert_eq!(sigma_effective(0.0, &id).unwrap(), 0.0);
        assert_relative_eq!(sigma_effective(1.0, &id).unwrap(), 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(sigma_effective(1.0, &id).unwrap(), 0.632120558829, epsilon = 1e-12);
        let mut prev = 0.0;
        for a in [0.5, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let s = sigma_effective(a, &id).unwrap();
            assert!(s > prev && s < 1.0);
            prev = s;
        }
        assert!(matches!(
            sigma_effective(1.0, &Matrix2::new(1.0, 1.0, 1.0, 1.0)),
            Err(Error::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn world_motion_keeps_camera_view() {
        let pose = CameraPose::from_matrix(
            &nalgebra::Rotation3::from_euler_angles(0.1, -0.3, 0.2).into_inner(),
            Vector3::new(0.3, -0.2, 1.0),
        );
        let rot = nalgebra::Rotation3::from_euler_angles(-0.4, 0.2, 0.9).into_inner();
        let t = Vector3::new(1.0, 2.0, -0.5);
        let moved = pose.after_world_motion(&rot, &t);
        let p = Vector3::new(0.2, 0.7, 3.0);
        assert_relative_eq!(pose.to_camera(&p), moved.to_camera(&(rot * p + t)), epsilon = 1e-12);
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| {
                let q = Quaternion::new(a, b, c, d);
                q / q.norm()
            })
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            q in unit_quat(),
            s in (0.1..3.0f64, 0.1..3.0f64, 0.1..3.0f64),
        ) {
            let scale = Vector3::new(s.0, s.1, s.2);
            let sigma = covariance_from(&scale, &q).unwrap();
            let mut ev: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
            let mut want = vec![s.0 * s.0, s.1 * s.1, s.2 * s.2];
            ev.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn density_decreases_along_rays(
            q in unit_quat(),
            dir in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        ) {
            let d = Vector3::new(dir.0, dir.1, dir.2);
            prop_assume!(d.norm() > 1e-3);
            let g = Gaussian3D { scale: Vector3::new(0.5, 1.0, 2.0), rotation: q,
                ..Gaussian3D::isotropic(Vector3::new(0.1, 0.2, 0.3), Vector3::zeros(), 0.9, 1.0) };
            let peak = eval_gaussian(&g, &g.position).unwrap();
            let mut prev = peak;
            for k in 1..20 {
                let v = eval_gaussian(&g, &(g.position + d * (k as f64 * 0.2))).unwrap();
                prop_assert!(v < prev && v <= peak);
                prev = v;
            }
        }

        #[test]
        fn sigma_is_monotone(a in 0.0..20.0f64, da in 0.01..5.0f64, det in 0.1..10.0f64, dd in 0.01..5.0f64) {
            let m = |d: f64| Matrix2::new(d.sqrt(), 0.0, 0.0, d.sqrt());
            let s = sigma_effective(a, &m(det)).unwrap();
            prop_assert!((0.0..1.0).contains(&s));
            prop_assert!(sigma_effective(a + da, &m(det)).unwrap() >= s);
            prop_assert!(sigma_effective(a, &m(det + dd)).unwrap() <= s);
        }
    }
}
