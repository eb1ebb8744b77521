//! Equirectangular panoramas, the 30-view yaw schedule, and perspective
//! view extraction by inverse mapping.
//!
//! Conventions: the camera looks along +z with +y up and +x to the right of
//! the image, so image column grows with +x and image row grows with −y.
//! Longitude 0 is +z and grows toward +x; latitude grows toward +y. Pixel
//! `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)` on both grids.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scene::CameraPose;

/// Number of views in the sliding schedule.
pub const VIEW_COUNT: usize = 30;
/// Yaw increment between consecutive views (12°).
pub const YAW_STEP: f64 = PI / 15.0;

/// An `H × 2H` RGB panorama.
#[derive(Clone, Debug, PartialEq)]
pub struct EquirectImage {
    image: Image,
}

impl EquirectImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidPanorama(format!(
                "expected 3 channels, got {}",
                image.channels()
            )));
        }
        if image.height() == 0 || image.width() != 2 * image.height() {
            return Err(Error::InvalidPanorama(format!(
                "width {} must be exactly twice height {}",
                image.width(),
                image.height()
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidPanorama(format!("channel value {v} outside [0,1]")));
        }
        Ok(Self { image })
    }

    /// Samples `f(longitude, latitude)` at every pixel center.
    pub fn from_fn<F>(height: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> [f64; 3],
    {
        let width = 2 * height;
        let image = Image::from_fn(width, height, 3, |x, y, px| {
            let (lon, lat) = pixel_to_lon_lat(x as f64 + 0.5, y as f64 + 0.5, width, height);
            px.copy_from_slice(&f(lon, lat));
        });
        Self::new(image)
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Bilinear sample at `(lon, lat)` with horizontal wraparound and
    /// vertical clamping.
    pub fn sample(&self, lon: f64, lat: f64) -> [f64; 3] {
        let (w, h) = (self.width(), self.height());
        let fx = (lon + PI) / TAU * w as f64 - 0.5;
        let fy = (FRAC_PI_2 - lat) / PI * h as f64 - 0.5;
        let x0 = fx.floor();
        let tx = fx - x0;
        let xa = (x0 as i64).rem_euclid(w as i64) as usize;
        let xb = (xa + 1) % w;
        let fy = fy.clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor();
        let ty = fy - y0;
        let ya = y0 as usize;
        let yb = (ya + 1).min(h - 1);
        let mut out = [0.0; 3];
        let (p00, p10) = (self.image.pixel(xa, ya), self.image.pixel(xb, ya));
        let (p01, p11) = (self.image.pixel(xa, yb), self.image.pixel(xb, yb));
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * tx;
            let bottom = p01[c] + (p11[c] - p01[c]) * tx;
            out[c] = (top + (bottom - top) * ty).clamp(0.0, 1.0);
        }
        out
    }
}

/// Longitude/latitude of a continuous panorama coordinate.
pub fn pixel_to_lon_lat(fx: f64, fy: f64, width: usize, height: usize) -> (f64, f64) {
    (fx / width as f64 * TAU - PI, FRAC_PI_2 - fy / height as f64 * PI)
}

pub fn lon_lat_to_direction(lon: f64, lat: f64) -> Vector3<f64> {
    Vector3::new(lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos())
}

pub fn direction_to_lon_lat(d: &Vector3<f64>) -> (f64, f64) {
    let lon = d.x.atan2(d.z);
    let lat = d.y.atan2((d.x * d.x + d.z * d.z).sqrt());
    (lon, lat)
}

/// Pinhole intrinsics derived from a horizontal field of view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fov_deg,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "fov {}° must lie in (0, 180)",
                self.fov_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Focal length in pixels, `(width / 2) / tan(fov / 2)`.
    pub fn focal(&self) -> f64 {
        (self.width as f64 * 0.5) / (self.fov_deg.to_radians() * 0.5).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 * 0.5, self.height as f64 * 0.5)
    }

    /// Camera-frame ray with unit z through continuous pixel coordinate `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Vector3::new((u - cx) / f, (cy - v) / f, 1.0)
    }

    /// Continuous pixel coordinate of a camera-frame point with `z > 0`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        (cx + f * p.x / p.z, cy - f * p.y / p.z)
    }
}

/// Camera-to-world yaw rotation of view `index`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRotation {
    pub index: usize,
    pub matrix: Matrix3<f64>,
}

impl ViewRotation {
    pub fn yaw(&self) -> f64 {
        self.index as f64 * YAW_STEP
    }

    /// World-to-camera pose of a camera at the origin with this rotation.
    pub fn pose(&self) -> CameraPose {
        CameraPose::from_matrix(&self.matrix.transpose(), Vector3::zeros())
    }
}

fn check_index(i: usize) -> Result<()> {
    if i >= VIEW_COUNT {
        Err(Error::IndexOutOfRange(i))
    } else {
        Ok(())
    }
}

pub fn rotation_matrix(i: usize) -> Result<ViewRotation> {
    check_index(i)?;
    let (s, c) = (i as f64 * YAW_STEP).sin_cos();
    #[rustfmt::skip]
    let matrix = Matrix3::new(
        c,   0.0, s,
        0.0, 1.0, 0.0,
        -s,  0.0, c,
    );
    Ok(ViewRotation { index: i, matrix })
}

/// The full 30-view yaw schedule with shared intrinsics.
pub fn sliding_schedule(intrinsics: &CameraIntrinsics) -> Result<Vec<(ViewRotation, CameraIntrinsics)>> {
    intrinsics.validate()?;
    (0..VIEW_COUNT)
        .map(|i| Ok((rotation_matrix(i)?, *intrinsics)))
        .collect()
}

/// A pinhole image with its camera and optional per-pixel z-depth.
#[derive(Clone, Debug, PartialEq)]
pub struct PerspectiveView {
    pub image: Image,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub depth: Option<Image>,
}

/// Longitude/latitude seen through continuous pixel `(u, v)` of view `rot`.
pub fn view_pixel_to_lon_lat(rot: &ViewRotation, intr: &CameraIntrinsics, u: f64, v: f64) -> (f64, f64) {
    direction_to_lon_lat(&(rot.matrix * intr.ray(u, v)))
}

/// Inverse of [`view_pixel_to_lon_lat`]; `None` when the direction lies
/// behind the camera.
pub fn lon_lat_to_view_pixel(
    rot: &ViewRotation,
    intr: &CameraIntrinsics,
    lon: f64,
    lat: f64,
) -> Option<(f64, f64)> {
    let cam = rot.matrix.transpose() * lon_lat_to_direction(lon, lat);
    (cam.z > 0.0).then(|| intr.project(&cam))
}

pub fn equirect_to_perspective(pano: &EquirectImage, rot: &ViewRotation, intr: &CameraIntrinsics) -> PerspectiveView {
    let (w, h) = (intr.width, intr.height);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * 3);
            for x in 0..w {
                let (lon, lat) = view_pixel_to_lon_lat(rot, intr, x as f64 + 0.5, y as f64 + 0.5);
                row.extend_from_slice(&pano.sample(lon, lat));
            }
            row
        })
        .collect();
    let image = Image::from_vec(w, h, 3, rows.concat()).expect("row-major view buffer");
    PerspectiveView {
        image,
        intrinsics: *intr,
        pose: rot.pose(),
        depth: None,
    }
}

/// Horizontal angular overlap of two schedule views divided by the FOV.
pub fn overlap_fraction(i: usize, j: usize, intr: &CameraIntrinsics) -> Result<f64> {
    check_index(i)?;
    check_index(j)?;
    intr.validate()?;
    let steps = (i as i64 - j as i64).rem_euclid(VIEW_COUNT as i64) as usize;
    let steps = steps.min(VIEW_COUNT - steps);
    let gap = steps as f64 * 12.0;
    Ok(((intr.fov_deg - gap) / intr.fov_deg).clamp(0.0, 1.0))
}
