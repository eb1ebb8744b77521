//! Back-projection of per-view depth into colored point clouds, voxel
//! merging, Gaussian seeding and the confidence-weighted pointmap loss.

use std::num::NonZeroUsize;
use std::path::Path;

use indexmap::IndexMap;
use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::io::{read_pfm, write_pfm};
use crate::panorama::PerspectiveView;
use crate::raster::Image;
use crate::rasterizer::DILATION;
use crate::scene::Gaussian3D;

/// Per-pixel 3D points with confidences, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
    pub colors: Option<Vec<Vector3<f64>>>,
    /// Pixels without a usable point. Invalid entries are ignored everywhere.
    pub valid: Vec<bool>,
}

impl PointMap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        confidence: Vec<f64>,
        colors: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        let n = width * height;
        if points.len() != n || confidence.len() != n || colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::Dimension(format!("pointmap buffers do not match {width}x{height}")));
        }
        if let Some(i) = confidence.iter().position(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Contract(format!(
                "confidence {} at pixel {i} must be positive",
                confidence[i]
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Contract(format!("point at pixel {i} is not finite")));
        }
        Ok(Self {
            width,
            height,
            points,
            confidence,
            colors,
            valid: vec![true; n],
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    fn mean_norm(&self) -> (f64, usize) {
        let (mut sum, mut n) = (0.0, 0);
        for (p, _) in self.points.iter().zip(&self.valid).filter(|(_, v)| **v) {
            sum += p.norm();
            n += 1;
        }
        (if n > 0 { sum / n as f64 } else { 0.0 }, n)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Half-open bounding box diagonal length.
    pub fn diagonal(&self) -> f64 {
        bbox_diagonal(self.positions.iter())
    }
}

fn bbox_diagonal<'a>(points: impl Iterator<Item = &'a Vector3<f64>>) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
        any = true;
    }
    if any {
        (hi - lo).norm()
    } else {
        0.0
    }
}

/// Lift every pixel with positive z-depth to a world-frame point with
/// confidence 1. Pixels with nonpositive or non-finite depth are invalid.
pub fn backproject(view: &PerspectiveView) -> Result<PointMap> {
    view.intrinsics.validate()?;
    view.pose.validate()?;
    let depth = view
        .depth
        .as_ref()
        .ok_or_else(|| Error::Contract("view has no depth map".into()))?;
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    if (depth.width(), depth.height(), depth.channels()) != (w, h, 1) {
        return Err(Error::Dimension(format!(
            "depth is {}x{}x{}, view is {w}x{h}x1",
            depth.width(),
            depth.height(),
            depth.channels()
        )));
    }
    if (view.image.width(), view.image.height()) != (w, h) || view.image.channels() != 3 {
        return Err(Error::Dimension("view image does not match its intrinsics".into()));
    }
    let n = w * h;
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let z = depth.get(x, y, 0);
            let c = view.image.pixel(x, y);
            colors.push(Vector3::new(c[0], c[1], c[2]));
            if z.is_finite() && z > 0.0 {
                let cam = view.intrinsics.ray(x as f64 + 0.5, y as f64 + 0.5) * z;
                points.push(view.pose.to_world(&cam));
                valid.push(true);
            } else {
                points.push(Vector3::zeros());
                valid.push(false);
            }
        }
    }
    Ok(PointMap {
        width: w,
        height: h,
        points,
        confidence: vec![1.0; n],
        colors: Some(colors),
        valid,
    })
}

/// `1/512` of the bounding-box diagonal of all valid points.
pub fn default_voxel_size(maps: &[PointMap]) -> f64 {
    let pts = maps
        .iter()
        .flat_map(|m| m.points.iter().zip(&m.valid).filter(|(_, v)| **v).map(|(p, _)| p));
    bbox_diagonal(pts) / 512.0
}

#[derive(Default)]
struct VoxelSum {
    weight: f64,
    position: Vector3<f64>,
    color: Vector3<f64>,
}

/// Concatenate valid points and collapse each occupied voxel to its
/// confidence-weighted centroid and color. Voxels appear in order of first
/// occupation.
pub fn merge_clouds(maps: &[PointMap], voxel: f64) -> Result<PointCloud> {
    if maps.is_empty() {
        return Err(Error::Contract("merge needs at least one pointmap".into()));
    }
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::Contract(format!("voxel edge {voxel} must be positive")));
    }
    let mut voxels: IndexMap<[i64; 3], VoxelSum> = IndexMap::new();
    for m in maps {
        for i in 0..m.points.len() {
            if !m.valid[i] {
                continue;
            }
            let p = m.points[i];
            let key = [
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            ];
            let c = m.confidence[i];
            let color = m.colors.as_ref().map_or(Vector3::repeat(0.5), |cs| cs[i]);
            let v = voxels.entry(key).or_default();
            v.weight += c;
            v.position += p * c;
            v.color += color * c;
        }
    }
    if voxels.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut cloud = PointCloud::default();
    for v in voxels.values() {
        cloud.positions.push(v.position / v.weight);
        cloud.colors.push((v.color / v.weight).map(|c| c.clamp(0.0, 1.0)));
    }
    Ok(cloud)
}

/// `Σ_p C_p · ‖X_p/z − X̄_p/z̄‖ − β · log C_p` over pixels valid in both
/// maps, with `z`, `z̄` the mean point norms of each map.
pub fn confidence_loss(pred: &PointMap, gt: &PointMap, beta: f64) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimension(format!(
            "pointmaps are {}x{} and {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (z_pred, _) = pred.mean_norm();
    let (z_gt, _) = gt.mean_norm();
    if !(z_pred > 0.0) || !(z_gt > 0.0) {
        return Err(Error::Degenerate("pointmap has zero mean norm".into()));
    }
    let mut loss = 0.0;
    for i in 0..pred.points.len() {
        if !(pred.valid[i] && gt.valid[i]) {
            continue;
        }
        let c = pred.confidence[i];
        if !(c > 0.0) {
            return Err(Error::Contract(format!("confidence {c} at pixel {i} must be positive")));
        }
        let regr = (pred.points[i] / z_pred - gt.points[i] / z_gt).norm();
        loss += c * regr - beta * c.ln();
    }
    Ok(loss)
}

/// How a point cloud is turned into initial Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOptions {
    /// Neighbors averaged for the local spacing estimate.
    pub neighbors: usize,
    /// Gaussian standard deviation as a multiple of local spacing.
    pub scale_factor: f64,
    /// Peak compositing weight the seeds should have when seen from `viewer`.
    pub target_sigma: f64,
    /// Focal length (px) of the camera used to size the opacity.
    pub focal: f64,
    pub viewer: Vector3<f64>,
}

impl Default for SeedOptions {
    fn default() -> Self {
        Self {
            neighbors: 3,
            scale_factor: 1.0,
            target_sigma: 0.7,
            focal: 256.0,
            viewer: Vector3::zeros(),
        }
    }
}

/// One isotropic Gaussian per point, with scale from the mean distance to
/// the nearest neighbors and opacity chosen so that the projected peak
/// weight seen from `opts.viewer` is roughly `opts.target_sigma`.
pub fn gaussians_from_cloud(cloud: &PointCloud, opts: &SeedOptions) -> Result<Vec<Gaussian3D>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(opts.target_sigma > 0.0 && opts.target_sigma < 1.0) {
        return Err(Error::Contract(format!("target sigma {} must lie in (0,1)", opts.target_sigma)));
    }
    let pts: Vec<[f64; 3]> = cloud.positions.iter().map(|p| [p.x, p.y, p.z]).collect();
    let fallback = (cloud.diagonal() / 512.0).max(1e-6);
    let spacing: Vec<f64> = if pts.len() > 1 {
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&pts);
        let k = opts.neighbors.max(1).min(pts.len() - 1);
        let qty = NonZeroUsize::new(k + 1).expect("k + 1 > 0");
        pts.iter()
            .map(|q| {
                let hits = tree.nearest_n::<SquaredEuclidean>(q, qty);
                let (sum, n) = hits
                    .iter()
                    .filter(|h| h.distance > 0.0)
                    .fold((0.0, 0usize), |(s, n), h| (s + h.distance.sqrt(), n + 1));
                if n > 0 {
                    sum / n as f64
                } else {
                    fallback
                }
            })
            .collect()
    } else {
        vec![fallback]
    };
    let strength = -(1.0 - opts.target_sigma).ln();
    Ok(cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .zip(&spacing)
        .map(|((p, c), d)| {
            let std = (d * opts.scale_factor).max(1e-6);
            let z = (p - opts.viewer).norm().max(1e-3);
            let r = opts.focal * std / z;
            let opacity = strength * (r * r + DILATION);
            Gaussian3D::isotropic(*p, c.map(|v| v.clamp(0.0, 1.0)), opacity, std)
        })
        .collect())
}

/// Writes `<stem>.points.pfm` (xyz as color channels) and
/// `<stem>.conf.pfm`. Invalid pixels carry confidence 0.
pub fn write_pointmap(stem: impl AsRef<Path>, map: &PointMap) -> Result<()> {
    let stem = stem.as_ref();
    let pts = Image::from_fn(map.width, map.height, 3, |x, y, px| {
        let p = map.points[y * map.width + x];
        px.copy_from_slice(&[p.x, p.y, p.z]);
    });
    let conf = Image::from_fn(map.width, map.height, 1, |x, y, px| {
        let i = y * map.width + x;
        px[0] = if map.valid[i] { map.confidence[i] } else { 0.0 };
    });
    write_pfm(suffixed(stem, "points.pfm"), &pts)?;
    write_pfm(suffixed(stem, "conf.pfm"), &conf)
}

pub fn read_pointmap(stem: impl AsRef<Path>) -> Result<PointMap> {
    let stem = stem.as_ref();
    let pts = read_pfm(suffixed(stem, "points.pfm"))?;
    let conf = read_pfm(suffixed(stem, "conf.pfm"))?;
    if pts.channels() != 3 || conf.channels() != 1 || (pts.width(), pts.height()) != (conf.width(), conf.height()) {
        return Err(Error::Dimension("pointmap and confidence files disagree".into()));
    }
    let n = pts.pixel_count();
    let mut map = PointMap {
        width: pts.width(),
        height: pts.height(),
        points: Vec::with_capacity(n),
        confidence: Vec::with_capacity(n),
        colors: None,
        valid: Vec::with_capacity(n),
    };
    for (p, &c) in pts.data().chunks_exact(3).zip(conf.data()) {
        let p = Vector3::new(p[0], p[1], p[2]);
        let ok = c.is_finite() && c > 0.0 && p.iter().all(|v| v.is_finite());
        map.points.push(if ok { p } else { Vector3::zeros() });
        map.confidence.push(if ok { c } else { 1.0 });
        map.valid.push(ok);
    }
    Ok(map)
}

fn suffixed(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    s.into()
}
