//! Training objectives and image quality metrics.
//!
//! Each loss comes with a `*_grad` companion returning the value together
//! with its gradient with respect to the first (rendered) argument.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::{Endpoint, HookError};
use crate::raster::Image;

/// Image descriptor vector tagged with the provider that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
    source_id: String,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Contract("embedding must have at least one component".into()));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("embedding is not finite".into()));
        }
        if vector.iter().all(|v| *v == 0.0) {
            return Err(Error::Contract("embedding is the zero vector".into()));
        }
        Ok(Self {
            vector,
            source_id: source_id.into(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, image: &Image) -> Result<Embedding>;

    /// Pullback of `∂L/∂embedding` to `∂L/∂image`, when the provider is
    /// differentiable. Opaque providers return `None`.
    fn backward(&self, _image: &Image, _grad: &[f64]) -> Option<Image> {
        None
    }
}

/// Deterministic non-semantic descriptor: per-channel mean and variance
/// over a 4×4 grid of cells (96 components for RGB).
#[derive(Clone, Copy, Debug, Default)]
pub struct FallbackEmbedder;

pub const FALLBACK_SOURCE: &str = "fallback/grid-moments-4x4";
const GRID: usize = 4;

fn cell_bounds(i: usize, n: usize) -> (usize, usize) {
    (i * n / GRID, (i + 1) * n / GRID)
}

impl FallbackEmbedder {
    fn check(image: &Image) -> Result<()> {
        if image.width() < GRID || image.height() < GRID {
            return Err(Error::Dimension(format!(
                "fallback embedding needs at least {GRID}x{GRID} pixels, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }
}

impl Embedder for FallbackEmbedder {
    fn embed(&self, image: &Image) -> Result<Embedding> {
        Self::check(image)?;
        let ch = image.channels();
        let mut v = Vec::with_capacity(GRID * GRID * ch * 2);
        for gy in 0..GRID {
            let (y0, y1) = cell_bounds(gy, image.height());
            for gx in 0..GRID {
                let (x0, x1) = cell_bounds(gx, image.width());
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..ch {
                    let (mut s, mut s2) = (0.0, 0.0);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let p = image.get(x, y, c);
                            s += p;
                            s2 += p * p;
                        }
                    }
                    let mean = s / n;
                    v.push(mean);
                    v.push((s2 / n - mean * mean).max(0.0));
                }
            }
        }
        Embedding::new(v, FALLBACK_SOURCE)
    }

    fn backward(&self, image: &Image, grad: &[f64]) -> Option<Image> {
        Self::check(image).ok()?;
        let ch = image.channels();
        if grad.len() != GRID * GRID * ch * 2 {
            return None;
        }
        let mut out = Image::new(image.width(), image.height(), ch);
        let mut k = 0;
        for gy in 0..GRID {
            let (y0, y1) = cell_bounds(gy, image.height());
            for gx in 0..GRID {
                let (x0, x1) = cell_bounds(gx, image.width());
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..ch {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += image.get(x, y, c);
                        }
                    }
                    let mean = s / n;
                    let (g_mean, g_var) = (grad[k], grad[k + 1]);
                    k += 2;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let p = image.get(x, y, c);
                            let g = g_mean / n + g_var * 2.0 * (p - mean) / n;
                            out.set(x, y, c, out.get(x, y, c) + g);
                        }
                    }
                }
            }
        }
        Some(out)
    }
}

/// Embedder behind a hook; the response is raw little-endian float32.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    pub endpoint: Endpoint,
}

impl ExternalEmbedder {
    pub fn embed_hook(&self, image: &Image) -> std::result::Result<Vec<f64>, HookError> {
        let bytes = self.endpoint.invoke(image, "", "embedding.bin")?;
        if bytes.is_empty() || bytes.len() % 4 != 0 {
            return Err(HookError::Output(format!(
                "embedding payload of {} bytes is not a float32 vector",
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }
}

impl Embedder for ExternalEmbedder {
    fn embed(&self, image: &Image) -> Result<Embedding> {
        let v = self.embed_hook(image)?;
        Embedding::new(v, self.endpoint.describe())
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l_rgb(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.ensure_same_shape(target, "l_rgb")?;
    let n = rendered.data().len() as f64;
    Ok(rendered
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

pub fn l_rgb_grad(rendered: &Image, target: &Image) -> Result<(f64, Image)> {
    let value = l_rgb(rendered, target)?;
    let n = rendered.data().len() as f64;
    let mut g = Image::new(rendered.width(), rendered.height(), rendered.channels());
    for ((o, a), b) in g.data_mut().iter_mut().zip(rendered.data()).zip(target.data()) {
        *o = if a > b {
            1.0 / n
        } else if a < b {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((value, g))
}

/// `1 − cos(a, b)`.
pub fn l_sem(a: &Embedding, b: &Embedding) -> Result<f64> {
    l_sem_grad(a, b).map(|(v, _)| v)
}

/// `1 − cos(a, b)` and its gradient with respect to `a`.
pub fn l_sem_grad(a: &Embedding, b: &Embedding) -> Result<(f64, Vec<f64>)> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (va, vb) = (a.vector(), b.vector());
    let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Contract("embedding is the zero vector".into()));
    }
    let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    let grad = va
        .iter()
        .zip(vb)
        .map(|(x, y)| -(y / (na * nb) - dot * x / (na * na * na * nb)))
        .collect();
    Ok((1.0 - cos, grad))
}

pub const GEO_EPSILON: f64 = 1e-8;

/// `1 − Pearson(rendered, reference)` over all finite pixel pairs.
pub fn l_geo(rendered: &Image, reference: &Image, eps: f64) -> Result<f64> {
    let mask: Vec<bool> = rendered
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| a.is_finite() && b.is_finite())
        .collect();
    l_geo_masked(rendered, reference, &mask, eps).map(|(v, _)| v)
}

/// `1 − Pearson` over pixels where `mask` is set, with the gradient with
/// respect to `rendered`. Returns `1.0` and a zero gradient when either
/// variance falls below `eps`.
pub fn l_geo_masked(rendered: &Image, reference: &Image, mask: &[bool], eps: f64) -> Result<(f64, Image)> {
    rendered.ensure_same_shape(reference, "l_geo")?;
    if rendered.channels() != 1 {
        return Err(Error::Contract("depth maps must have one channel".into()));
    }
    if mask.len() != rendered.pixel_count() {
        return Err(Error::Contract("depth mask does not match the map size".into()));
    }
    let (x, y) = (rendered.data(), reference.data());
    let n = mask.iter().filter(|m| **m).count();
    if n < 2 {
        return Err(Error::Contract(format!("l_geo needs at least 2 valid pixels, got {n}")));
    }
    let nf = n as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in (0..x.len()).filter(|&i| mask[i]) {
        mx += x[i];
        my += y[i];
    }
    mx /= nf;
    my /= nf;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in (0..x.len()).filter(|&i| mask[i]) {
        let (a, b) = (x[i] - mx, y[i] - my);
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    let mut grad = Image::new(rendered.width(), rendered.height(), 1);
    if saa / nf < eps || sbb / nf < eps {
        return Ok((1.0, grad));
    }
    let denom = (saa * sbb).sqrt();
    let r = sab / denom;
    let g = grad.data_mut();
    for i in (0..x.len()).filter(|&i| mask[i]) {
        let (a, b) = (x[i] - mx, y[i] - my);
        g[i] = -(b / denom - r * a / saa);
    }
    Ok((1.0 - r.clamp(-1.0, 1.0), grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_sem: f64,
    pub l_geo: f64,
    pub total: f64,
    pub lambda_sem: f64,
    pub lambda_geo: f64,
}

pub fn total_loss(l_rgb: f64, l_sem: f64, l_geo: f64, lambda_sem: f64, lambda_geo: f64) -> LossReport {
    LossReport {
        l_rgb,
        l_sem,
        l_geo,
        total: l_rgb + lambda_sem * l_sem + lambda_geo * l_geo,
        lambda_sem,
        lambda_geo,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.ensure_same_shape(target, "psnr")?;
    let n = rendered.data().len() as f64;
    let mse = rendered
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized separable Gaussian window; shrinks to the image when it is
/// smaller than 11 pixels.
fn ssim_window(w: usize, h: usize) -> Vec<f64> {
    let k = SSIM_WINDOW.min(w).min(h);
    let c = (k as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

struct SsimCoeffs {
    value: f64,
    // ∂S/∂μx, ∂S/∂E[x²], ∂S/∂E[xy] per window position
    d_mu: Vec<f64>,
    d_xx: Vec<f64>,
    d_xy: Vec<f64>,
}

fn ssim_channel(x: &Image, y: &Image, c: usize, win: &[f64], with_grad: bool) -> SsimCoeffs {
    let k = win.len();
    let (w, h) = (x.width(), x.height());
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut out = SsimCoeffs {
        value: 0.0,
        d_mu: Vec::new(),
        d_xx: Vec::new(),
        d_xy: Vec::new(),
    };
    if with_grad {
        out.d_mu = vec![0.0; ow * oh];
        out.d_xx = vec![0.0; ow * oh];
        out.d_xy = vec![0.0; ow * oh];
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, wy) in win.iter().enumerate() {
                for (i, wx) in win.iter().enumerate() {
                    let wt = wx * wy;
                    let a = x.get(ox + i, oy + j, c);
                    let b = y.get(ox + i, oy + j, c);
                    mx += wt * a;
                    my += wt * b;
                    exx += wt * a * a;
                    eyy += wt * b * b;
                    exy += wt * a * b;
                }
            }
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * (exy - mx * my) + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            out.value += s;
            if with_grad {
                let o = oy * ow + ox;
                out.d_mu[o] = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - s * 2.0 * mx / b1 + s * 2.0 * mx / b2;
                out.d_xx[o] = -s / b2;
                out.d_xy[o] = 2.0 * a1 / (b1 * b2);
            }
        }
    }
    out
}

/// Mean SSIM over valid window positions and channels.
pub fn ssim(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.ensure_same_shape(target, "ssim")?;
    let win = ssim_window(rendered.width(), rendered.height());
    let k = win.len();
    let count = ((rendered.width() - k + 1) * (rendered.height() - k + 1) * rendered.channels()) as f64;
    let total: f64 = (0..rendered.channels())
        .map(|c| ssim_channel(rendered, target, c, &win, false).value)
        .sum();
    Ok(total / count)
}

/// SSIM and its gradient with respect to `rendered`.
pub fn ssim_grad(rendered: &Image, target: &Image) -> Result<(f64, Image)> {
    rendered.ensure_same_shape(target, "ssim")?;
    let (w, h, ch) = (rendered.width(), rendered.height(), rendered.channels());
    let win = ssim_window(w, h);
    let k = win.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let count = (ow * oh * ch) as f64;
    let mut grad = Image::new(w, h, ch);
    let mut total = 0.0;
    for c in 0..ch {
        let co = ssim_channel(rendered, target, c, &win, true);
        total += co.value;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = oy * ow + ox;
                let (dm, dxx, dxy) = (co.d_mu[o], co.d_xx[o], co.d_xy[o]);
                for (j, wy) in win.iter().enumerate() {
                    for (i, wx) in win.iter().enumerate() {
                        let wt = wx * wy;
                        let (px, py) = (ox + i, oy + j);
                        let a = rendered.get(px, py, c);
                        let b = target.get(px, py, c);
                        let g = wt * (dm + 2.0 * dxx * a + dxy * b) / count;
                        grad.set(px, py, c, grad.get(px, py, c) + g);
                    }
                }
            }
        }
    }
    Ok((total / count, grad))
}

pub fn image_metrics(rendered: &Image, target: &Image) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr: psnr(rendered, target)?,
        ssim: ssim(rendered, target)?,
    })
}

/// `(1 − w)·MAE + w·(1 − SSIM)` with its gradient; `w = 0` is plain MAE.
pub fn photometric_grad(rendered: &Image, target: &Image, ssim_weight: f64) -> Result<(f64, Image)> {
    let (mae, mut g) = l_rgb_grad(rendered, target)?;
    if ssim_weight == 0.0 {
        return Ok((mae, g));
    }
    let (s, gs) = ssim_grad(rendered, target)?;
    for (o, d) in g.data_mut().iter_mut().zip(gs.data()) {
        *o = (1.0 - ssim_weight) * *o - ssim_weight * d;
    }
    Ok(((1.0 - ssim_weight) * mae + ssim_weight * (1.0 - s), g))
}
