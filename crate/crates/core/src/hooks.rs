//! External model providers ("hooks") and offline mock implementations.
//!
//! A hook is reached either as a subprocess invoked as
//! `program [args..] <input path> <prompt> <output path>` (exit status 0
//! means success and the output file holds the result), or as an HTTP
//! endpoint receiving a multipart POST with fields `image` (PNG bytes) and
//! `prompt`, whose response body is the result.

use std::path::PathBuf;
use std::process::Command;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ureq::unversioned::multipart::{Form, Part};

use crate::io::{decode_pfm, decode_png, encode_png, BitDepth};
use crate::raster::Image;

#[derive(Debug, Error)]
pub enum HookError {
    #[error("could not start {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{program} exited with status {status}: {stderr}")]
    Exit {
        program: String,
        status: i32,
        stderr: String,
    },
    #[error("endpoint {endpoint} unreachable or failed: {message}")]
    Http { endpoint: String, message: String },
    #[error("hook returned unusable output: {0}")]
    Output(String),
    #[error("hook returned a {got:?} image, expected {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("hook i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Failed(String),
}

impl HookError {
    /// Endpoint or program the error originated from, when known.
    pub fn endpoint(&self) -> Option<&str> {
        match self {
            HookError::Spawn { program, .. } | HookError::Exit { program, .. } => Some(program),
            HookError::Http { endpoint, .. } => Some(endpoint),
            _ => None,
        }
    }
}

/// Transport of an external hook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoint {
    Subprocess {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Http { url: String },
}

impl Endpoint {
    pub fn describe(&self) -> String {
        match self {
            Endpoint::Subprocess { program, .. } => program.clone(),
            Endpoint::Http { url } => url.clone(),
        }
    }

    /// Sends `image` and `prompt` and returns the raw result bytes.
    pub fn invoke(&self, image: &Image, prompt: &str, output_name: &str) -> Result<Vec<u8>, HookError> {
        let png = encode_png(image, BitDepth::Sixteen).map_err(|e| HookError::Output(e.to_string()))?;
        match self {
            Endpoint::Subprocess { program, args } => {
                let dir = tempfile::tempdir()?;
                let input = dir.path().join("input.png");
                let output: PathBuf = dir.path().join(output_name);
                std::fs::write(&input, &png)?;
                let result = Command::new(program)
                    .args(args)
                    .arg(&input)
                    .arg(prompt)
                    .arg(&output)
                    .output()
                    .map_err(|source| HookError::Spawn {
                        program: program.clone(),
                        source,
                    })?;
                if !result.status.success() {
                    return Err(HookError::Exit {
                        program: program.clone(),
                        status: result.status.code().unwrap_or(-1),
                        stderr: String::from_utf8_lossy(&result.stderr).trim().to_string(),
                    });
                }
                std::fs::read(&output).map_err(|e| {
                    HookError::Output(format!("{program} did not write {}: {e}", output.display()))
                })
            }
            Endpoint::Http { url } => {
                let http = |message: String| HookError::Http {
                    endpoint: url.clone(),
                    message,
                };
                let part = Part::bytes(&png)
                    .file_name("input.png")
                    .mime_str("image/png")
                    .map_err(|e| http(e.to_string()))?;
                let form = Form::new().part("image", part).text("prompt", prompt);
                let mut response = ureq::post(url).send(form).map_err(|e| http(e.to_string()))?;
                response
                    .body_mut()
                    .with_config()
                    .limit(1 << 30)
                    .read_to_vec()
                    .map_err(|e| http(e.to_string()))
            }
        }
    }
}

/// Image-to-image provider: denoiser, generator, or super-resolution.
pub trait ImageHook: Send + Sync {
    fn apply(&self, image: &Image, prompt: &str) -> Result<Image, HookError>;
}

impl<T: ImageHook + ?Sized> ImageHook for &T {
    fn apply(&self, image: &Image, prompt: &str) -> Result<Image, HookError> {
        (**self).apply(image, prompt)
    }
}

impl<T: ImageHook + ?Sized> ImageHook for Box<T> {
    fn apply(&self, image: &Image, prompt: &str) -> Result<Image, HookError> {
        (**self).apply(image, prompt)
    }
}

/// External image hook returning a PNG.
#[derive(Clone, Debug)]
pub struct ExternalImageHook {
    pub endpoint: Endpoint,
    /// Require the result to have the input's dimensions.
    pub same_shape: bool,
}

impl ImageHook for ExternalImageHook {
    fn apply(&self, image: &Image, prompt: &str) -> Result<Image, HookError> {
        let bytes = self.endpoint.invoke(image, prompt, "output.png")?;
        let out = decode_png(&bytes).map_err(|e| HookError::Output(e.to_string()))?;
        if self.same_shape && (out.width(), out.height()) != (image.width(), image.height()) {
            return Err(HookError::Shape {
                expected: (image.width(), image.height()),
                got: (out.width(), out.height()),
            });
        }
        Ok(out)
    }
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl ImageHook for IdentityHook {
    fn apply(&self, image: &Image, _prompt: &str) -> Result<Image, HookError> {
        Ok(image.clone())
    }
}

/// Box blur with clamped borders, a stand-in for a smoothing denoiser.
#[derive(Clone, Copy, Debug)]
pub struct BlurHook {
    pub radius: usize,
}

impl Default for BlurHook {
    fn default() -> Self {
        Self { radius: 1 }
    }
}

impl ImageHook for BlurHook {
    fn apply(&self, image: &Image, _prompt: &str) -> Result<Image, HookError> {
        let r = self.radius as i64;
        let (w, h) = (image.width() as i64, image.height() as i64);
        Ok(Image::from_fn(image.width(), image.height(), image.channels(), |x, y, px| {
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x as i64 + dx).clamp(0, w - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, h - 1) as usize;
                    for (o, v) in px.iter_mut().zip(image.pixel(sx, sy)) {
                        *o += v;
                    }
                    n += 1.0;
                }
            }
            px.iter_mut().for_each(|v| *v /= n);
        }))
    }
}

/// Adds a constant to every value; used to exercise fusion arithmetic.
#[derive(Clone, Copy, Debug)]
pub struct OffsetHook {
    pub delta: f64,
}

impl ImageHook for OffsetHook {
    fn apply(&self, image: &Image, _prompt: &str) -> Result<Image, HookError> {
        Ok(image.map(|v| v + self.delta))
    }
}

/// Bicubic (Catmull-Rom) upscaling, the offline super-resolution mock.
#[derive(Clone, Copy, Debug)]
pub struct BicubicUpscale {
    pub factor: u32,
}

impl Default for BicubicUpscale {
    fn default() -> Self {
        Self { factor: 2 }
    }
}

impl ImageHook for BicubicUpscale {
    fn apply(&self, image: &Image, _prompt: &str) -> Result<Image, HookError> {
        if image.channels() != 3 {
            return Err(HookError::Output("bicubic upscale expects RGB".into()));
        }
        let (w, h) = (image.width() as u32, image.height() as u32);
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w, h, image.data().iter().map(|&v| v as f32).collect())
                .expect("rgb buffer size");
        let up = image::imageops::resize(&buf, w * self.factor, h * self.factor, FilterType::CatmullRom);
        let data = up.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect();
        Ok(Image::from_vec((w * self.factor) as usize, (h * self.factor) as usize, 3, data)
            .expect("upscaled buffer size"))
    }
}

/// Critic verdict on a generated panorama.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub score: f64,
    pub prompt: String,
    #[serde(default)]
    pub feedback: String,
}

pub trait Critic: Send + Sync {
    fn critique(&self, panorama: &Image, prompt: &str) -> Result<CriticVerdict, HookError>;
}

/// External critic; the result body (or output file) is JSON
/// `{"score": f, "prompt": s, "feedback": s}`.
#[derive(Clone, Debug)]
pub struct ExternalCritic {
    pub endpoint: Endpoint,
}

impl Critic for ExternalCritic {
    fn critique(&self, panorama: &Image, prompt: &str) -> Result<CriticVerdict, HookError> {
        let bytes = self.endpoint.invoke(panorama, prompt, "verdict.json")?;
        serde_json::from_slice(&bytes).map_err(|e| HookError::Output(format!("critic JSON: {e}")))
    }
}

/// Monocular depth provider.
pub trait DepthEstimator: Send + Sync {
    fn estimate(&self, image: &Image) -> Result<Image, HookError>;
}

/// External depth hook; the result is a one-channel PFM.
#[derive(Clone, Debug)]
pub struct ExternalDepth {
    pub endpoint: Endpoint,
}

impl DepthEstimator for ExternalDepth {
    fn estimate(&self, image: &Image) -> Result<Image, HookError> {
        let bytes = self.endpoint.invoke(image, "", "depth.pfm")?;
        let depth = decode_pfm(&bytes).map_err(|e| HookError::Output(e.to_string()))?;
        if depth.channels() != 1 || (depth.width(), depth.height()) != (image.width(), image.height()) {
            return Err(HookError::Shape {
                expected: (image.width(), image.height()),
                got: (depth.width(), depth.height()),
            });
        }
        Ok(depth)
    }
}
