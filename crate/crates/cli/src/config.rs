//! The pipeline configuration document and flat `key=value` overrides.

use std::path::{Path, PathBuf};

use panosplat::hooks::{BicubicUpscale, BlurHook, Endpoint, ExternalCritic, ExternalDepth, ExternalImageHook, IdentityHook, ImageHook};
use panosplat::losses::ExternalEmbedder;
use panosplat::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::PipelineError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub schedule: Schedule,
    pub refine: RefineConfig,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub hooks: Hooks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Equirectangular input; the refine stage's result takes precedence.
    pub panorama: Option<PathBuf>,
    /// Pre-sliced views (`view_XX.png` plus `cameras.json`) used instead of
    /// the slide stage output.
    pub views_dir: Option<PathBuf>,
    /// Per-view z-depth as `depth_XX.pfm`.
    pub depth_dir: Option<PathBuf>,
    /// Target embeddings as `view_XX.bin` / `view_XX.json`.
    pub embeddings_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            panorama: None,
            views_dir: None,
            depth_dir: None,
            embeddings_dir: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub fov_deg: f64,
    /// Side length of the square perspective views.
    pub view_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            fov_deg: 90.0,
            view_size: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub prompt: String,
    pub max_rounds: usize,
    pub panorama_height: usize,
    /// Square window side and stride for the optional denoise pass.
    pub denoise_window: usize,
    pub denoise_stride: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            max_rounds: 3,
            panorama_height: 512,
            denoise_window: 256,
            denoise_stride: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Voxel edge for merging; `1/512` of the cloud diagonal when unset.
    pub voxel: Option<f64>,
    pub neighbors: usize,
    pub scale_factor: f64,
    pub target_sigma: f64,
    pub background: [f64; 3],
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            voxel: None,
            neighbors: 3,
            scale_factor: 1.0,
            target_sigma: 0.7,
            background: [0.0; 3],
        }
    }
}

/// Where a provider lives: an external process, an HTTP endpoint, or one
/// of the built-in image mocks (`identity`, `blur`, `upscale`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HookSpec {
    Subprocess {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Http {
        url: String,
    },
    Builtin {
        name: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hooks {
    pub generator: Option<HookSpec>,
    pub critic: Option<HookSpec>,
    pub denoiser: Option<HookSpec>,
    pub embedder: Option<HookSpec>,
    pub depth_estimator: Option<HookSpec>,
    pub super_resolution: Option<HookSpec>,
}

impl HookSpec {
    fn endpoint(&self, role: &str) -> Result<Endpoint, PipelineError> {
        match self {
            HookSpec::Subprocess { program, args } => Ok(Endpoint::Subprocess {
                program: program.clone(),
                args: args.clone(),
            }),
            HookSpec::Http { url } => Ok(Endpoint::Http { url: url.clone() }),
            HookSpec::Builtin { name } => Err(PipelineError::User(format!(
                "the {role} hook has no built-in implementation (got \"{name}\")"
            ))),
        }
    }

    pub fn image_hook(&self, role: &str) -> Result<Box<dyn ImageHook>, PipelineError> {
        if let HookSpec::Builtin { name } = self {
            return match name.as_str() {
                "identity" => Ok(Box::new(IdentityHook)),
                "blur" => Ok(Box::new(BlurHook::default())),
                "upscale" => Ok(Box::new(BicubicUpscale::default())),
                other => Err(PipelineError::User(format!("unknown built-in {role} hook \"{other}\""))),
            };
        }
        Ok(Box::new(ExternalImageHook {
            endpoint: self.endpoint(role)?,
            same_shape: role == "denoiser",
        }))
    }

    pub fn critic(&self) -> Result<ExternalCritic, PipelineError> {
        Ok(ExternalCritic {
            endpoint: self.endpoint("critic")?,
        })
    }

    pub fn depth(&self) -> Result<ExternalDepth, PipelineError> {
        Ok(ExternalDepth {
            endpoint: self.endpoint("depth_estimator")?,
        })
    }

    pub fn embedder(&self) -> Result<ExternalEmbedder, PipelineError> {
        Ok(ExternalEmbedder {
            endpoint: self.endpoint("embedder")?,
        })
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::User(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| PipelineError::User(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        serde_json::from_value(doc).map_err(|e| PipelineError::User(format!("invalid config: {e}")))
    }

    /// Stable hash of the full configuration.
    pub fn digest(&self) -> String {
        crate::manifest::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// `a.b.c=value`, where `value` is parsed as JSON and falls back to a
/// plain string.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<(), PipelineError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| PipelineError::User(format!("override \"{item}\" is not key=value")))?;
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(PipelineError::User(format!("override key \"{key}\" has an empty component")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
