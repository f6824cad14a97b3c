//! Run configuration, parsed from TOML.
//!
//! A file may also carry `[[variant]]` tables; each is deep-merged over the
//! base document to produce one run of a sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, MaskMode};
use crate::gate::GateConfig;
use crate::stream::synthetic::BlobSpec;
use crate::stream::StreamMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    PromptFusion,
    StabilizerOnly,
    BoosterOnly,
}

impl Method {
    pub fn uses_stabilizer(self) -> bool {
        self != Method::BoosterOnly
    }

    pub fn uses_booster(self) -> bool {
        self != Method::StabilizerOnly
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Blobs,
    Rotated,
    ColorShift,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub mode: StreamMode,
    pub source: DataSource,
    pub n_tasks: usize,
    pub shuffle_classes: bool,
    pub train_fraction: f64,
    /// Rotation angles in degrees, one domain each.
    pub angles: Vec<f64>,
    /// Per-channel offsets, one domain each.
    pub shifts: Vec<Vec<f32>>,
    pub train_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub blobs: BlobSpec,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            mode: StreamMode::ClassIncremental,
            source: DataSource::Blobs,
            n_tasks: 5,
            shuffle_classes: false,
            train_fraction: crate::stream::DEFAULT_TRAIN_FRACTION,
            angles: Vec::new(),
            shifts: Vec::new(),
            train_domains: Vec::new(),
            test_domains: Vec::new(),
            manifest: None,
            blobs: BlobSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision_dim: usize,
    pub text_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    /// Text context length `M`.
    pub ctx_len: usize,
    /// Booster prompt length `p`.
    pub prompt_len: usize,
    /// Stabilizer image prompt length `L̃`.
    pub image_prompt_len: usize,
    pub temperature: f64,
    pub prompt_init_std: f64,
    /// Image prompts in the stabilizer.
    pub augment: bool,
    /// One vision encoder for both branches.
    pub share_vision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision_dim: 32,
            text_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 4,
            ctx_len: 8,
            prompt_len: 8,
            image_prompt_len: 8,
            temperature: 0.07,
            prompt_init_std: 0.02,
            augment: true,
            share_vision: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RehearsalMode {
    #[default]
    None,
    Buffer,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RehearsalConfig {
    pub mode: RehearsalMode,
    pub capacity: usize,
    pub finetune_steps: usize,
    pub finetune_per_class: usize,
    pub finetune_lr: f64,
}

impl Default for RehearsalConfig {
    fn default() -> Self {
        RehearsalConfig {
            mode: RehearsalMode::None,
            capacity: 100,
            finetune_steps: 200,
            finetune_per_class: 8,
            finetune_lr: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Learning-rate multiplier for the prompts inserted into the image
    /// encoders. Below 1 the image features move slowly, which keeps stored
    /// feature statistics usable.
    pub visual_lr_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.002,
            weight_decay: 1e-4,
            epochs: 3,
            batch_size: 32,
            schedule: Schedule::Cosine,
            visual_lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub gate: GateConfig,
    pub rehearsal: RehearsalConfig,
    pub optim: OptimConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex sha256 of the canonical serialization, ignoring where output goes.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        let text = c.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Mask mode in effect: explicit, or derived from the rehearsal setting.
    pub fn mask_mode(&self) -> MaskMode {
        self.fusion.mode.unwrap_or(match self.rehearsal.mode {
            RehearsalMode::Buffer => MaskMode::Rehearsal,
            _ => MaskMode::MemoryFree,
        })
    }

    /// Every schema violation, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let m = &self.model;
        for (name, v) in [
            ("model.vision_dim", m.vision_dim),
            ("model.text_dim", m.text_dim),
            ("model.depth", m.depth),
            ("model.heads", m.heads),
            ("model.mlp_ratio", m.mlp_ratio),
            ("model.patch_size", m.patch_size),
            ("stream.n_tasks", self.stream.n_tasks),
            ("optim.epochs", self.optim.epochs),
            ("optim.batch_size", self.optim.batch_size),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if m.heads > 0 && (m.vision_dim % m.heads != 0 || m.text_dim % m.heads != 0) {
            errs.push("model.heads must divide vision_dim and text_dim".into());
        }
        if !(m.temperature > 0.0) {
            errs.push("model.temperature must be positive".into());
        }
        let size = self.stream.blobs.image_size;
        if self.stream.source != DataSource::Manifest && m.patch_size > 0 && size % m.patch_size != 0 {
            errs.push(format!("model.patch_size {} does not divide image size {size}", m.patch_size));
        }
        if !(self.stream.train_fraction > 0.0 && self.stream.train_fraction < 1.0) {
            errs.push("stream.train_fraction must lie in (0, 1)".into());
        }
        match self.stream.source {
            DataSource::Rotated if self.stream.angles.is_empty() => {
                errs.push("stream.angles is required for rotated data".into())
            }
            DataSource::ColorShift if self.stream.shifts.is_empty() => {
                errs.push("stream.shifts is required for colour-shifted data".into())
            }
            DataSource::Manifest if self.stream.manifest.is_none() => {
                errs.push("stream.manifest is required for manifest data".into())
            }
            _ => {}
        }
        if self.stream.mode == StreamMode::DomainIncremental
            && (self.stream.train_domains.is_empty() || self.stream.test_domains.is_empty())
        {
            errs.push("domain-incremental streams need train_domains and test_domains".into());
        }
        if let Err(e) = self.gate.validate() {
            errs.push(e.to_string());
        }
        if self.gate.enabled && self.method != Method::PromptFusion {
            errs.push("gate.enabled requires method = \"prompt_fusion\"".into());
        }
        if !(self.optim.lr >= 0.0) || !(self.optim.weight_decay >= 0.0) || !(self.optim.visual_lr_scale >= 0.0) {
            errs.push("optim.lr, optim.weight_decay and optim.visual_lr_scale must be non-negative".into());
        }
        if self.rehearsal.mode == RehearsalMode::Buffer && self.rehearsal.capacity == 0 {
            errs.push("rehearsal.capacity must be positive for buffer rehearsal".into());
        }
        if self.rehearsal.mode == RehearsalMode::Gaussian && self.rehearsal.finetune_per_class == 0 {
            errs.push("rehearsal.finetune_per_class must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Expand a document into its runs. Without `[[variant]]` tables the base
/// is the only run. Variant output directories nest under the base one.
pub fn expand_sweep(text: &str) -> Result<Vec<RunConfig>> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let variants = match doc.remove("variant") {
        None => return Ok(vec![RunConfig::from_toml(text)?]),
        Some(toml::Value::Array(v)) => v,
        Some(_) => return Err(Error::Config("`variant` must be an array of tables".into())),
    };
    let base = toml::Value::Table(doc);
    let mut out = Vec::with_capacity(variants.len());
    for (i, v) in variants.into_iter().enumerate() {
        let mut merged = base.clone();
        merge(&mut merged, v);
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("variant {i}: {e}")))?;
        let name = cfg.name.clone().unwrap_or_else(|| format!("variant_{i}"));
        cfg.output_dir = cfg.output_dir.map(|d| d.join(&name));
        cfg.name = Some(name);
        cfg.validate().map_err(|e| Error::Config(format!("variant {i}: {e}")))?;
        out.push(cfg);
    }
    Ok(out)
}
