//! Analytic per-image compute (multiply-accumulates) and trainable-parameter
//! accounting.
//!
//! Text features do not depend on the image and are computed once per
//! evaluation, so they are not charged per image. The gate's prompt-free
//! feature pass is reported separately from the gate network itself.

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub vision_dim: usize,
    pub text_dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub ctx_len: usize,
    pub prompt_len: usize,
    pub image_prompt_len: usize,
    pub augment: bool,
    pub n_classes: usize,
    pub gate_hidden: usize,
    pub gate: bool,
}

impl CostInputs {
    /// Desk model over images of `(height, width, channels)`.
    pub fn from_config(cfg: &RunConfig, n_classes: usize, image_shape: (usize, usize, usize)) -> Self {
        let m = &cfg.model;
        let (h, w, ch) = image_shape;
        let p = m.patch_size.max(1);
        CostInputs {
            vision_dim: m.vision_dim,
            text_dim: m.text_dim,
            depth: m.depth,
            mlp_ratio: m.mlp_ratio,
            n_patches: (h / p) * (w / p),
            patch_dim: m.patch_size * m.patch_size * ch,
            ctx_len: m.ctx_len,
            prompt_len: m.prompt_len,
            image_prompt_len: m.image_prompt_len,
            augment: m.augment,
            n_classes,
            gate_hidden: cfg.gate.hidden,
            gate: cfg.gate.enabled,
        }
    }

    /// ViT-B/16 at 224px with a 512-d text tower, 100 classes, `M = p = 30`,
    /// `L̃ = 40`.
    pub fn full_scale() -> Self {
        CostInputs {
            vision_dim: 768,
            text_dim: 512,
            depth: 12,
            mlp_ratio: 4,
            n_patches: 196,
            patch_dim: 16 * 16 * 3,
            ctx_len: 30,
            prompt_len: 30,
            image_prompt_len: 40,
            augment: true,
            n_classes: 100,
            gate_hidden: 64,
            gate: false,
        }
    }
}

/// One pre-norm block over `l` tokens of width `e`.
pub fn block_macs(l: usize, e: usize, mlp_ratio: usize) -> u64 {
    let (l, e, r) = (l as u64, e as u64, mlp_ratio as u64);
    l * (4 * e * e + 2 * r * e * e) + 2 * l * l * e
}

fn vision_macs(c: &CostInputs, extra_tokens: usize) -> u64 {
    let l = 1 + extra_tokens + c.n_patches;
    let embed = (c.n_patches * c.patch_dim * c.vision_dim) as u64;
    let proj = if c.vision_dim != c.text_dim {
        (c.vision_dim * c.text_dim) as u64
    } else {
        0
    };
    embed + c.depth as u64 * block_macs(l, c.vision_dim, c.mlp_ratio) + proj
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub stabilizer: u64,
    pub booster: u64,
    pub fusion: u64,
    pub gate: u64,
    /// Prompt-free encoder pass that feeds the gate.
    pub gate_feature: u64,
    pub prompt_fusion: u64,
    pub activation_rate: Option<f64>,
    /// `stabilizer + gate + rate·booster + fusion`.
    pub lite: Option<f64>,
    pub trainable_params: u64,
}

pub fn stabilizer_macs(c: &CostInputs) -> u64 {
    let l = if c.augment { c.image_prompt_len } else { 0 };
    vision_macs(c, l) + (c.n_classes * c.text_dim) as u64
}

pub fn booster_macs(c: &CostInputs) -> u64 {
    vision_macs(c, c.prompt_len) + (c.n_classes * c.vision_dim) as u64
}

pub fn fusion_macs(c: &CostInputs) -> u64 {
    3 * c.n_classes as u64
}

pub fn gate_macs(c: &CostInputs) -> u64 {
    (c.vision_dim * c.gate_hidden + c.gate_hidden * 2) as u64
}

pub fn trainable_params(c: &CostInputs, method: Method) -> u64 {
    let k = c.n_classes as u64;
    let mut n = 0;
    if method.uses_stabilizer() {
        n += k * (c.ctx_len * c.text_dim) as u64;
        if c.augment {
            n += (c.image_prompt_len * c.vision_dim) as u64;
        }
    }
    if method.uses_booster() {
        n += (c.prompt_len * c.vision_dim) as u64 + k * c.vision_dim as u64 + k;
    }
    if method == Method::PromptFusion {
        // alpha and beta together cover every class, plus lambda
        n += k + 1;
        if c.gate {
            let h = c.gate_hidden as u64;
            n += c.vision_dim as u64 * h + h + 2 * h + 2;
        }
    }
    n
}

pub fn cost_model(c: &CostInputs, method: Method, activation_rate: Option<f64>) -> CostReport {
    let stabilizer = if method.uses_stabilizer() { stabilizer_macs(c) } else { 0 };
    let booster = if method.uses_booster() { booster_macs(c) } else { 0 };
    let fusion = if method == Method::PromptFusion { fusion_macs(c) } else { 0 };
    let gate = gate_macs(c);
    let lite = activation_rate.map(|r| stabilizer as f64 + gate as f64 + r * booster as f64 + fusion as f64);
    CostReport {
        stabilizer,
        booster,
        fusion,
        gate,
        gate_feature: vision_macs(c, 0),
        prompt_fusion: stabilizer + booster + fusion,
        activation_rate,
        lite,
        trainable_params: trainable_params(c, method),
    }
}
