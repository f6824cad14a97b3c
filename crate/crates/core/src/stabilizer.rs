//! Stability branch: class-conditioned text prompts matched to image features
//! by cosine similarity. One prompt set per task, frozen once the task ends;
//! shared image prompts stay trainable throughout.

use serde::{Deserialize, Serialize};

use crate::encoders::{TextEncoder, VisionEncoder};
use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, Var};
use crate::rng::rng_for;
use crate::stream::{Image, StreamMode};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilizerConfig {
    /// Context length `M` of each class prompt.
    pub ctx_len: usize,
    /// Number of image prompts `L̃`.
    pub image_prompt_len: usize,
    pub temperature: f64,
    pub init_std: f64,
    /// Insert image prompts into the image sequence.
    pub augment: bool,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        StabilizerConfig {
            ctx_len: 8,
            image_prompt_len: 8,
            temperature: 0.07,
            init_std: 0.02,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    /// Class ids covered by this set, one `M`-row block each.
    pub classes: Vec<usize>,
    pub domain: Option<usize>,
    pub prompts: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stabilizer {
    cfg: StabilizerConfig,
    mode: StreamMode,
    e_text: usize,
    seed: u64,
    sets: Vec<PromptSet>,
    image_prompts: Param,
}

/// Argmax over columns mapped to class ids; exact ties go to the lowest id.
pub fn argmax_class(row: &[f64], classes: &[usize]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] || (row[j] == row[best] && classes[j] < classes[best]) {
            best = j;
        }
    }
    classes[best]
}

impl Stabilizer {
    pub fn new(cfg: StabilizerConfig, mode: StreamMode, e_text: usize, e_vis: usize, seed: u64) -> Result<Self> {
        if !(cfg.temperature > 0.0) {
            return Err(invalid!("temperature must be positive, got {}", cfg.temperature));
        }
        let mut rng = rng_for(seed, "stab-image-prompts", 0);
        let mut p = Tensor::randn(cfg.image_prompt_len, e_vis, cfg.init_std, &mut rng);
        p.round_to_f32();
        Ok(Stabilizer {
            cfg,
            mode,
            e_text,
            seed,
            sets: Vec::new(),
            image_prompts: Param::new("stab.image_prompts", p),
        })
    }

    pub fn config(&self) -> &StabilizerConfig {
        &self.cfg
    }

    pub fn sets(&self) -> &[PromptSet] {
        &self.sets
    }

    pub fn image_prompts(&self) -> &Param {
        &self.image_prompts
    }

    /// Freeze every existing set and append a fresh trainable one.
    pub fn begin_task(&mut self, classes: &[usize], domain: Option<usize>) -> Result<()> {
        if classes.is_empty() {
            return Err(invalid!("a task needs at least one class"));
        }
        let mut uniq = classes.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != classes.len() {
            return Err(invalid!("duplicate class in task classes {classes:?}"));
        }
        match self.mode {
            StreamMode::ClassIncremental => {
                if let Some(c) = classes.iter().find(|c| self.owns(**c)) {
                    return Err(invalid!("class {c} already has a prompt set"));
                }
            }
            StreamMode::DomainIncremental => {
                if let Some(first) = self.sets.first() {
                    if first.classes != classes {
                        return Err(invalid!(
                            "domain-incremental tasks must share classes {:?}, got {classes:?}",
                            first.classes
                        ));
                    }
                }
            }
        }
        self.freeze_all();
        let t = self.sets.len();
        let mut rng = rng_for(self.seed, "stab-prompts", t as u64);
        let mut p = Tensor::randn(classes.len() * self.cfg.ctx_len, self.e_text, self.cfg.init_std, &mut rng);
        p.round_to_f32();
        self.sets.push(PromptSet {
            classes: classes.to_vec(),
            domain,
            prompts: Param::new(format!("stab.prompts.{t}"), p),
        });
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for s in &mut self.sets {
            s.prompts.frozen = true;
        }
    }

    fn owns(&self, class: usize) -> bool {
        self.sets.iter().any(|s| s.classes.contains(&class))
    }

    /// Class id of each bank row block, in arrival order.
    pub fn bank_classes(&self) -> Vec<usize> {
        self.sets.iter().flat_map(|s| s.classes.iter().copied()).collect()
    }

    /// Columns of [`Stabilizer::logits`], in arrival order.
    pub fn seen_classes(&self) -> Vec<usize> {
        match self.mode {
            StreamMode::ClassIncremental => self.bank_classes(),
            StreamMode::DomainIncremental => self.sets.first().map(|s| s.classes.clone()).unwrap_or_default(),
        }
    }

    /// All prompt sets stacked along the class axis.
    pub fn concat_bank(&self) -> Result<Tensor> {
        if self.sets.is_empty() {
            return Err(Error::Lifecycle("no task has begun".into()));
        }
        let parts: Vec<&Tensor> = self.sets.iter().map(|s| &s.prompts.value).collect();
        Tensor::concat_rows(&parts)
    }

    /// `g(P_k)` for every bank row, `R × e_text`.
    pub fn text_features(&self, g: &mut Graph, text: &TextEncoder) -> Result<Var> {
        if self.sets.is_empty() {
            return Err(Error::Lifecycle("no task has begun".into()));
        }
        let classes = self.bank_classes();
        let bank = if self.cfg.ctx_len == 0 {
            None
        } else {
            let parts: Vec<Var> = self.sets.iter().map(|s| g.param(&s.prompts)).collect();
            Some(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? })
        };
        text.encode(g, bank, self.cfg.ctx_len, &classes)
    }

    /// `f(x̃)` for a batch, `B × e_text`.
    pub fn image_features(&self, g: &mut Graph, vision: &VisionEncoder, images: &[&Image]) -> Result<Var> {
        let prompts = (self.cfg.augment && self.cfg.image_prompt_len > 0).then(|| g.param(&self.image_prompts));
        Ok(vision.encode(g, images, prompts)?.projected)
    }

    /// Cosine logits over seen classes. Domain-incremental banks take the
    /// maximum over each class's per-domain rows.
    pub fn logits_from_features(&self, g: &mut Graph, image_feat: Var, text_feat: Var) -> Result<Var> {
        let cos = g.cosine(image_feat, text_feat)?;
        let s = g.scale(cos, 1.0 / self.cfg.temperature);
        match self.mode {
            StreamMode::ClassIncremental => Ok(s),
            StreamMode::DomainIncremental => {
                let rows = self.bank_classes();
                let groups: Vec<Vec<usize>> = self
                    .seen_classes()
                    .iter()
                    .map(|c| (0..rows.len()).filter(|&r| rows[r] == *c).collect())
                    .collect();
                g.group_max(s, &groups)
            }
        }
    }

    pub fn logits(
        &self,
        g: &mut Graph,
        text: &TextEncoder,
        vision: &VisionEncoder,
        images: &[&Image],
    ) -> Result<Var> {
        let t = self.text_features(g, text)?;
        let f = self.image_features(g, vision, images)?;
        self.logits_from_features(g, f, t)
    }

    pub fn predict(
        &self,
        text: &TextEncoder,
        vision: &VisionEncoder,
        images: &[&Image],
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let s = self.logits(&mut g, text, vision, images)?;
        let classes = self.seen_classes();
        let v = g.value(s);
        Ok((0..v.rows()).map(|r| argmax_class(v.row(r), &classes)).collect())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.sets.iter().map(|s| &s.prompts).collect();
        out.push(&self.image_prompts);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.sets.iter_mut().map(|s| &mut s.prompts).collect();
        out.push(&mut self.image_prompts);
        out
    }

    /// Restore prompt sets from a checkpoint. All but the last are frozen.
    pub fn restore(&mut self, sets: Vec<PromptSet>, image_prompts: Tensor) -> Result<()> {
        if image_prompts.shape() != self.image_prompts.value.shape() {
            return Err(Error::Checkpoint("image prompt shape mismatch".into()));
        }
        for s in &sets {
            if s.prompts.value.shape() != (s.classes.len() * self.cfg.ctx_len, self.e_text) {
                return Err(Error::Checkpoint(format!("prompt set {} has the wrong shape", s.prompts.name)));
            }
        }
        self.sets = sets;
        self.image_prompts.value = image_prompts;
        Ok(())
    }
}
