//! The assembled model: frozen encoders, both branches, fusion and the
//! optional gate, with logit columns in class-arrival order.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{Method, RunConfig};
use crate::booster::Booster;
use crate::encoders::{EncoderConfig, TextEncoder, VisionEncoder};
use crate::error::{invalid, Result};
use crate::fusion::{promptfusion_loss, Fusion};
use crate::gate::Gate;
use crate::grad::{Graph, Var};
use crate::rehearsal::{feature_finetune_loss, SampledSet};
use crate::rng::rng_for;
use crate::stabilizer::{argmax_class, Stabilizer, StabilizerConfig};
use crate::stream::{Image, Item, StreamMode};
use crate::tensor::{Param, Tensor};

pub struct Forward {
    pub z: Var,
    /// Gate penalty and distillation, when gated training.
    pub reg: Option<Var>,
    /// Per-row booster decisions, when gated.
    pub decisions: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub method: Method,
    pub mode: StreamMode,
    pub text: TextEncoder,
    pub stab_vision: VisionEncoder,
    boost_vision: Option<VisionEncoder>,
    pub stabilizer: Stabilizer,
    pub booster: Booster,
    pub fusion: Fusion,
    pub gate: Option<Gate>,
    seen: Vec<usize>,
    gate_cache: BTreeMap<usize, Vec<f64>>,
}

impl Model {
    pub fn new(cfg: &RunConfig, n_classes: usize, image_shape: (usize, usize, usize)) -> Result<Self> {
        let m = &cfg.model;
        let enc = |dim| EncoderConfig {
            embed_dim: dim,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
        };
        let seed = cfg.seed;
        let text = TextEncoder::new(&enc(m.text_dim), n_classes, m.ctx_len, &mut rng_for(seed, "text-encoder", 0))?;
        let stab_vision = VisionEncoder::new(
            &enc(m.vision_dim),
            image_shape,
            m.patch_size,
            Some(m.text_dim),
            &mut rng_for(seed, "vision-stabilizer", 0),
        )?;
        let boost_vision = if m.share_vision {
            None
        } else {
            Some(VisionEncoder::new(
                &enc(m.vision_dim),
                image_shape,
                m.patch_size,
                None,
                &mut rng_for(seed, "vision-booster", 0),
            )?)
        };
        let stabilizer = Stabilizer::new(
            StabilizerConfig {
                ctx_len: m.ctx_len,
                image_prompt_len: m.image_prompt_len,
                temperature: m.temperature,
                init_std: m.prompt_init_std,
                augment: m.augment,
            },
            cfg.stream.mode,
            m.text_dim,
            m.vision_dim,
            seed,
        )?;
        let booster = Booster::new(m.prompt_len, m.vision_dim, m.prompt_init_std, seed);
        let fusion = Fusion::new(
            cfg.fusion.clone(),
            cfg.mask_mode(),
            cfg.stream.mode == StreamMode::DomainIncremental,
        );
        let gate = cfg
            .gate
            .enabled
            .then(|| Gate::new(cfg.gate.clone(), m.vision_dim, seed))
            .transpose()?;
        Ok(Model {
            method: cfg.method,
            mode: cfg.stream.mode,
            text,
            stab_vision,
            boost_vision,
            stabilizer,
            booster,
            fusion,
            gate,
            seen: Vec::new(),
            gate_cache: BTreeMap::new(),
        })
    }

    pub fn boost_vision(&self) -> &VisionEncoder {
        self.boost_vision.as_ref().unwrap_or(&self.stab_vision)
    }

    pub fn shares_vision(&self) -> bool {
        self.boost_vision.is_none()
    }

    /// Class ids of the logit columns.
    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn column(&self, class: usize) -> Option<usize> {
        self.seen.iter().position(|&c| c == class)
    }

    pub fn columns(&self, items: &[&Item]) -> Result<Vec<usize>> {
        items
            .iter()
            .map(|it| self.column(it.label).ok_or_else(|| invalid!("label {} not seen yet", it.label)))
            .collect()
    }

    pub fn begin_task(&mut self, classes: &[usize], domain: Option<usize>) -> Result<()> {
        let new: Vec<usize> = classes.iter().copied().filter(|c| !self.seen.contains(c)).collect();
        self.stabilizer.begin_task(classes, domain)?;
        if !new.is_empty() {
            self.booster.extend_head(new.len())?;
        }
        self.fusion.begin_task(match self.mode {
            StreamMode::ClassIncremental => new.len(),
            StreamMode::DomainIncremental => classes.len(),
        })?;
        if let Some(g) = &mut self.gate {
            g.begin_task()?;
        }
        self.seen.extend(new);
        Ok(())
    }

    /// Restore column bookkeeping after a checkpoint load.
    pub fn set_seen(&mut self, seen: Vec<usize>) {
        self.seen = seen;
    }

    /// Prompt-free stabilizer-side features, computed once per item id.
    pub fn gate_features(&mut self, items: &[&Item]) -> Result<Tensor> {
        let d = self.stab_vision.embed_dim();
        let mut out = Tensor::zeros(items.len(), d);
        for (r, it) in items.iter().enumerate() {
            if !self.gate_cache.contains_key(&it.id) {
                let f = self.stab_vision.gate_feature(&it.image)?;
                self.gate_cache.insert(it.id, f.into_data());
            }
            out.row_mut(r).copy_from_slice(&self.gate_cache[&it.id]);
        }
        Ok(out)
    }

    /// Build the output logits for a batch. Training passes an rng for the
    /// gate's noise; evaluation passes `None` and decides deterministically.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        items: &[&Item],
        gate_v: Option<&Tensor>,
        rng: Option<&mut R>,
    ) -> Result<Forward> {
        let images: Vec<&Image> = items.iter().map(|it| &it.image).collect();
        let training = rng.is_some();
        match self.method {
            Method::StabilizerOnly => {
                let z = self.stabilizer.logits(g, &self.text, &self.stab_vision, &images)?;
                return Ok(Forward { z, reg: None, decisions: None });
            }
            Method::BoosterOnly => {
                let z = self.booster.logits(g, self.boost_vision(), &images)?;
                return Ok(Forward { z, reg: None, decisions: None });
            }
            Method::PromptFusion => {}
        }
        let s = self.stabilizer.logits(g, &self.text, &self.stab_vision, &images)?;
        let Some(gate) = &self.gate else {
            let b = self.booster.logits(g, self.boost_vision(), &images)?;
            let z = self.fusion.fuse(g, s, Some(b), training)?;
            return Ok(Forward { z, reg: None, decisions: None });
        };
        let v = gate_v.ok_or_else(|| invalid!("gated forward needs gate features"))?;
        if v.rows() != items.len() {
            return Err(invalid!("{} gate features for {} items", v.rows(), items.len()));
        }
        let n = items.len();
        let (on, st, reg) = match rng {
            Some(rng) => {
                let vv = g.constant(v.clone());
                let d = gate.decide_train(g, vv, rng)?;
                let reg = gate.regularizer(g, vv, &d)?;
                (d.on, Some(d.st), Some(reg))
            }
            None => (gate.decide(v)?, None, None),
        };
        let idx: Vec<usize> = (0..n).filter(|&i| on[i]).collect();
        let b = if idx.is_empty() {
            None
        } else {
            let sub: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let bl = self.booster.logits(g, self.boost_vision(), &sub)?;
            let full = g.scatter_rows(bl, &idx, n)?;
            Some(match st {
                Some(st) => {
                    let m0 = g.slice_cols(st, 0, 1)?;
                    g.mul(full, m0)?
                }
                None => full,
            })
        };
        let z = self.fusion.fuse(g, s, b, training)?;
        Ok(Forward {
            z,
            reg,
            decisions: Some(on),
        })
    }

    /// Predicted class ids, plus the gate's decisions when gated.
    pub fn predict(&mut self, items: &[&Item]) -> Result<(Vec<usize>, Option<Vec<bool>>)> {
        let v = match self.gate {
            Some(_) => Some(self.gate_features(items)?),
            None => None,
        };
        let mut g = Graph::new();
        let f = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, items, v.as_ref(), None)?;
        let z = g.value(f.z);
        let pred = (0..z.rows()).map(|r| argmax_class(z.row(r), &self.seen)).collect();
        Ok((pred, f.decisions))
    }

    /// Stabilizer image features `f(x̃)` and booster pooled features.
    pub fn branch_features(&self, items: &[&Item]) -> Result<(Tensor, Tensor)> {
        let images: Vec<&Image> = items.iter().map(|it| &it.image).collect();
        let mut g = Graph::new();
        let s = self.stabilizer.image_features(&mut g, &self.stab_vision, &images)?;
        let b = self.booster.features(&mut g, self.boost_vision(), &images)?;
        Ok((g.value(s).clone(), g.value(b).clone()))
    }

    /// Loss on replayed features; labels are class ids.
    pub fn finetune_loss(&self, g: &mut Graph, set: &SampledSet) -> Result<Var> {
        let cols: Vec<usize> = set
            .labels
            .iter()
            .map(|&c| self.column(c).ok_or_else(|| invalid!("class {c} not seen yet")))
            .collect::<Result<_>>()?;
        match self.method {
            Method::PromptFusion => feature_finetune_loss(
                g,
                &self.stabilizer,
                &self.text,
                Some(&self.booster),
                Some(&self.fusion),
                &set.stabilizer,
                &set.booster,
                &cols,
            ),
            Method::StabilizerOnly => feature_finetune_loss(
                g,
                &self.stabilizer,
                &self.text,
                None,
                None,
                &set.stabilizer,
                &set.booster,
                &cols,
            ),
            Method::BoosterOnly => {
                let bf = g.constant(set.booster.clone());
                let z = self.booster.logits_from_features(g, bf)?;
                promptfusion_loss(g, z, &cols)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.stabilizer.params();
        out.extend(self.booster.params());
        out.extend(self.fusion.params());
        if let Some(g) = &self.gate {
            out.extend(g.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.stabilizer.params_mut();
        out.extend(self.booster.params_mut());
        out.extend(self.fusion.params_mut());
        if let Some(g) = &mut self.gate {
            out.extend(g.params_mut());
        }
        out
    }

    /// Visit every frozen encoder tensor under a stable name.
    pub fn visit_encoders(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.text.visit("text", f);
        self.stab_vision.visit("vision_stabilizer", f);
        if let Some(b) = &self.boost_vision {
            b.visit("vision_booster", f);
        }
    }

    pub fn visit_encoders_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.text.visit_mut("text", f);
        self.stab_vision.visit_mut("vision_stabilizer", f);
        if let Some(b) = &mut self.boost_vision {
            b.visit_mut("vision_booster", f);
        }
    }

    /// Combined checksum of all frozen encoder weights.
    pub fn encoder_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit_encoders(&mut |name, t| {
            h.update(name.as_bytes());
            h.update(t.checksum().as_bytes());
        });
        hex::encode(h.finalize())
    }
}
