//! AdamW with decoupled weight decay and a per-task cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::tensor::{Param, Tensor};

/// `lr0 · ½(1 + cos(π·step/(total−1)))` for steps `0..total`: the first
/// step runs at `lr0` and the last at zero.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * step as f64 / (total - 1) as f64).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, (Tensor, Tensor, u32)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Update every unfrozen parameter that has a gradient, then round it to
    /// f32 so checkpoints stay exact.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for p in params {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let shape = p.value.shape();
            let entry = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(shape.0, shape.1), Tensor::zeros(shape.0, shape.1), 0));
            if entry.0.shape() != shape {
                *entry = (Tensor::zeros(shape.0, shape.1), Tensor::zeros(shape.0, shape.1), 0);
            }
            let (m, v, t) = entry;
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
            p.value.round_to_f32();
        }
    }
}
