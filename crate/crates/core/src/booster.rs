//! Plasticity branch: a single shared visual prompt inserted after the class
//! token, and a linear head over the pooled feature that grows with each task.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::encoders::VisionEncoder;
use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, Var};
use crate::rng::rng_for;
use crate::stream::Image;
use crate::tensor::{Param, Tensor};

#[derive(Debug)]
pub struct Booster {
    prompts: Param,
    head_w: Param,
    head_b: Param,
    /// Size of each head extension, in order.
    extensions: Vec<usize>,
    /// Images pushed through the encoder so far.
    forwarded: AtomicUsize,
}

impl Clone for Booster {
    fn clone(&self) -> Self {
        Booster {
            prompts: self.prompts.clone(),
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
            extensions: self.extensions.clone(),
            forwarded: AtomicUsize::new(self.forwarded.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for Booster {
    fn eq(&self, other: &Self) -> bool {
        self.prompts == other.prompts
            && self.head_w == other.head_w
            && self.head_b == other.head_b
            && self.extensions == other.extensions
    }
}

impl Booster {
    pub fn new(prompt_len: usize, e_vis: usize, init_std: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, "boost-prompts", 0);
        let mut p = Tensor::randn(prompt_len, e_vis, init_std, &mut rng);
        p.round_to_f32();
        Booster {
            prompts: Param::new("boost.prompts", p),
            head_w: Param::new("boost.head_w", Tensor::zeros(0, e_vis)),
            head_b: Param::new("boost.head_b", Tensor::zeros(1, 0)),
            extensions: Vec::new(),
            forwarded: AtomicUsize::new(0),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head_w.value.rows()
    }

    pub fn extensions(&self) -> &[usize] {
        &self.extensions
    }

    /// Always 1: there are no per-task prompt copies.
    pub fn prompt_count(&self) -> usize {
        1
    }

    pub fn prompts(&self) -> &Param {
        &self.prompts
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_w.value, &self.head_b.value)
    }

    pub fn forwarded(&self) -> usize {
        self.forwarded.load(Ordering::Relaxed)
    }

    /// Append `n_new` zero rows; existing rows are kept verbatim.
    pub fn extend_head(&mut self, n_new: usize) -> Result<()> {
        if n_new == 0 {
            return Err(invalid!("head extension needs at least one class"));
        }
        let e = self.head_w.value.cols();
        let w = Tensor::concat_rows(&[&self.head_w.value, &Tensor::zeros(n_new, e)])?;
        let mut b = self.head_b.value.data().to_vec();
        b.resize(b.len() + n_new, 0.0);
        self.head_w.value = w;
        self.head_b.value = Tensor::row_vector(b);
        self.extensions.push(n_new);
        Ok(())
    }

    /// Pooled feature of the prompt-inserted sequence, `B × e_vis`.
    pub fn features(&self, g: &mut Graph, vision: &VisionEncoder, images: &[&Image]) -> Result<Var> {
        self.forwarded.fetch_add(images.len(), Ordering::Relaxed);
        let p = g.param(&self.prompts);
        Ok(vision.encode(g, images, Some(p))?.pooled)
    }

    pub fn logits_from_features(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        if self.n_classes() == 0 {
            return Err(Error::Lifecycle("booster head is empty".into()));
        }
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        let wt = g.transpose(w);
        let z = g.matmul(feat, wt)?;
        g.add(z, b)
    }

    pub fn logits(&self, g: &mut Graph, vision: &VisionEncoder, images: &[&Image]) -> Result<Var> {
        let f = self.features(g, vision, images)?;
        self.logits_from_features(g, f)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.prompts, &self.head_w, &self.head_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.prompts, &mut self.head_w, &mut self.head_b]
    }

    pub fn restore(&mut self, prompts: Tensor, head_w: Tensor, head_b: Tensor, extensions: Vec<usize>) -> Result<()> {
        let k: usize = extensions.iter().sum();
        if prompts.shape() != self.prompts.value.shape()
            || head_w.shape() != (k, self.head_w.value.cols())
            || head_b.shape() != (1, k)
        {
            return Err(Error::Checkpoint("booster tensor shapes do not match".into()));
        }
        self.prompts.value = prompts;
        self.head_w.value = head_w;
        self.head_b.value = head_b;
        self.extensions = extensions;
        Ok(())
    }
}
