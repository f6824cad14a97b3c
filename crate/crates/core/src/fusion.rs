//! Logit fusion `z = W ⊙ [(1−σ(λ))·S + σ(λ)·B]` with a per-class mask `W`
//! that boosts old-class logits and damps new-class logits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, Var};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Old entries `θ/σ(β)` with `θ = T_i/2`.
    Rehearsal,
    /// Old entries `1/σ(β)`.
    MemoryFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// `None` lets the run pick from its rehearsal setting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<MaskMode>,
    /// Off means `W ≡ 1`.
    pub mask: bool,
    /// Off pins `λ = 0`.
    pub learn_lambda: bool,
    pub mask_at_inference: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: None,
            mask: true,
            learn_lambda: true,
            mask_at_inference: true,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mask values, old classes first. `task_index` is 1-based.
pub fn build_mask(task_index: usize, alpha: &[f64], beta: &[f64], mode: MaskMode) -> Result<Vec<f64>> {
    if task_index == 0 {
        return Err(invalid!("task index is 1-based"));
    }
    let theta = match mode {
        MaskMode::Rehearsal => task_index as f64 / 2.0,
        MaskMode::MemoryFree => 1.0,
    };
    Ok(beta
        .iter()
        .map(|&b| theta / sigmoid(b))
        .chain(alpha.iter().map(|&a| sigmoid(a)))
        .collect())
}

/// `W ⊙ [(1−σ(λ))·S + σ(λ)·B]` on plain vectors.
pub fn fuse(s: &[f64], b: &[f64], lambda: f64, w: &[f64]) -> Result<Vec<f64>> {
    if s.len() != b.len() || s.len() != w.len() {
        return Err(invalid!("fuse lengths differ: S {}, B {}, W {}", s.len(), b.len(), w.len()));
    }
    let l = sigmoid(lambda);
    Ok(s.iter()
        .zip(b)
        .zip(w)
        .map(|((s, b), w)| w * ((1.0 - l) * s + l * b))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    cfg: FusionConfig,
    mode: MaskMode,
    /// Every class stays "new" (domain-incremental streams).
    all_new: bool,
    task_index: usize,
    lambda: Param,
    alpha: Param,
    beta: Param,
}

impl Fusion {
    pub fn new(cfg: FusionConfig, mode: MaskMode, all_new: bool) -> Self {
        let lambda = if cfg.learn_lambda {
            Param::new("fusion.lambda", Tensor::scalar(0.0))
        } else {
            Param::frozen("fusion.lambda", Tensor::scalar(0.0))
        };
        Fusion {
            cfg,
            mode,
            all_new,
            task_index: 0,
            lambda,
            alpha: Param::new("fusion.alpha", Tensor::zeros(1, 0)),
            beta: Param::new("fusion.beta", Tensor::zeros(1, 0)),
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.value.item()
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.value.data()
    }

    pub fn beta(&self) -> &[f64] {
        self.beta.value.data()
    }

    pub fn n_classes(&self) -> usize {
        self.alpha.value.cols() + self.beta.value.cols()
    }

    /// Advance to the next task: previous new classes become old, and both
    /// mask vectors restart at zero.
    pub fn begin_task(&mut self, n_new: usize) -> Result<()> {
        if n_new == 0 {
            return Err(invalid!("a task needs at least one new class"));
        }
        let (n_old, n_new) = if self.all_new {
            (0, n_new)
        } else {
            (self.n_classes(), n_new)
        };
        self.task_index += 1;
        self.beta.value = Tensor::zeros(1, n_old);
        self.alpha.value = Tensor::zeros(1, n_new);
        Ok(())
    }

    /// Current mask values, old classes first.
    pub fn mask(&self) -> Result<Vec<f64>> {
        build_mask(self.task_index, self.alpha(), self.beta(), self.mode)
    }

    fn mask_var(&self, g: &mut Graph) -> Result<Var> {
        let alpha = g.param(&self.alpha);
        let new = g.sigmoid(alpha);
        if self.beta.value.cols() == 0 {
            return Ok(new);
        }
        let theta = match self.mode {
            MaskMode::Rehearsal => self.task_index as f64 / 2.0,
            MaskMode::MemoryFree => 1.0,
        };
        let beta = g.param(&self.beta);
        let sb = g.sigmoid(beta);
        let inv = g.recip(sb);
        let old = g.scale(inv, theta);
        g.concat_cols(&[old, new])
    }

    /// Fused logits. `b` of `None` means the booster term is absent for
    /// every row; gated callers pass booster logits already zeroed on
    /// skipped rows.
    pub fn fuse(&self, g: &mut Graph, s: Var, b: Option<Var>, training: bool) -> Result<Var> {
        if self.task_index == 0 {
            return Err(Error::Lifecycle("fusion used before the first task".into()));
        }
        let k = g.shape(s).1;
        if k != self.n_classes() {
            return Err(invalid!("logits have {k} classes, mask has {}", self.n_classes()));
        }
        let lam = g.param(&self.lambda);
        let sl = g.sigmoid(lam);
        let one_minus = g.affine(sl, -1.0, 1.0);
        let mut mix = g.mul(s, one_minus)?;
        if let Some(b) = b {
            if g.shape(b) != g.shape(s) {
                return Err(invalid!("S is {:?}, B is {:?}", g.shape(s), g.shape(b)));
            }
            let bl = g.mul(b, sl)?;
            mix = g.add(mix, bl)?;
        }
        if !self.cfg.mask || !(training || self.cfg.mask_at_inference) {
            return Ok(mix);
        }
        let w = self.mask_var(g)?;
        g.mul(mix, w)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.lambda, &self.alpha, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.lambda, &mut self.alpha, &mut self.beta]
    }

    pub fn restore(&mut self, task_index: usize, lambda: Tensor, alpha: Tensor, beta: Tensor) -> Result<()> {
        if lambda.shape() != (1, 1) || alpha.rows() != 1 || beta.rows() != 1 {
            return Err(Error::Checkpoint("fusion tensor shapes do not match".into()));
        }
        self.task_index = task_index;
        self.lambda.value = lambda;
        self.alpha.value = alpha;
        self.beta.value = beta;
        Ok(())
    }
}

/// Summed cross-entropy; `labels` are logit columns.
pub fn promptfusion_loss(g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
    let k = g.shape(z).1;
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid!("label {bad} outside {k} seen classes"));
    }
    g.cross_entropy(z, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_masks() {
        let w = build_mask(4, &[0.0, 0.0], &[0.0, 0.0], MaskMode::Rehearsal).unwrap();
        assert_eq!(w, vec![4.0, 4.0, 0.5, 0.5]);
        let w = build_mask(4, &[0.0], &[0.0], MaskMode::MemoryFree).unwrap();
        assert_eq!(w, vec![2.0, 0.5]);
        let w = build_mask(2, &[], &[0.0], MaskMode::Rehearsal).unwrap();
        assert_eq!(w, vec![2.0]);
        let w = build_mask(4, &[], &[20.0], MaskMode::Rehearsal).unwrap();
        assert!(w[0] > 2.0 && w[0] - 2.0 < 1e-8);
        assert!(build_mask(0, &[0.0], &[], MaskMode::Rehearsal).is_err());
    }

    #[test]
    fn worked_fusion() {
        assert_eq!(fuse(&[1.0, 0.0], &[0.0, 1.0], 0.0, &[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        let s = [0.3, -1.2, 2.0];
        for lam in [-5.0, 0.0, 0.7, 9.0] {
            let z = fuse(&s, &s, lam, &[1.0; 3]).unwrap();
            for (a, b) in z.iter().zip(&s) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let z = fuse(&[1.0, 0.0], &[0.0, 1.0], 50.0, &[1.0, 1.0]).unwrap();
        assert!((z[1] - 1.0).abs() < 1e-12);
        assert!(fuse(&[1.0], &[1.0, 2.0], 0.0, &[1.0]).is_err());
    }

    #[test]
    fn alpha_beta_roll_over_at_task_boundary() {
        let mut f = Fusion::new(FusionConfig::default(), MaskMode::Rehearsal, false);
        f.begin_task(3).unwrap();
        f.alpha.value = Tensor::row_vector(vec![1.0, 2.0, 3.0]);
        f.begin_task(2).unwrap();
        assert_eq!(f.beta(), &[0.0; 3]);
        assert_eq!(f.alpha(), &[0.0; 2]);
        assert_eq!(f.task_index(), 2);
        assert_eq!(f.mask().unwrap(), vec![2.0, 2.0, 2.0, 0.5, 0.5]);

        let mut d = Fusion::new(FusionConfig::default(), MaskMode::Rehearsal, true);
        d.begin_task(3).unwrap();
        d.begin_task(3).unwrap();
        assert_eq!(d.mask().unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn graph_fusion_matches_plain() {
        let mut f = Fusion::new(FusionConfig::default(), MaskMode::Rehearsal, false);
        f.begin_task(2).unwrap();
        f.begin_task(2).unwrap();
        f.lambda.value = Tensor::scalar(0.4);
        f.alpha.value = Tensor::row_vector(vec![0.3, -0.2]);
        f.beta.value = Tensor::row_vector(vec![1.1, -0.7]);
        let s = [0.5, -1.0, 2.0, 0.1];
        let b = [1.5, 0.2, -0.3, 0.8];
        let mut g = Graph::new();
        let sv = g.constant(Tensor::row_vector(s.to_vec()));
        let bv = g.constant(Tensor::row_vector(b.to_vec()));
        let z = f.fuse(&mut g, sv, Some(bv), true).unwrap();
        let want = fuse(&s, &b, 0.4, &f.mask().unwrap()).unwrap();
        for (a, w) in g.value(z).data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
        let at_test = f.fuse(&mut g, sv, Some(bv), false).unwrap();
        assert_eq!(g.value(at_test), g.value(z));
        f.cfg.mask_at_inference = false;
        let plain = f.fuse(&mut g, sv, Some(bv), false).unwrap();
        let want = fuse(&s, &b, 0.4, &[1.0; 4]).unwrap();
        for (a, w) in g.value(plain).data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_switches() {
        let cfg = FusionConfig {
            mask: false,
            learn_lambda: false,
            ..Default::default()
        };
        let mut f = Fusion::new(cfg, MaskMode::Rehearsal, false);
        f.begin_task(2).unwrap();
        let mut g = Graph::new();
        let sv = g.constant(Tensor::row_vector(vec![1.0, 3.0]));
        let bv = g.constant(Tensor::row_vector(vec![3.0, 1.0]));
        let z = f.fuse(&mut g, sv, Some(bv), true).unwrap();
        assert_eq!(g.value(z).data(), &[2.0, 2.0]);
        let loss = promptfusion_loss(&mut g, z, &[0]).unwrap();
        assert!(g.backward(loss).unwrap().param("fusion.lambda").is_none());
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row_vector(vec![0.0; 4]));
        let l = promptfusion_loss(&mut g, z, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let z = g.constant(Tensor::row_vector(vec![80.0, 0.0]));
        let l = promptfusion_loss(&mut g, z, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-30);
        assert!(promptfusion_loss(&mut g, z, &[2]).is_err());
    }

    #[test]
    fn lambda_alpha_beta_gradients_match_fd() {
        let mut f = Fusion::new(FusionConfig::default(), MaskMode::Rehearsal, false);
        f.begin_task(2).unwrap();
        f.begin_task(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(3, 4, 1.0, &mut rng);
        let wrt = vec![
            Param::new("fusion.lambda", Tensor::scalar(0.3)),
            Param::new("fusion.alpha", Tensor::row_vector(vec![0.2, -0.4])),
            Param::new("fusion.beta", Tensor::row_vector(vec![-0.1, 0.6])),
        ];
        let r = grad_check(
            &wrt,
            |g, v| {
                let mut f2 = f.clone();
                f2.lambda.value = g.value(v[0]).clone();
                f2.alpha.value = g.value(v[1]).clone();
                f2.beta.value = g.value(v[2]).clone();
                // rebuild with the probe vars so gradients reach them
                let sv = g.constant(s.clone());
                let bv = g.constant(b.clone());
                let sl = g.sigmoid(v[0]);
                let om = g.affine(sl, -1.0, 1.0);
                let a = g.mul(sv, om)?;
                let c = g.mul(bv, sl)?;
                let mix = g.add(a, c)?;
                let sb = g.sigmoid(v[2]);
                let inv = g.recip(sb);
                let old = g.scale(inv, f2.task_index as f64 / 2.0);
                let new = g.sigmoid(v[1]);
                let w = g.concat_cols(&[old, new])?;
                let z = g.mul(mix, w)?;
                promptfusion_loss(g, z, &[0, 2, 3])
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");

        // the module graph gives the same analytic gradients
        let mut f3 = f.clone();
        f3.lambda.value = wrt[0].value.clone();
        f3.alpha.value = wrt[1].value.clone();
        f3.beta.value = wrt[2].value.clone();
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let bv = g.constant(b.clone());
        let z = f3.fuse(&mut g, sv, Some(bv), true).unwrap();
        let loss = promptfusion_loss(&mut g, z, &[0, 2, 3]).unwrap();
        let gm = g.backward(loss).unwrap();
        let mut g2 = Graph::new();
        let pv: Vec<Var> = wrt.iter().map(|p| g2.param(p)).collect();
        let sv = g2.constant(s);
        let bv = g2.constant(b);
        let sl = g2.sigmoid(pv[0]);
        let om = g2.affine(sl, -1.0, 1.0);
        let a = g2.mul(sv, om).unwrap();
        let c = g2.mul(bv, sl).unwrap();
        let mix = g2.add(a, c).unwrap();
        let sb = g2.sigmoid(pv[2]);
        let inv = g2.recip(sb);
        let old = g2.scale(inv, 1.0);
        let new = g2.sigmoid(pv[1]);
        let w = g2.concat_cols(&[old, new]).unwrap();
        let z = g2.mul(mix, w).unwrap();
        let loss = promptfusion_loss(&mut g2, z, &[0, 2, 3]).unwrap();
        let gr = g2.backward(loss).unwrap();
        for name in ["fusion.lambda", "fusion.alpha", "fusion.beta"] {
            assert!(gm.param(name).unwrap().max_abs_diff(&gr.param(name).unwrap()) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mask_is_strictly_positive(
            t in 1usize..20,
            alpha in proptest::collection::vec(-30.0f64..30.0, 0..6),
            beta in proptest::collection::vec(-30.0f64..30.0, 0..6),
            rehearsal in any::<bool>(),
        ) {
            let mode = if rehearsal { MaskMode::Rehearsal } else { MaskMode::MemoryFree };
            let w = build_mask(t, &alpha, &beta, mode).unwrap();
            prop_assert_eq!(w.len(), alpha.len() + beta.len());
            prop_assert!(w.iter().all(|&x| x > 0.0 && x.is_finite()));
        }

        #[test]
        fn fusion_is_a_strict_convex_combination(lam in -30.0f64..30.0, s in -5.0f64..5.0, b in -5.0f64..5.0) {
            let l = sigmoid(lam);
            prop_assert!(l > 0.0 && l < 1.0);
            let z = fuse(&[s], &[b], lam, &[1.0]).unwrap()[0];
            prop_assert!(z >= s.min(b) - 1e-12 && z <= s.max(b) + 1e-12);
        }
    }
}
