//! Per-input booster gate: a two-layer tanh MLP whose output feeds a
//! straight-through Gumbel-Softmax over {use booster, skip booster}.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, Var};
use crate::rng::rng_for;
use crate::tensor::{Param, Tensor};

/// Added after the softplus so the logarithm is always finite.
pub const POSITIVE_SHIFT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub enabled: bool,
    pub hidden: usize,
    pub tau: f64,
    /// Target fraction of inputs that use the booster.
    pub rho: f64,
    pub zeta: f64,
    pub delta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            enabled: false,
            hidden: 64,
            tau: 1.0,
            rho: 0.5,
            zeta: 0.1,
            delta: 1.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid!("gate tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid!("gate rho must lie in [0, 1], got {}", self.rho));
        }
        if self.zeta < 0.0 || self.delta < 0.0 || self.hidden == 0 {
            return Err(invalid!("gate zeta/delta must be non-negative and hidden positive"));
        }
        Ok(())
    }
}

/// `-ln(-ln U)` for `U` uniform on the open unit interval.
pub fn sample_gumbel<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, 2);
    for v in t.data_mut() {
        let u: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        *v = -(-u.ln()).ln();
    }
    t
}

/// Relaxed decision for one input: `softmax((log F + G)/τ)` where `f` is
/// the strictly positive network output.
pub fn gumbel_softmax(f: [f64; 2], gumbel: [f64; 2], tau: f64) -> Result<[f64; 2]> {
    if !(tau > 0.0) {
        return Err(invalid!("tau must be positive, got {tau}"));
    }
    if f.iter().any(|&x| !(x > 0.0)) {
        return Err(invalid!("gate outputs must be positive before the logarithm"));
    }
    let a = (f[0].ln() + gumbel[0]) / tau;
    let b = (f[1].ln() + gumbel[1]) / tau;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    Ok([ea / (ea + eb), eb / (ea + eb)])
}

/// Booster usage rate over a decision log.
pub fn activation_rate(log: &[bool]) -> Result<f64> {
    if log.is_empty() {
        return Err(invalid!("activation rate of an empty decision log"));
    }
    Ok(log.iter().filter(|&&d| d).count() as f64 / log.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Training,
    Complete,
    Snapshotted,
}

/// Output of [`Gate::decide_train`].
pub struct Decision {
    /// Raw network output `B × 2`, before the softplus.
    pub raw: Var,
    pub soft: Var,
    /// Hard forward, soft gradient.
    pub st: Var,
    pub on: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    cfg: GateConfig,
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
    snapshot: Option<[Tensor; 4]>,
    phase: Phase,
}

impl Gate {
    pub fn new(cfg: GateConfig, d_v: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "gate-init", 0);
        let h = cfg.hidden;
        let mut w1 = Tensor::randn(d_v, h, 1.0 / (d_v as f64).sqrt(), &mut rng);
        let mut w2 = Tensor::randn(h, 2, 1.0 / (h as f64).sqrt(), &mut rng);
        w1.round_to_f32();
        w2.round_to_f32();
        Ok(Gate {
            cfg,
            w1: Param::new("gate.w1", w1),
            b1: Param::new("gate.b1", Tensor::zeros(1, h)),
            w2: Param::new("gate.w2", w2),
            b2: Param::new("gate.b2", Tensor::zeros(1, 2)),
            snapshot: None,
            phase: Phase::Idle,
        })
    }

    pub fn config(&self) -> &GateConfig {
        &self.cfg
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }

    pub fn weights(&self) -> [&Tensor; 4] {
        [&self.w1.value, &self.b1.value, &self.w2.value, &self.b2.value]
    }

    pub fn snapshot_weights(&self) -> Option<&[Tensor; 4]> {
        self.snapshot.as_ref()
    }

    fn mlp(g: &mut Graph, v: Var, w: [Var; 4]) -> Result<Var> {
        let h = g.matmul(v, w[0])?;
        let h = g.add(h, w[1])?;
        let h = g.tanh(h);
        let o = g.matmul(h, w[2])?;
        g.add(o, w[3])
    }

    /// `F(v)` with trainable weights, `B × 2`.
    pub fn forward(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let w = [g.param(&self.w1), g.param(&self.b1), g.param(&self.w2), g.param(&self.b2)];
        Self::mlp(g, v, w)
    }

    fn forward_snapshot(&self, g: &mut Graph, v: Var) -> Result<Option<Var>> {
        let Some(s) = &self.snapshot else { return Ok(None) };
        let w = [
            g.constant(s[0].clone()),
            g.constant(s[1].clone()),
            g.constant(s[2].clone()),
            g.constant(s[3].clone()),
        ];
        Self::mlp(g, v, w).map(Some)
    }

    /// Strictly positive gate scores `softplus(F(v)) + 1e-6`.
    pub fn positive(g: &mut Graph, raw: Var) -> Var {
        let sp = g.softplus(raw);
        g.affine(sp, 1.0, POSITIVE_SHIFT)
    }

    /// Relaxed draw for a batch given Gumbel noise `gumbel` (`B × 2`).
    pub fn gumbel_decision(&self, g: &mut Graph, raw: Var, gumbel: &Tensor) -> Result<(Var, Tensor)> {
        if gumbel.shape() != g.shape(raw) {
            return Err(invalid!("gumbel noise {:?} vs gate output {:?}", gumbel.shape(), g.shape(raw)));
        }
        let pos = Self::positive(g, raw);
        let lp = g.log(pos);
        let gv = g.constant(gumbel.clone());
        let y = g.add(lp, gv)?;
        let y = g.scale(y, 1.0 / self.cfg.tau);
        let soft = g.softmax(y);
        let mut hard = Tensor::zeros(gumbel.rows(), 2);
        for (r, k) in g.value(soft).argmax_rows().into_iter().enumerate() {
            hard.set(r, k, 1.0);
        }
        Ok((soft, hard))
    }

    /// Training-time decision: Gumbel noise drawn from `rng`, straight-through.
    pub fn decide_train<R: Rng + ?Sized>(&self, g: &mut Graph, v: Var, rng: &mut R) -> Result<Decision> {
        let raw = self.forward(g, v)?;
        let noise = sample_gumbel(g.shape(raw).0, rng);
        let (soft, hard) = self.gumbel_decision(g, raw, &noise)?;
        let on = (0..hard.rows()).map(|r| hard.get(r, 0) == 1.0).collect();
        let st = g.straight_through(hard, soft)?;
        Ok(Decision { raw, soft, st, on })
    }

    /// Noise-free decision: booster on where `F(v)₀ ≥ F(v)₁`.
    pub fn decide(&self, v: &Tensor) -> Result<Vec<bool>> {
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let raw = self.forward(&mut g, vv)?;
        Ok(g.value(raw).argmax_rows().into_iter().map(|k| k == 0).collect())
    }

    /// `ζ(Σ M₀ − ρ·|batch|)²`.
    pub fn usage_penalty(&self, g: &mut Graph, st: Var) -> Result<Var> {
        let n = g.shape(st).0 as f64;
        let m0 = g.slice_cols(st, 0, 1)?;
        let used = g.sum(m0);
        let dev = g.affine(used, 1.0, -self.cfg.rho * n);
        let sq = g.mul(dev, dev)?;
        Ok(g.scale(sq, self.cfg.zeta))
    }

    /// Batch-mean `KL(softmax F′(v) ‖ softmax F(v))`; `None` before the first
    /// snapshot.
    pub fn distillation(&self, g: &mut Graph, v: Var, raw: Var) -> Result<Option<Var>> {
        let Some(teacher) = self.forward_snapshot(g, v)? else { return Ok(None) };
        let tp = g.softmax(teacher);
        let tlp = g.log_softmax(teacher);
        let slp = g.log_softmax(raw);
        let diff = g.sub(tlp, slp)?;
        let kl = g.mul(tp, diff)?;
        let n = g.shape(raw).0 as f64;
        let s = g.sum(kl);
        Ok(Some(g.scale(s, 1.0 / n)))
    }

    /// Penalty plus weighted distillation, to be added to the summed CE.
    pub fn regularizer(&self, g: &mut Graph, v: Var, d: &Decision) -> Result<Var> {
        let mut total = self.usage_penalty(g, d.st)?;
        if let Some(kd) = self.distillation(g, v, d.raw)? {
            let kd = g.scale(kd, self.cfg.delta);
            total = g.add(total, kd)?;
        }
        Ok(total)
    }

    pub fn begin_task(&mut self) -> Result<()> {
        match self.phase {
            Phase::Idle | Phase::Snapshotted => {
                self.phase = Phase::Training;
                Ok(())
            }
            p => Err(Error::Lifecycle(format!("gate cannot begin a task from {p:?}"))),
        }
    }

    pub fn end_task(&mut self) -> Result<()> {
        if self.phase != Phase::Training {
            return Err(Error::Lifecycle(format!("gate cannot end a task from {:?}", self.phase)));
        }
        self.phase = Phase::Complete;
        Ok(())
    }

    /// Freeze a copy of `F`; valid once per task, after its last step.
    pub fn snapshot(&mut self) -> Result<()> {
        if self.phase != Phase::Complete {
            return Err(Error::Lifecycle(format!("gate snapshot requested in phase {:?}", self.phase)));
        }
        self.snapshot = Some([
            self.w1.value.clone(),
            self.b1.value.clone(),
            self.w2.value.clone(),
            self.b2.value.clone(),
        ]);
        self.phase = Phase::Snapshotted;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn restore(&mut self, weights: [Tensor; 4], snapshot: Option<[Tensor; 4]>, phase: Phase) -> Result<()> {
        let shapes: Vec<_> = self.params().iter().map(|p| p.value.shape()).collect();
        let ok = |w: &[Tensor; 4]| w.iter().zip(&shapes).all(|(t, s)| t.shape() == *s);
        if !ok(&weights) || snapshot.as_ref().is_some_and(|s| !ok(s)) {
            return Err(Error::Checkpoint("gate tensor shapes do not match".into()));
        }
        let [w1, b1, w2, b2] = weights;
        self.w1.value = w1;
        self.b1.value = b1;
        self.w2.value = w2;
        self.b2.value = b2;
        self.snapshot = snapshot;
        self.phase = phase;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gate(cfg: GateConfig) -> Gate {
        Gate::new(cfg, 6, 1).unwrap()
    }

    #[test]
    fn symmetric_inputs_split_evenly() {
        let m = gumbel_softmax([0.7, 0.7], [0.3, 0.3], 1.0).unwrap();
        assert_eq!(m, [0.5, 0.5]);
        assert!(gumbel_softmax([0.7, 0.7], [0.3, 0.3], 0.0).is_err());
        assert!(gumbel_softmax([0.0, 0.7], [0.3, 0.3], 1.0).is_err());
    }

    #[test]
    fn low_temperature_is_one_hot() {
        let m = gumbel_softmax([0.6, 0.4], [0.1, 0.0], 1e-3).unwrap();
        assert!(m[0] > 1.0 - 1e-9);
    }

    #[test]
    fn graph_decision_matches_plain_formula() {
        let g0 = gate(GateConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Tensor::randn(5, 6, 1.0, &mut rng);
        let noise = sample_gumbel(5, &mut rng);
        let mut g = Graph::new();
        let vv = g.constant(v);
        let raw = g0.forward(&mut g, vv).unwrap();
        let (soft, hard) = g0.gumbel_decision(&mut g, raw, &noise).unwrap();
        for r in 0..5 {
            let sp = |x: f64| (1.0 + x.exp()).ln() + POSITIVE_SHIFT;
            let f = [sp(g.value(raw).get(r, 0)), sp(g.value(raw).get(r, 1))];
            let want = gumbel_softmax(f, [noise.get(r, 0), noise.get(r, 1)], 1.0).unwrap();
            assert!((g.value(soft).get(r, 0) - want[0]).abs() < 1e-12);
            let h = if want[0] >= want[1] { 0 } else { 1 };
            assert_eq!(hard.get(r, h), 1.0);
            assert_eq!(hard.get(r, 1 - h), 0.0);
        }
    }

    #[test]
    fn straight_through_gradient_equals_soft_graph() {
        let g0 = gate(GateConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::randn(4, 6, 1.0, &mut rng);
        let probe = Tensor::randn(4, 2, 1.0, &mut rng);
        let run = |hard: bool| {
            let mut g = Graph::new();
            let vv = g.constant(v.clone());
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let d = g0.decide_train(&mut g, vv, &mut r).unwrap();
            let out = if hard { d.st } else { d.soft };
            let pv = g.constant(probe.clone());
            let m = g.mul(out, pv).unwrap();
            let l = g.sum(m);
            let st_val = g.value(d.st).clone();
            (g.backward(l).unwrap().by_param(), st_val)
        };
        let (a, st) = run(true);
        let (b, _) = run(false);
        assert!(st.data().iter().all(|&x| x == 0.0 || x == 1.0));
        for r in 0..4 {
            assert_eq!(st.get(r, 0) + st.get(r, 1), 1.0);
        }
        for (k, ga) in &a {
            assert!(ga.max_abs_diff(&b[k]) < 1e-15, "{k}");
        }
    }

    #[test]
    fn soft_path_gradients_match_fd() {
        let g0 = gate(GateConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::randn(3, 6, 1.0, &mut rng);
        let noise = sample_gumbel(3, &mut rng);
        let probe = Tensor::randn(3, 2, 1.0, &mut rng);
        let wrt: Vec<Param> = g0.params().into_iter().cloned().collect();
        let r = grad_check(
            &wrt,
            |g, w| {
                let vv = g.constant(v.clone());
                let raw = Gate::mlp(g, vv, [w[0], w[1], w[2], w[3]])?;
                let (soft, _) = g0.gumbel_decision(g, raw, &noise)?;
                let pv = g.constant(probe.clone());
                let m = g.mul(soft, pv)?;
                Ok(g.sum(m))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn penalty_and_distillation_terms() {
        let mut g0 = gate(GateConfig::default());
        let mut g = Graph::new();
        let st = g.constant(Tensor::from_vec(4, 2, vec![1., 0., 0., 1., 1., 0., 0., 1.]).unwrap());
        let p = g0.usage_penalty(&mut g, st).unwrap();
        assert_eq!(g.value(p).item(), 0.0);
        let st = g.constant(Tensor::from_vec(2, 2, vec![1., 0., 1., 0.]).unwrap());
        let p = g0.usage_penalty(&mut g, st).unwrap();
        assert!((g.value(p).item() - 0.1).abs() < 1e-12);

        let v = g.constant(Tensor::randn(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
        let raw = g0.forward(&mut g, v).unwrap();
        assert!(g0.distillation(&mut g, v, raw).unwrap().is_none());
        g0.begin_task().unwrap();
        g0.end_task().unwrap();
        g0.snapshot().unwrap();
        let kd = g0.distillation(&mut g, v, raw).unwrap().unwrap();
        assert!(g.value(kd).item().abs() < 1e-15);
    }

    #[test]
    fn zero_weights_leave_plain_cross_entropy() {
        let g0 = gate(GateConfig {
            zeta: 0.0,
            delta: 0.0,
            ..Default::default()
        });
        let mut g = Graph::new();
        let v = g.constant(Tensor::randn(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
        let d = g0.decide_train(&mut g, v, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let r = g0.regularizer(&mut g, v, &d).unwrap();
        assert_eq!(g.value(r).item(), 0.0);
    }

    #[test]
    fn snapshot_lifecycle() {
        let mut g0 = gate(GateConfig::default());
        assert!(g0.snapshot().is_err());
        g0.begin_task().unwrap();
        assert!(g0.snapshot().is_err(), "mid-task snapshot");
        g0.end_task().unwrap();
        g0.snapshot().unwrap();
        assert!(g0.snapshot().is_err(), "double snapshot");
        let frozen = g0.snapshot_weights().unwrap().clone();
        g0.begin_task().unwrap();
        g0.w1.value.data_mut()[0] += 1.0;
        assert_eq!(g0.snapshot_weights().unwrap(), &frozen);
        assert_ne!(g0.weights()[0], &frozen[0]);
    }

    #[test]
    fn activation_rate_cases() {
        assert_eq!(activation_rate(&[true; 4]).unwrap(), 1.0);
        assert_eq!(activation_rate(&[false; 4]).unwrap(), 0.0);
        assert_eq!(activation_rate(&[true, false, true, true]).unwrap(), 0.75);
        assert!(activation_rate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn relaxed_decision_is_normalized(
            f0 in 1e-6f64..50.0, f1 in 1e-6f64..50.0,
            g0 in -5.0f64..10.0, g1 in -5.0f64..10.0,
            tau in 0.01f64..10.0,
        ) {
            let m = gumbel_softmax([f0, f1], [g0, g1], tau).unwrap();
            prop_assert!((m[0] + m[1] - 1.0).abs() < 1e-6);
        }

        #[test]
        fn distillation_is_non_negative(seed in 0u64..200) {
            let mut gt = gate(GateConfig::default());
            gt.begin_task().unwrap();
            gt.end_task().unwrap();
            gt.snapshot().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gt.w2.value = Tensor::randn(64, 2, 0.5, &mut rng);
            let mut g = Graph::new();
            let v = g.constant(Tensor::randn(4, 6, 1.0, &mut rng));
            let raw = gt.forward(&mut g, v).unwrap();
            let kd = gt.distillation(&mut g, v, raw).unwrap().unwrap();
            prop_assert!(g.value(kd).item() >= -1e-15);
        }
    }
}
