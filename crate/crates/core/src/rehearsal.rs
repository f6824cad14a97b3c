//! Memory of past tasks: a class-balanced exemplar buffer, or per-class
//! Gaussian feature statistics that are sampled to finetune the heads
//! without storing images.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::booster::Booster;
use crate::encoders::TextEncoder;
use crate::error::{invalid, Error, Result};
use crate::fusion::{promptfusion_loss, Fusion};
use crate::grad::{Graph, Var};
use crate::rng::rng_for;
use crate::stabilizer::Stabilizer;
use crate::tensor::Tensor;

pub const SHRINK_RATIO: f64 = 1e-4;
pub const SHRINK_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Stabilizer,
    Booster,
}

/// Class-balanced exemplar store holding item ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    capacity: usize,
    seed: u64,
    store: BTreeMap<usize, Vec<usize>>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        MemoryBuffer {
            capacity,
            seed,
            store: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        self.store.keys().copied().collect()
    }

    pub fn class_ids(&self, class: usize) -> &[usize] {
        self.store.get(&class).map_or(&[], Vec::as_slice)
    }

    /// All stored ids, grouped by ascending class.
    pub fn ids(&self) -> Vec<usize> {
        self.store.values().flatten().copied().collect()
    }

    /// Per-class quota for `n` classes: `floor(capacity/n)`, the remainder
    /// going one each to the lowest class ids.
    pub fn quotas(capacity: usize, classes: &[usize]) -> BTreeMap<usize, usize> {
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        let n = sorted.len().max(1);
        let (base, rem) = (capacity / n, capacity % n);
        sorted.into_iter().enumerate().map(|(i, c)| (c, base + (i < rem) as usize)).collect()
    }

    /// Admit a task's `(item id, label)` pairs and rebalance.
    pub fn update(&mut self, items: &[(usize, usize)]) -> Result<()> {
        let mut incoming: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(id, label) in items {
            incoming.entry(label).or_default().push(id);
        }
        let mut all: Vec<usize> = self.store.keys().chain(incoming.keys()).copied().collect();
        all.sort_unstable();
        all.dedup();
        if self.capacity < all.len() {
            return Err(invalid!(
                "buffer capacity {} is below the {} classes seen",
                self.capacity,
                all.len()
            ));
        }
        let quotas = Self::quotas(self.capacity, &all);
        for (class, mut ids) in incoming {
            ids.sort_unstable();
            let mut rng = rng_for(self.seed, "buffer", class as u64);
            ids.shuffle(&mut rng);
            let existing = self.store.entry(class).or_default();
            existing.extend(ids.into_iter().filter(|id| !existing.contains(id)).collect::<Vec<_>>());
        }
        for (class, ids) in &mut self.store {
            ids.truncate(quotas[class]);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Shrunk covariance, `d × d`.
    pub cov: Tensor,
    pub count: usize,
    /// Lower Cholesky factor of `cov`.
    chol: Tensor,
}

fn cholesky(cov: &Tensor, class: usize) -> Result<Tensor> {
    let d = cov.rows();
    let m = DMatrix::from_row_slice(d, d, cov.data());
    let c = m.cholesky().ok_or(Error::NotPositiveDefinite { class })?;
    let l = c.l();
    let mut out = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            out.set(i, j, l[(i, j)]);
        }
    }
    Ok(out)
}

impl GaussianStats {
    /// Unbiased moments of `rows` with `ε·I` shrinkage. Fewer samples than
    /// dimensions keeps only the diagonal.
    pub fn fit(rows: &[&[f64]], class: usize) -> Result<Self> {
        let n = rows.len();
        let Some(d) = rows.first().map(|r| r.len()) else {
            return Err(invalid!("no samples for class {class}"));
        };
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Tensor::zeros(d, d);
        if n > 1 {
            for r in rows {
                for i in 0..d {
                    let di = r[i] - mean[i];
                    for j in 0..d {
                        let v = cov.get(i, j) + di * (r[j] - mean[j]);
                        cov.set(i, j, v);
                    }
                }
            }
            cov = cov.map(|v| v / (n - 1) as f64);
        }
        if n < d {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        cov.set(i, j, 0.0);
                    }
                }
            }
        }
        let tr: f64 = (0..d).map(|i| cov.get(i, i)).sum();
        let eps = (SHRINK_RATIO * tr / d as f64).max(SHRINK_FLOOR);
        for i in 0..d {
            cov.set(i, i, cov.get(i, i) + eps);
        }
        Self::from_parts(mean, cov, n, class)
    }

    /// Rounds to f32 so stored statistics survive a checkpoint exactly.
    pub fn from_parts(mut mean: Vec<f64>, mut cov: Tensor, count: usize, class: usize) -> Result<Self> {
        mean.iter_mut().for_each(|m| *m = *m as f32 as f64);
        cov.round_to_f32();
        let chol = cholesky(&cov, class)?;
        Ok(GaussianStats { mean, cov, count, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        (0..d)
            .map(|i| self.mean[i] + (0..=i).map(|j| self.chol.get(i, j) * z[j]).sum::<f64>())
            .collect()
    }
}

/// Per-class Gaussian statistics for one branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassFeatureStats {
    classes: BTreeMap<usize, GaussianStats>,
}

impl ClassFeatureStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, class: usize) -> Option<&GaussianStats> {
        self.classes.get(&class)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn insert(&mut self, class: usize, stats: GaussianStats) {
        self.classes.insert(class, stats);
    }

    /// Fit (or refit) every class present in `labels`.
    pub fn record(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(invalid!("{} feature rows for {} labels", features.rows(), labels.len()));
        }
        let mut by: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (r, &y) in labels.iter().enumerate() {
            by.entry(y).or_default().push(features.row(r));
        }
        for (class, rows) in by {
            self.classes.insert(class, GaussianStats::fit(&rows, class)?);
        }
        Ok(())
    }

    /// `n_per_class` draws for each of `classes`, grouped by class.
    pub fn sample<R: Rng + ?Sized>(&self, classes: &[usize], n_per_class: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut d = None;
        for &c in classes {
            let s = self.classes.get(&c).ok_or_else(|| invalid!("no statistics for class {c}"))?;
            if *d.get_or_insert(s.dim()) != s.dim() {
                return Err(invalid!("class {c} statistics have a different dimension"));
            }
            for _ in 0..n_per_class {
                data.extend(s.sample(rng));
                labels.push(c);
            }
        }
        Ok((Tensor::from_vec(labels.len(), d.unwrap_or(0), data)?, labels))
    }
}

/// Statistics for both branches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMemory {
    pub stabilizer: ClassFeatureStats,
    pub booster: ClassFeatureStats,
}

/// A sampled replay set: one stabilizer and one booster feature per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSet {
    pub stabilizer: Tensor,
    pub booster: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureMemory {
    pub fn branch(&self, b: Branch) -> &ClassFeatureStats {
        match b {
            Branch::Stabilizer => &self.stabilizer,
            Branch::Booster => &self.booster,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut ClassFeatureStats {
        match b {
            Branch::Stabilizer => &mut self.stabilizer,
            Branch::Booster => &mut self.booster,
        }
    }

    pub fn record(&mut self, branch: Branch, features: &Tensor, labels: &[usize]) -> Result<()> {
        self.branch_mut(branch).record(features, labels)
    }

    pub fn sample_features(&self, classes: &[usize], n_per_class: usize, seed: u64, round: u64) -> Result<SampledSet> {
        let mut rs = rng_for(seed, "feature-replay-stab", round);
        let mut rb = rng_for(seed, "feature-replay-boost", round);
        let (s, labels) = self.stabilizer.sample(classes, n_per_class, &mut rs)?;
        let (b, lb) = self.booster.sample(classes, n_per_class, &mut rb)?;
        debug_assert_eq!(labels, lb);
        Ok(SampledSet {
            stabilizer: s,
            booster: b,
            labels,
        })
    }
}

/// Fused loss on sampled features. The stabilizer side compares features
/// against text features directly, so only text prompts, head and fusion
/// parameters are reachable. `columns` are logit columns of the labels.
#[allow(clippy::too_many_arguments)]
pub fn feature_finetune_loss(
    g: &mut Graph,
    stabilizer: &Stabilizer,
    text: &TextEncoder,
    booster: Option<&Booster>,
    fusion: Option<&Fusion>,
    stab_features: &Tensor,
    boost_features: &Tensor,
    columns: &[usize],
) -> Result<Var> {
    let e_text = text.embed_dim();
    if stab_features.cols() != e_text {
        return Err(invalid!("stabilizer features have dim {}, text dim is {e_text}", stab_features.cols()));
    }
    let tf = stabilizer.text_features(g, text)?;
    let sf = g.constant(stab_features.clone());
    let s = stabilizer.logits_from_features(g, sf, tf)?;
    let b = match booster {
        Some(bst) => {
            let e = bst.head().0.cols();
            if boost_features.cols() != e {
                return Err(invalid!("booster features have dim {}, head expects {e}", boost_features.cols()));
            }
            let bf = g.constant(boost_features.clone());
            Some(bst.logits_from_features(g, bf)?)
        }
        None => None,
    };
    let z = match fusion {
        Some(f) => f.fuse(g, s, b, true)?,
        None => s,
    };
    promptfusion_loss(g, z, columns)
}
