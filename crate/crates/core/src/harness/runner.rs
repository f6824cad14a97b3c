//! The continual protocol: train each task in order, close it out (freeze,
//! snapshot, rehearsal bookkeeping), evaluate every task seen so far, and
//! write results and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::config::{DataSource, RehearsalMode, RunConfig, Schedule};
use super::cost::{cost_model, CostInputs, CostReport};
use super::kde::{kde_curves, KdeCurves};
use super::metrics::{accuracy, average_accuracy, forgetting_profile, Forgetting, MetricsMatrix};
use super::model::Model;
use super::optim::{cosine_lr, AdamW};
use super::plot;
use crate::error::{Error, Result};
use crate::fusion::promptfusion_loss;
use crate::gate::Phase;
use crate::grad::Graph;
use crate::rehearsal::{Branch, FeatureMemory, GaussianStats, MemoryBuffer};
use crate::rng::rng_for;
use crate::stabilizer::PromptSet;
use crate::stream::load_manifest;
use crate::stream::synthetic::{color_shifted_blobs, rotated_blobs, split_blobs};
use crate::stream::{
    identity_order, make_class_incremental_stream_with_split, make_domain_incremental_stream, shuffled_order, Item,
    StreamMode, TaskStream,
};
use crate::tensor::{Param, Tensor};

pub const RESULTS_FILE: &str = "results.jsonl";
/// Prompts that feed the image encoders.
const VISUAL_PROMPTS: [&str; 2] = ["stab.image_prompts", "boost.prompts"];
const EVAL_BATCH: usize = 128;

pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let s = &cfg.stream;
    let ds = match s.source {
        DataSource::Blobs => split_blobs(&s.blobs)?,
        DataSource::Rotated => rotated_blobs(&s.blobs, &s.angles)?,
        DataSource::ColorShift => color_shifted_blobs(&s.blobs, &s.shifts)?,
        DataSource::Manifest => {
            let path = s.manifest.as_ref().ok_or_else(|| Error::Config("stream.manifest is not set".into()))?;
            load_manifest(path)?
        }
    };
    match s.mode {
        StreamMode::ClassIncremental => {
            let order = if s.shuffle_classes {
                shuffled_order(ds.n_classes(), cfg.seed)
            } else {
                identity_order(ds.n_classes())
            };
            make_class_incremental_stream_with_split(&ds, s.n_tasks, &order, cfg.seed, s.train_fraction)
        }
        StreamMode::DomainIncremental => make_domain_incremental_stream(&ds, &s.train_domains, &s.test_domains),
    }
}

/// Per-task booster usage from one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    pub on: Vec<usize>,
    pub total: Vec<usize>,
    pub rate: f64,
}

/// Task-1 test features of each branch the method uses, after task 1 and
/// after the last task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeSummary {
    pub stabilizer: Option<KdeCurves>,
    pub booster: Option<KdeCurves>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResults {
    pub r: MetricsMatrix,
    pub average_accuracy: f64,
    pub forgetting: Option<Forgetting>,
    pub kde: Option<KdeSummary>,
    pub cost: CostReport,
    pub activation_rate: Option<f64>,
    /// The results file, one JSON record per line.
    pub lines: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SavedSet {
    name: String,
    classes: Vec<usize>,
    domain: Option<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct SavedStats {
    branch: Branch,
    class: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    config: RunConfig,
    seen: Vec<usize>,
    sets: Vec<SavedSet>,
    booster_extensions: Vec<usize>,
    fusion_task_index: usize,
    gate_phase: Option<Phase>,
    gate_snapshot: bool,
    buffer: Option<MemoryBuffer>,
    stats: Vec<SavedStats>,
    r: MetricsMatrix,
    last_rate: Option<f64>,
    lines: Vec<String>,
}

pub struct Runner {
    cfg: RunConfig,
    hash: String,
    stream: TaskStream,
    /// Item id to (task, position) in that task's train split.
    index: BTreeMap<usize, (usize, usize)>,
    model: Model,
    buffer: Option<MemoryBuffer>,
    features: FeatureMemory,
    r: MetricsMatrix,
    next_task: usize,
    /// Task-1 test features after task 1, per used branch.
    kde_before: (Option<Tensor>, Option<Tensor>),
    last_rate: Option<f64>,
    lines: Vec<String>,
}

fn to_line(v: serde_json::Value) -> String {
    v.to_string()
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = build_stream(&cfg)?;
        let first = stream
            .tasks()
            .iter()
            .flat_map(|t| t.train.items())
            .next()
            .ok_or_else(|| Error::Config("stream has no training items".into()))?;
        let n_classes = stream.task(0).train.n_classes();
        let model = Model::new(&cfg, n_classes, first.image.shape())?;
        let mut index = BTreeMap::new();
        for (t, task) in stream.tasks().iter().enumerate() {
            for (i, it) in task.train.items().iter().enumerate() {
                index.insert(it.id, (t, i));
            }
        }
        let buffer = (cfg.rehearsal.mode == RehearsalMode::Buffer)
            .then(|| MemoryBuffer::new(cfg.rehearsal.capacity, cfg.seed));
        let hash = cfg.hash()?;
        let mut public = cfg.clone();
        public.output_dir = None;
        let lines = vec![to_line(json!({
            "event": "config",
            "config_hash": hash,
            "config": public,
        }))];
        Ok(Runner {
            cfg,
            hash,
            stream,
            index,
            model,
            buffer,
            features: FeatureMemory::default(),
            r: MetricsMatrix::new(),
            next_task: 0,
            kde_before: (None, None),
            last_rate: None,
            lines,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn stream(&self) -> &TaskStream {
        &self.stream
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn matrix(&self) -> &MetricsMatrix {
        &self.r
    }

    pub fn buffer(&self) -> Option<&MemoryBuffer> {
        self.buffer.as_ref()
    }

    pub fn features(&self) -> &FeatureMemory {
        &self.features
    }

    /// Tasks completed so far.
    pub fn tasks_done(&self) -> usize {
        self.next_task
    }

    pub fn is_finished(&self) -> bool {
        self.next_task == self.stream.n_tasks()
    }

    /// Optimize on task `t`'s training split, plus buffered exemplars.
    pub fn train_task(&mut self, t: usize) -> Result<()> {
        if t != self.next_task {
            return Err(Error::Lifecycle(format!("task {t} requested, next task is {}", self.next_task)));
        }
        if t >= self.stream.n_tasks() {
            return Err(Error::Lifecycle(format!("stream has only {} tasks", self.stream.n_tasks())));
        }
        let task = self.stream.task(t);
        let domain = match self.cfg.stream.mode {
            StreamMode::ClassIncremental => None,
            StreamMode::DomainIncremental => task.domains.iter().next().copied(),
        };
        self.model.begin_task(&task.classes, domain)?;

        let mut items: Vec<&Item> = task.train.items().iter().collect();
        if let Some(buf) = &self.buffer {
            for id in buf.ids() {
                let &(k, i) = self
                    .index
                    .get(&id)
                    .ok_or_else(|| Error::Checkpoint(format!("buffered id {id} is not a training item")))?;
                items.push(&self.stream.task(k).train.items()[i]);
            }
        }
        let o = &self.cfg.optim;
        let per_epoch = items.len().div_ceil(o.batch_size);
        let total = o.epochs * per_epoch;
        let mut opt = AdamW::new(o.weight_decay);
        let mut noise = rng_for(self.cfg.seed, "gate-noise", t as u64);
        let mut step = 0;
        for epoch in 0..o.epochs {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut rng_for(self.cfg.seed, "batch-order", (t * 1000 + epoch) as u64));
            for chunk in order.chunks(o.batch_size) {
                let batch: Vec<&Item> = chunk.iter().map(|&i| items[i]).collect();
                let lr = match o.schedule {
                    Schedule::Cosine => cosine_lr(o.lr, step, total),
                    Schedule::Constant => o.lr,
                };
                let v = match self.model.gate {
                    Some(_) => Some(self.model.gate_features(&batch)?),
                    None => None,
                };
                let cols = self.model.columns(&batch)?;
                let mut g = Graph::new();
                let f = self.model.forward(&mut g, &batch, v.as_ref(), Some(&mut noise))?;
                let mut loss = promptfusion_loss(&mut g, f.z, &cols)?;
                if let Some(reg) = f.reg {
                    loss = g.add(loss, reg)?;
                }
                let grads = g.backward(loss)?.by_param();
                let (visual, rest): (Vec<&mut Param>, Vec<&mut Param>) = self
                    .model
                    .params_mut()
                    .into_iter()
                    .partition(|p| VISUAL_PROMPTS.contains(&p.name.as_str()));
                opt.step(visual, &grads, lr * self.cfg.optim.visual_lr_scale);
                opt.step(rest, &grads, lr);
                step += 1;
            }
        }
        Ok(())
    }

    fn branch_features(&self, items: &[&Item]) -> Result<(Tensor, Tensor)> {
        let mut s = Vec::new();
        let mut b = Vec::new();
        for chunk in items.chunks(EVAL_BATCH) {
            let (cs, cb) = self.model.branch_features(chunk)?;
            s.push(cs);
            b.push(cb);
        }
        let s = Tensor::concat_rows(&s.iter().collect::<Vec<_>>())?;
        let b = Tensor::concat_rows(&b.iter().collect::<Vec<_>>())?;
        Ok((s, b))
    }

    /// Fit Gaussian statistics on task `t`'s training features, then tune
    /// the heads on samples drawn for every seen class.
    fn feature_finetune(&mut self, t: usize) -> Result<()> {
        let task = self.stream.task(t);
        let items: Vec<&Item> = task.train.items().iter().collect();
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let (s, b) = self.branch_features(&items)?;
        self.features.record(Branch::Stabilizer, &s, &labels)?;
        self.features.record(Branch::Booster, &b, &labels)?;
        let rc = &self.cfg.rehearsal;
        if t == 0 || rc.finetune_steps == 0 {
            return Ok(());
        }
        let classes = self.model.seen().to_vec();
        let mut opt = AdamW::new(self.cfg.optim.weight_decay);
        for step in 0..rc.finetune_steps {
            let set = self.features.sample_features(
                &classes,
                rc.finetune_per_class,
                self.cfg.seed,
                (t * 100_000 + step) as u64,
            )?;
            let mut g = Graph::new();
            let loss = self.model.finetune_loss(&mut g, &set)?;
            let grads = g.backward(loss)?.by_param();
            let params: Vec<&mut Param> = self
                .model
                .params_mut()
                .into_iter()
                .filter(|p| !p.name.starts_with("gate."))
                .collect();
            opt.step(params, &grads, rc.finetune_lr);
        }
        Ok(())
    }

    /// Close task `t`: statistics and fine-tuning, freezing, the gate
    /// snapshot and the exemplar buffer.
    pub fn end_task(&mut self, t: usize) -> Result<()> {
        if let Some(g) = &mut self.model.gate {
            g.end_task()?;
        }
        if self.cfg.rehearsal.mode == RehearsalMode::Gaussian {
            self.feature_finetune(t)?;
        }
        self.model.stabilizer.freeze_all();
        if let Some(g) = &mut self.model.gate {
            g.snapshot()?;
        }
        if let Some(buf) = &mut self.buffer {
            let pairs: Vec<(usize, usize)> = self.stream.task(t).train.items().iter().map(|it| (it.id, it.label)).collect();
            buf.update(&pairs)?;
        }
        if t == 0 {
            self.kde_before = self.kde_features()?;
        }
        self.next_task = t + 1;
        Ok(())
    }

    /// Accuracy on every seen task's test split after training task `t`.
    pub fn evaluate_all(&mut self, t: usize) -> Result<(Vec<f64>, Option<DecisionLog>)> {
        if t >= self.next_task {
            return Err(Error::Lifecycle(format!("task {t} has not been trained")));
        }
        let cols = match self.cfg.stream.mode {
            StreamMode::ClassIncremental => t + 1,
            StreamMode::DomainIncremental => 1,
        };
        let mut row = Vec::with_capacity(t + 1);
        let (mut on, mut total) = (Vec::new(), Vec::new());
        for i in 0..cols {
            let items: Vec<&Item> = self.stream.task(i).test.items().iter().collect();
            let truth: Vec<usize> = items.iter().map(|it| it.label).collect();
            let (pred, dec) = predict(&mut self.model, &items)?;
            row.push(accuracy(&pred, &truth)?);
            on.push(dec.iter().filter(|&&d| d).count());
            total.push(dec.len());
        }
        if cols == 1 {
            // the fixed domain-incremental test set fills every column
            row.resize(t + 1, row[0]);
        }
        let log = self.model.gate.as_ref().map(|_| DecisionLog {
            rate: on.iter().sum::<usize>() as f64 / total.iter().sum::<usize>().max(1) as f64,
            on,
            total,
        });
        Ok((row, log))
    }

    /// Train, close and evaluate the next task, then checkpoint when an
    /// output directory is configured.
    pub fn run_task(&mut self) -> Result<()> {
        let t = self.next_task;
        self.train_task(t)?;
        self.end_task(t)?;
        let (row, log) = self.evaluate_all(t)?;
        self.r.push_row(row.clone())?;
        let a = average_accuracy(&self.r, t + 1)?;
        let prompt_checksums: Vec<String> = self.model.stabilizer.sets().iter().map(|s| s.prompts.value.checksum()).collect();
        self.lines.push(to_line(json!({
            "event": "task_end",
            "task": t,
            "row": row,
            "average_accuracy": a,
            "encoder_checksum": self.model.encoder_checksum(),
            "prompt_checksums": prompt_checksums,
        })));
        if let Some(log) = log {
            self.last_rate = Some(log.rate);
            self.lines.push(to_line(json!({
                "event": "decisions",
                "task": t,
                "on": log.on,
                "total": log.total,
                "rate": log.rate,
            })));
        }
        log::info!("task {} of {}: A = {a:.4}", t + 1, self.stream.n_tasks());
        if let Some(dir) = self.cfg.output_dir.clone() {
            self.write_lines(&dir, &self.lines)?;
            self.save_checkpoint(checkpoint_dir(&dir, t + 1))?;
        }
        Ok(())
    }

    fn write_lines(&self, dir: &Path, lines: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESULTS_FILE);
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Summary metrics and plots once every task is done.
    pub fn finish(&mut self) -> Result<RunResults> {
        while !self.is_finished() {
            self.run_task()?;
        }
        let n = self.r.n_tasks();
        let a = average_accuracy(&self.r, n)?;
        let forgetting = (n >= 2).then(|| forgetting_profile(&self.r)).transpose()?;
        let kde = match &self.kde_before {
            (None, None) => None,
            (s0, b0) => {
                let (s1, b1) = self.kde_features()?;
                let curves = |a: &Option<Tensor>, b: Option<Tensor>| match (a, b) {
                    (Some(a), Some(b)) => kde_curves(a, &b, self.cfg.seed).map(Some),
                    _ => Ok(None),
                };
                Some(KdeSummary {
                    stabilizer: curves(s0, s1)?,
                    booster: curves(b0, b1)?,
                })
            }
        };
        let shape = self.stream.task(0).train.image_shape().unwrap_or((1, 1, 1));
        let inputs = CostInputs::from_config(&self.cfg, self.model.seen().len(), shape);
        let cost = cost_model(&inputs, self.cfg.method, self.last_rate);
        let mut lines = self.lines.clone();
        if let Some(k) = &kde {
            for (branch, c) in [("stabilizer", &k.stabilizer), ("booster", &k.booster)] {
                let Some(c) = c else { continue };
                lines.push(to_line(json!({
                    "event": "kde",
                    "branch": branch,
                    "distance": c.distance,
                    "grid": c.grid,
                    "before": c.before,
                    "after": c.after,
                })));
            }
        }
        lines.push(to_line(json!({
            "event": "summary",
            "tasks": n,
            "r": self.r.rows(),
            "average_accuracy": a,
            "forgetting": forgetting,
            "kde_shift": kde.as_ref().map(|k| json!({
                "stabilizer": k.stabilizer.as_ref().map(|c| c.distance),
                "booster": k.booster.as_ref().map(|c| c.distance),
            })),
            "activation_rate": self.last_rate,
            "cost": cost,
        })));
        if let Some(dir) = self.cfg.output_dir.clone() {
            self.write_lines(&dir, &lines)?;
            plot::plot_results(&lines, &dir)?;
        }
        Ok(RunResults {
            r: self.r.clone(),
            average_accuracy: a,
            forgetting,
            kde,
            cost,
            activation_rate: self.last_rate,
            lines,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for p in self.model.params() {
            tensors.insert(p.name.clone(), p.value.clone());
        }
        if let Some(snap) = self.model.gate.as_ref().and_then(|g| g.snapshot_weights()) {
            for (i, t) in snap.iter().enumerate() {
                tensors.insert(format!("gate.snapshot.{i}"), t.clone());
            }
        }
        self.model.visit_encoders(&mut |name, t| {
            tensors.insert(format!("encoder.{name}"), t.clone());
        });
        let mut stats = Vec::new();
        for branch in [Branch::Stabilizer, Branch::Booster] {
            let b = self.features.branch(branch);
            for class in b.classes() {
                let g = b.get(class).expect("class listed");
                let key = format!("stats.{branch:?}.{class}");
                tensors.insert(format!("{key}.mean"), Tensor::row_vector(g.mean.clone()));
                tensors.insert(format!("{key}.cov"), g.cov.clone());
                stats.push(SavedStats {
                    branch,
                    class,
                    count: g.count,
                });
            }
        }
        if let Some(s) = &self.kde_before.0 {
            tensors.insert("kde.stabilizer".into(), s.clone());
        }
        if let Some(b) = &self.kde_before.1 {
            tensors.insert("kde.booster".into(), b.clone());
        }
        let sets = self
            .model
            .stabilizer
            .sets()
            .iter()
            .map(|s| SavedSet {
                name: s.prompts.name.clone(),
                classes: s.classes.clone(),
                domain: s.domain,
                frozen: s.prompts.frozen,
            })
            .collect();
        let state = SavedState {
            config: self.cfg.clone(),
            seen: self.model.seen().to_vec(),
            sets,
            booster_extensions: self.model.booster.extensions().to_vec(),
            fusion_task_index: self.model.fusion.task_index(),
            gate_phase: self.model.gate.as_ref().map(|g| g.phase()),
            gate_snapshot: self.model.gate.as_ref().is_some_and(|g| g.has_snapshot()),
            buffer: self.buffer.clone(),
            stats,
            r: self.r.clone(),
            last_rate: self.last_rate,
            lines: self.lines.clone(),
        };
        Ok(Checkpoint {
            config_hash: self.hash.clone(),
            task_index: self.next_task,
            tensors,
            state: serde_json::to_value(state)?,
        })
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(dir)
    }

    /// Rebuild a runner from a checkpoint. A supplied config must hash to
    /// the one the checkpoint was written under.
    pub fn resume(dir: impl AsRef<Path>, config: Option<RunConfig>) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let state: SavedState = serde_json::from_value(ck.state.clone())?;
        let cfg = match config {
            Some(c) => {
                let h = c.hash()?;
                if h != ck.config_hash {
                    return Err(Error::Checkpoint(format!(
                        "config hash {h} does not match checkpoint hash {}",
                        ck.config_hash
                    )));
                }
                c
            }
            None => state.config.clone(),
        };
        if cfg.hash()? != ck.config_hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let mut run = Runner::new(cfg)?;
        let m = &mut run.model;

        let mut missing = None;
        m.visit_encoders_mut(&mut |name, t| match ck.tensors.get(&format!("encoder.{name}")) {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("encoder tensor {name} missing or misshapen")));
        }

        let sets = state
            .sets
            .iter()
            .map(|s| {
                Ok(PromptSet {
                    classes: s.classes.clone(),
                    domain: s.domain,
                    prompts: Param {
                        name: s.name.clone(),
                        value: ck.tensor(&s.name)?.clone(),
                        frozen: s.frozen,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        m.stabilizer.restore(sets, ck.tensor("stab.image_prompts")?.clone())?;
        m.booster.restore(
            ck.tensor("boost.prompts")?.clone(),
            ck.tensor("boost.head_w")?.clone(),
            ck.tensor("boost.head_b")?.clone(),
            state.booster_extensions.clone(),
        )?;
        m.fusion.restore(
            state.fusion_task_index,
            ck.tensor("fusion.lambda")?.clone(),
            ck.tensor("fusion.alpha")?.clone(),
            ck.tensor("fusion.beta")?.clone(),
        )?;
        if let Some(g) = &mut m.gate {
            let get4 = |prefix: &dyn Fn(usize) -> String| -> Result<[Tensor; 4]> {
                Ok([
                    ck.tensor(&prefix(0))?.clone(),
                    ck.tensor(&prefix(1))?.clone(),
                    ck.tensor(&prefix(2))?.clone(),
                    ck.tensor(&prefix(3))?.clone(),
                ])
            };
            let names = ["gate.w1", "gate.b1", "gate.w2", "gate.b2"];
            let weights = get4(&|i| names[i].to_string())?;
            let snapshot = if state.gate_snapshot {
                Some(get4(&|i| format!("gate.snapshot.{i}"))?)
            } else {
                None
            };
            let phase = state
                .gate_phase
                .ok_or_else(|| Error::Checkpoint("gate phase missing".into()))?;
            g.restore(weights, snapshot, phase)?;
        }
        m.set_seen(state.seen.clone());

        for s in &state.stats {
            let key = format!("stats.{:?}.{}", s.branch, s.class);
            let mean = ck.tensor(&format!("{key}.mean"))?.data().to_vec();
            let cov = ck.tensor(&format!("{key}.cov"))?.clone();
            let g = GaussianStats::from_parts(mean, cov, s.count, s.class)?;
            run.features.branch_mut(s.branch).insert(s.class, g);
        }
        run.kde_before = (
            ck.tensors.get("kde.stabilizer").cloned(),
            ck.tensors.get("kde.booster").cloned(),
        );
        run.buffer = state.buffer;
        run.r = state.r;
        run.last_rate = state.last_rate;
        run.lines = state.lines;
        run.next_task = ck.task_index;
        Ok(run)
    }

    /// Task-1 test features of the branches in use, at checkpoint precision
    /// so a resumed run compares the same values.
    fn kde_features(&self) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let items: Vec<&Item> = self.stream.task(0).test.items().iter().collect();
        if items.is_empty() {
            return Ok((None, None));
        }
        let (mut s, mut b) = self.branch_features(&items)?;
        s.round_to_f32();
        b.round_to_f32();
        let m = self.cfg.method;
        Ok((m.uses_stabilizer().then_some(s), m.uses_booster().then_some(b)))
    }
}

fn predict(model: &mut Model, items: &[&Item]) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut pred = Vec::with_capacity(items.len());
    let mut on = Vec::new();
    for chunk in items.chunks(EVAL_BATCH) {
        let (p, d) = model.predict(chunk)?;
        pred.extend(p);
        on.extend(d.unwrap_or_default());
    }
    Ok((pred, on))
}

pub fn checkpoint_dir(output: &Path, tasks_done: usize) -> PathBuf {
    output.join("checkpoints").join(format!("task_{tasks_done}"))
}

/// Execute a whole run.
pub fn run(cfg: RunConfig) -> Result<RunResults> {
    Runner::new(cfg)?.finish()
}

/// Continue a checkpointed run to the end.
pub fn resume(dir: impl AsRef<Path>, config: Option<RunConfig>) -> Result<RunResults> {
    Runner::resume(dir, config)?.finish()
}

/// Run independent configs side by side, at most `threads` at a time. Each
/// run owns all of its state; results come back in input order.
pub fn run_sweep(cfgs: Vec<RunConfig>, threads: usize) -> Vec<Result<RunResults>> {
    let threads = threads.max(1);
    let mut out: Vec<Option<Result<RunResults>>> = (0..cfgs.len()).map(|_| None).collect();
    let mut jobs: Vec<(usize, RunConfig)> = cfgs.into_iter().enumerate().collect();
    while !jobs.is_empty() {
        let wave: Vec<(usize, RunConfig)> = jobs.drain(..threads.min(jobs.len())).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = wave.into_iter().map(|(i, c)| (i, s.spawn(move || run(c)))).collect();
            for (i, h) in handles {
                out[i] = Some(h.join().unwrap_or_else(|_| Err(Error::Lifecycle("run panicked".into()))));
            }
        });
    }
    out.into_iter().map(|r| r.expect("every job ran")).collect()
}
