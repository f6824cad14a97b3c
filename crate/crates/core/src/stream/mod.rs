//! Datasets and continual task streams.

mod manifest;
pub mod synthetic;

pub use manifest::{load_manifest, save_manifest};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::rng_for;

/// Fraction of each class kept for training when a source is not pre-split.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// An `H×W×C` image with values in `[0, 1]`, stored row-major (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// Stable identifier, unique within the source dataset.
    pub id: usize,
    pub image: Image,
    pub label: usize,
    pub domain: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>) -> Result<Self> {
        let n_classes = class_names.len();
        if let Some(first) = items.first() {
            let shape = first.image.shape();
            for (i, it) in items.iter().enumerate() {
                if it.image.shape() != shape {
                    return Err(invalid!(
                        "item {i}: image shape {:?} differs from {:?}",
                        it.image.shape(),
                        shape
                    ));
                }
                if it.label >= n_classes {
                    return Err(invalid!("item {i}: label {} >= n_classes {n_classes}", it.label));
                }
            }
        }
        Ok(Dataset { items, class_names })
    }

    /// A subset that shares class names with `self`.
    fn subset(&self, items: Vec<Item>) -> Dataset {
        Dataset {
            items,
            class_names: self.class_names.clone(),
        }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.items.first().map(|it| it.image.shape())
    }

    fn by_class(&self) -> BTreeMap<usize, Vec<&Item>> {
        let mut out: BTreeMap<usize, Vec<&Item>> = BTreeMap::new();
        for it in &self.items {
            out.entry(it.label).or_default().push(it);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    ClassIncremental,
    DomainIncremental,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Classes in arrival order.
    pub classes: Vec<usize>,
    pub domains: BTreeSet<usize>,
}

impl Task {
    pub fn class_set(&self) -> BTreeSet<usize> {
        self.classes.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    mode: StreamMode,
    class_order: Vec<usize>,
    seed: u64,
}

impl TaskStream {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t]
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Look up a training item of any task by id.
    pub fn train_item(&self, id: usize) -> Option<&Item> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.items())
            .find(|it| it.id == id)
    }
}

pub fn identity_order(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order = identity_order(n);
    order.shuffle(&mut rng_for(seed, "class-order", 0));
    order
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(invalid!("class order has {} entries, expected {n}", order.len()));
    }
    let mut seen = vec![false; n];
    for &c in order {
        if c >= n {
            return Err(invalid!("class order entry {c} out of range 0..{n}"));
        }
        if seen[c] {
            return Err(invalid!("class {c} appears twice in class order"));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Split classes into `n_tasks` equal, disjoint groups following
/// `class_order`, and each class's items into train/test under `seed`.
pub fn make_class_incremental_stream(
    ds: &Dataset,
    n_tasks: usize,
    class_order: &[usize],
    seed: u64,
) -> Result<TaskStream> {
    make_class_incremental_stream_with_split(ds, n_tasks, class_order, seed, DEFAULT_TRAIN_FRACTION)
}

pub fn make_class_incremental_stream_with_split(
    ds: &Dataset,
    n_tasks: usize,
    class_order: &[usize],
    seed: u64,
    train_fraction: f64,
) -> Result<TaskStream> {
    let n = ds.n_classes();
    if n_tasks == 0 || n % n_tasks != 0 {
        return Err(invalid!(
            "{n} classes cannot be split evenly into {n_tasks} tasks"
        ));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(invalid!("train fraction {train_fraction} outside [0, 1]"));
    }
    check_permutation(class_order, n)?;
    let per_task = n / n_tasks;
    let by_class = ds.by_class();

    let mut split: BTreeMap<usize, (Vec<Item>, Vec<Item>)> = BTreeMap::new();
    for (&class, items) in &by_class {
        let mut shuffled: Vec<&Item> = items.clone();
        shuffled.shuffle(&mut rng_for(seed, "class-split", class as u64));
        let n_test = ((1.0 - train_fraction) * shuffled.len() as f64).round() as usize;
        let n_train = shuffled.len() - n_test;
        let train = shuffled[..n_train].iter().map(|&i| i.clone()).collect();
        let test = shuffled[n_train..].iter().map(|&i| i.clone()).collect();
        split.insert(class, (train, test));
    }

    let tasks = class_order
        .chunks(per_task)
        .map(|classes| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut domains = BTreeSet::new();
            for c in classes {
                if let Some((tr, te)) = split.get(c) {
                    train.extend(tr.iter().cloned());
                    test.extend(te.iter().cloned());
                }
            }
            for it in train.iter().chain(&test) {
                if let Some(d) = it.domain {
                    domains.insert(d);
                }
            }
            Task {
                train: ds.subset(train),
                test: ds.subset(test),
                classes: classes.to_vec(),
                domains,
            }
        })
        .collect();

    Ok(TaskStream {
        tasks,
        mode: StreamMode::ClassIncremental,
        class_order: class_order.to_vec(),
        seed,
    })
}

/// One task per training domain; every task shares a fixed test set drawn
/// from `test_domains`.
pub fn make_domain_incremental_stream(
    ds: &Dataset,
    train_domains: &[usize],
    test_domains: &[usize],
) -> Result<TaskStream> {
    let train_set: BTreeSet<usize> = train_domains.iter().copied().collect();
    if train_set.len() != train_domains.len() {
        return Err(invalid!("duplicate training domain"));
    }
    if train_domains.is_empty() || test_domains.is_empty() {
        return Err(invalid!("need at least one training and one test domain"));
    }
    if let Some(d) = test_domains.iter().find(|d| train_set.contains(d)) {
        return Err(invalid!("domain {d} is both a training and a test domain"));
    }
    let n = ds.n_classes();
    let all_classes: Vec<usize> = identity_order(n);

    let test_items: Vec<Item> = ds
        .items()
        .iter()
        .filter(|it| it.domain.is_some_and(|d| test_domains.contains(&d)))
        .cloned()
        .collect();
    let test = ds.subset(test_items);

    let mut tasks = Vec::with_capacity(train_domains.len());
    for &d in train_domains {
        let items: Vec<Item> = ds
            .items()
            .iter()
            .filter(|it| it.domain == Some(d))
            .cloned()
            .collect();
        let present: BTreeSet<usize> = items.iter().map(|it| it.label).collect();
        if let Some(missing) = all_classes.iter().find(|c| !present.contains(c)) {
            return Err(invalid!("class {missing} has no items in training domain {d}"));
        }
        tasks.push(Task {
            train: ds.subset(items),
            test: test.clone(),
            classes: all_classes.clone(),
            domains: BTreeSet::from([d]),
        });
    }
    Ok(TaskStream {
        tasks,
        mode: StreamMode::DomainIncremental,
        class_order: all_classes,
        seed: 0,
    })
}
