//! Continual-learning metrics over the accuracy matrix `R`, where `R[T][i]`
//! is accuracy on task `i` after training task `T` (both 0-based here).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    rows: Vec<Vec<f64>>,
}

impl MetricsMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Append the row for the next task; it must cover every task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(invalid!("row {t} needs {} entries, got {}", t + 1, row.len()));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("accuracy {v} outside [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }
}

/// Mean of row `t` (1-based, as in "after `t` tasks").
pub fn average_accuracy(r: &MetricsMatrix, t: usize) -> Result<f64> {
    if t == 0 || t > r.n_tasks() {
        return Err(invalid!("row {t} is not populated ({} rows)", r.n_tasks()));
    }
    let row = &r.rows[t - 1];
    Ok(row.iter().sum::<f64>() / t as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// `R[i][i] − R[T][i]` for every task before the last.
    pub drops: Vec<f64>,
    pub mean: f64,
}

pub fn forgetting_profile(r: &MetricsMatrix) -> Result<Forgetting> {
    let n = r.n_tasks();
    if n < 2 {
        return Err(invalid!("forgetting needs at least two tasks, have {n}"));
    }
    let last = &r.rows[n - 1];
    let drops: Vec<f64> = (0..n - 1).map(|i| r.rows[i][i] - last[i]).collect();
    let mean = drops.iter().sum::<f64>() / drops.len() as f64;
    Ok(Forgetting { drops, mean })
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(invalid!("{} predictions for {} labels", predicted.len(), truth.len()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(invalid!("{} predictions for {} labels", predicted.len(), truth.len()));
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(invalid!("class id out of range {n_classes}"));
        }
        m[t][p] += 1;
    }
    Ok(m)
}
