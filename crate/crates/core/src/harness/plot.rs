//! SVG plots from a results file: accuracy against task, and the KDE
//! overlays of task-1 features before and after the stream.

use std::path::Path;

use plotters::prelude::*;
use serde_json::Value;

use crate::error::{Error, Result};

fn err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("plot: {e}"))
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default()
}

fn parse(lines: &[String]) -> Result<Vec<Value>> {
    lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// `A_t` and task-1 accuracy after each task.
pub fn accuracy_series(records: &[Value]) -> (Vec<f64>, Vec<f64>) {
    let mut avg = Vec::new();
    let mut first = Vec::new();
    for r in records.iter().filter(|r| r["event"] == "task_end") {
        avg.push(r["average_accuracy"].as_f64().unwrap_or(f64::NAN));
        first.push(floats(&r["row"]).first().copied().unwrap_or(f64::NAN));
    }
    (avg, first)
}

pub fn plot_accuracy(records: &[Value], path: &Path) -> Result<()> {
    let (avg, first) = accuracy_series(records);
    if avg.is_empty() {
        return Err(err("no task_end records"));
    }
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0.5f64..avg.len() as f64 + 0.5, 0f64..1f64)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("tasks learned")
        .y_desc("accuracy")
        .draw()
        .map_err(err)?;
    for (series, color) in [(&avg, BLUE), (&first, RED)] {
        let pts: Vec<(f64, f64)> = series.iter().enumerate().map(|(i, &v)| (i as f64 + 1.0, v)).collect();
        chart.draw_series(LineSeries::new(pts.clone(), color)).map_err(err)?;
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(err)?;
    }
    root.present().map_err(err)
}

pub fn plot_kde(records: &[Value], path: &Path) -> Result<()> {
    let kdes: Vec<&Value> = records.iter().filter(|r| r["event"] == "kde").collect();
    if kdes.is_empty() {
        return Err(err("no kde records"));
    }
    let root = SVGBackend::new(path, (640 * kdes.len() as u32, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    for (area, rec) in root.split_evenly((1, kdes.len())).iter().zip(kdes) {
        let grid = floats(&rec["grid"]);
        let before = floats(&rec["before"]);
        let after = floats(&rec["after"]);
        let (lo, hi) = (grid.first().copied().unwrap_or(0.0), grid.last().copied().unwrap_or(1.0));
        let top = before.iter().chain(&after).cloned().fold(0.0, f64::max).max(1e-12) * 1.05;
        let mut chart = ChartBuilder::on(area)
            .margin(20)
            .caption(rec["branch"].as_str().unwrap_or("?"), ("sans-serif", 18))
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(lo..hi, 0f64..top)
            .map_err(err)?;
        chart.configure_mesh().draw().map_err(err)?;
        for (ys, color) in [(&before, BLUE), (&after, RED)] {
            let pts = grid.iter().copied().zip(ys.iter().copied());
            chart.draw_series(LineSeries::new(pts, color)).map_err(err)?;
        }
    }
    root.present().map_err(err)
}

/// Write `accuracy.svg`, and `kde.svg` when the run recorded KDE curves.
pub fn plot_results(lines: &[String], dir: &Path) -> Result<()> {
    let records = parse(lines)?;
    plot_accuracy(&records, &dir.join("accuracy.svg"))?;
    if records.iter().any(|r| r["event"] == "kde") {
        plot_kde(&records, &dir.join("kde.svg"))?;
    }
    Ok(())
}
