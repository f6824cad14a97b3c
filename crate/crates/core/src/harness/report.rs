//! Plain-text tables from a results file.

use std::fmt::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn fmt_opt(v: &Value) -> String {
    v.as_f64().map_or("-".to_string(), |x| format!("{x:.4}"))
}

pub fn report(lines: &[String]) -> Result<String> {
    let records: Vec<Value> = lines
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    let mut out = String::new();
    if let Some(c) = records.iter().find(|r| r["event"] == "config") {
        let hash = c["config_hash"].as_str().unwrap_or("");
        let _ = writeln!(
            out,
            "run {}  method {}  seed {}",
            &hash[..hash.len().min(12)],
            c["config"]["method"].as_str().unwrap_or("?"),
            c["config"]["seed"]
        );
    }
    let rows: Vec<&Value> = records.iter().filter(|r| r["event"] == "task_end").collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("results hold no task_end records".into()));
    }
    let n = rows.len();
    let _ = writeln!(out, "\naccuracy R[after][task]");
    let _ = write!(out, "{:>8}", "after");
    for i in 1..=n {
        let _ = write!(out, "{:>8}", format!("T{i}"));
    }
    let _ = writeln!(out, "{:>8}", "A_t");
    for (t, r) in rows.iter().enumerate() {
        let _ = write!(out, "{:>8}", t + 1);
        for v in r["row"].as_array().into_iter().flatten() {
            let _ = write!(out, "{:>8}", fmt_opt(v));
        }
        for _ in t + 1..n {
            let _ = write!(out, "{:>8}", "");
        }
        let _ = writeln!(out, "{:>8}", fmt_opt(&r["average_accuracy"]));
    }
    let decisions: Vec<&Value> = records.iter().filter(|r| r["event"] == "decisions").collect();
    if !decisions.is_empty() {
        let _ = writeln!(out, "\nbooster activation rate per evaluation");
        for d in decisions {
            let _ = writeln!(out, "  after T{}: {}", d["task"].as_u64().unwrap_or(0) + 1, fmt_opt(&d["rate"]));
        }
    }
    if let Some(s) = records.iter().find(|r| r["event"] == "summary") {
        let _ = writeln!(out, "\nfinal average accuracy  {}", fmt_opt(&s["average_accuracy"]));
        if let Some(f) = s["forgetting"].as_object() {
            let drops: Vec<String> = f["drops"].as_array().into_iter().flatten().map(fmt_opt).collect();
            let _ = writeln!(out, "forgetting drops        {}", drops.join(" "));
            let _ = writeln!(out, "mean forgetting         {}", fmt_opt(&f["mean"]));
        }
        if let Some(k) = s["kde_shift"].as_object() {
            let _ = writeln!(
                out,
                "task-1 KDE shift        stabilizer {}  booster {}",
                fmt_opt(&k["stabilizer"]),
                fmt_opt(&k["booster"])
            );
        }
        let c = &s["cost"];
        let _ = writeln!(out, "\nper-image MACs");
        for key in ["stabilizer", "booster", "fusion", "gate", "gate_feature", "prompt_fusion"] {
            let _ = writeln!(out, "  {key:<14}{}", c[key]);
        }
        if let Some(l) = c["lite"].as_f64() {
            let _ = writeln!(out, "  {:<14}{l:.0}  (rate {})", "lite", fmt_opt(&c["activation_rate"]));
        }
        let _ = writeln!(out, "trainable parameters    {}", c["trainable_params"]);
    }
    Ok(out)
}
