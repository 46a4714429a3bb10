//! Comparison table over simulation results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use minmpc_core::harness::{SimResult, Timings};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no result files given")]
    Empty,
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub controller: String,
    pub model: String,
    pub plant: String,
    pub steps: usize,
    pub max_step_s: f64,
    pub median_step_s: f64,
    pub final_error_inf: f64,
    pub violations: usize,
    pub infeasible_steps: usize,
    pub terminated: bool,
    /// Max step time of the `full` row for the same model over this row's.
    pub speedup_vs_full: Option<f64>,
}

/// `foo.result.json` pairs with `foo.timings.json`; any other name with `<stem>.timings.json`.
pub fn timings_path(result: &Path) -> PathBuf {
    let name = result.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name
        .strip_suffix(".result.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name);
    result.with_file_name(format!("{stem}.timings.json"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn max(v: &[f64]) -> f64 {
    v.iter().copied().reduce(f64::max).unwrap_or(f64::NAN)
}

fn row(result: &SimResult, timings: &Timings) -> ReportRow {
    ReportRow {
        controller: result.controller.clone(),
        model: result.model.clone(),
        plant: result.plant.clone(),
        steps: result.controls.len(),
        max_step_s: max(&timings.step_times),
        median_step_s: median(&timings.step_times),
        final_error_inf: result.metrics.final_deviation_inf,
        violations: result.violations.len(),
        infeasible_steps: result.metrics.infeasible_steps,
        terminated: result.terminated.is_some(),
        speedup_vs_full: None,
    }
}

pub fn build_rows(paths: &[PathBuf]) -> Result<Vec<ReportRow>, ReportError> {
    if paths.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut rows = Vec::new();
    for p in paths {
        let result: SimResult = read_json(p)?;
        let tp = timings_path(p);
        let timings: Timings = read_json(&tp)?;
        if timings.controller != result.controller {
            return Err(ReportError::Schema {
                path: tp,
                message: format!(
                    "timings belong to \"{}\", result to \"{}\"",
                    timings.controller, result.controller
                ),
            });
        }
        if timings.step_times.len() != result.controls.len() {
            return Err(ReportError::Schema {
                path: tp,
                message: format!(
                    "{} step times for {} controller calls",
                    timings.step_times.len(),
                    result.controls.len()
                ),
            });
        }
        rows.push(row(&result, &timings));
    }
    let full: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.controller == "full")
        .map(|r| (r.model.clone(), r.max_step_s))
        .collect();
    for r in &mut rows {
        r.speedup_vs_full = full
            .iter()
            .find(|(m, _)| *m == r.model)
            .map(|(_, t)| t / r.max_step_s)
            .filter(|s| s.is_finite());
    }
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn secs(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.3e}")
    }
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let header = [
        "controller",
        "model",
        "steps",
        "max t [s]",
        "median t [s]",
        "final err",
        "violations",
        "infeasible",
        "speedup",
    ];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.controller.clone() + if r.terminated { "*" } else { "" },
                r.model.clone(),
                r.steps.to_string(),
                secs(r.max_step_s),
                secs(r.median_step_s),
                format!("{:.4}", r.final_error_inf),
                r.violations.to_string(),
                r.infeasible_steps.to_string(),
                r.speedup_vs_full.map_or("-".into(), |s| format!("{s:.1}")),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..9)
        .map(|j| {
            body.iter()
                .map(|b| b[j].len())
                .chain([header[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &header);
    line(
        &mut s,
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    for b in &body {
        line(&mut s, &b.iter().map(String::as_str).collect::<Vec<_>>());
    }
    if rows.iter().any(|r| r.terminated) {
        s.push_str("* run ended early\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_max() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(max(&[0.1, 0.7, 0.3]), 0.7);
    }

    #[test]
    fn timings_sibling() {
        assert_eq!(
            timings_path(Path::new("a/full.result.json")),
            Path::new("a/full.timings.json")
        );
        assert_eq!(timings_path(Path::new("a/run.json")), Path::new("a/run.timings.json"));
    }

    #[test]
    fn table_has_one_line_per_row() {
        let r = ReportRow {
            controller: "myopic".into(),
            model: "satellite".into(),
            plant: "p".into(),
            steps: 3,
            max_step_s: 0.2,
            median_step_s: 0.1,
            final_error_inf: 0.01,
            violations: 0,
            infeasible_steps: 0,
            terminated: false,
            speedup_vs_full: Some(120.0),
        };
        let t = render_table(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("120.0"));
    }
}
