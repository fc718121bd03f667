//! Side-by-side comparison of finished runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{load_summary, RunSummary};
use crate::error::{FedHelpError, Result};

/// Relative improvement `(a − b) / b` in percent.
pub fn percent_improvement(a: f64, b: f64) -> f64 {
    (a - b) / b * 100.0
}

fn label(dir: &Path, s: &RunSummary) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    format!("{name}:{}", s.mode)
}

/// CSV with one row per client plus `Client Average`, one accuracy column
/// per run, and `% imp.` columns of the first run over each other run.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    if dirs.len() < 2 {
        return Err(FedHelpError::InvalidArgument("compare needs at least two run directories".into()));
    }
    let runs: Vec<RunSummary> = dirs.iter().map(|d| load_summary(d)).collect::<Result<_>>()?;
    let plan = |s: &RunSummary| -> Vec<(usize, usize)> {
        s.clients.iter().map(|c| (c.client_id, c.train_size)).collect()
    };
    let reference = plan(&runs[0]);
    if let Some(i) = runs.iter().position(|r| plan(r) != reference) {
        return Err(FedHelpError::InvalidArgument(format!(
            "client plan of {} differs from {}",
            dirs[i].display(),
            dirs[0].display()
        )));
    }
    let labels: Vec<String> = dirs.iter().zip(&runs).map(|(d, s)| label(d, s)).collect();
    let mut out = String::from("client");
    for l in &labels {
        let _ = write!(out, ",{l}");
    }
    for l in &labels[1..] {
        let _ = write!(out, ",imp_vs_{l}");
    }
    out.push('\n');

    let mut rows: Vec<(String, Vec<f64>)> = (0..reference.len())
        .map(|i| {
            (
                format!("client {}", runs[0].clients[i].client_id),
                runs.iter().map(|r| r.clients[i].accuracy).collect(),
            )
        })
        .collect();
    rows.push((
        "Client Average".into(),
        runs.iter().map(|r| r.client_average.accuracy).collect(),
    ));
    for (name, vals) in rows {
        out.push_str(&name);
        for v in &vals {
            let _ = write!(out, ",{v:.4}");
        }
        for v in &vals[1..] {
            let _ = write!(out, ",{:.2}%", percent_improvement(vals[0], *v));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_percent() {
        let p = percent_improvement(0.5091, 0.4439);
        assert_eq!(format!("{p:.2}"), "14.69");
        assert_eq!(percent_improvement(0.3, 0.3), 0.0);
    }

    #[test]
    fn missing_dir_is_explicit() {
        let e = compare(&["/nonexistent/a".into(), "/nonexistent/b".into()]).unwrap_err();
        assert!(matches!(e, FedHelpError::MissingRun(_)));
    }
}
