//! Text report over one run directory or a directory of runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use crate::summary::{Summary, REPORT_FILE, SUMMARY_FILE};

/// Run directories under `dir`: `dir` itself if it holds a summary, else its
/// immediate subdirectories that do, sorted by name.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    ensure!(dir.is_dir(), "{} is not a directory", dir.display());
    if dir.join(SUMMARY_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.join(SUMMARY_FILE).is_file() {
            runs.push(path);
        }
    }
    runs.sort();
    if runs.is_empty() {
        bail!("no run outputs ({SUMMARY_FILE}) found in {}", dir.display());
    }
    Ok(runs)
}

/// Parse a run's summary and check its results file against it.
pub fn load_run(run: &Path) -> Result<Summary> {
    let path = run.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary: Summary = serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
    let results = run.join(&summary.results_file);
    let data = fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
    let mut lines = data.lines();
    let header = lines.next().with_context(|| format!("{} is empty", results.display()))?;
    ensure!(header == summary.columns.join(","), "{}: header does not match the summary's columns", results.display());
    let rows = lines.filter(|l| !l.is_empty()).count();
    ensure!(rows == summary.rows, "{}: {rows} rows, summary records {}", results.display(), summary.rows);
    Ok(summary)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let dashes: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", line(dashes.iter().map(String::as_str).collect()));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}

pub fn render(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== {} ({}) ==", summary.name, summary.kind);
    let _ = writeln!(
        out,
        "manifest {}  master seed {}  rows {} in {}",
        summary.manifest_hash, summary.master_seed, summary.rows, summary.results_file
    );
    if !summary.fits.is_empty() {
        let rows: Vec<Vec<String>> = summary
            .fits
            .iter()
            .map(|f| {
                vec![
                    f.experiment.clone(),
                    format!("{:.4}", f.slope),
                    opt(f.predicted, 4),
                    opt(f.tolerance, 2),
                    format!("{:.4}", f.r2),
                    f.n_points.to_string(),
                    f.status.tag().into(),
                ]
            })
            .collect();
        out.push('\n');
        table(&mut out, &["experiment", "fitted", "predicted", "tol", "R^2", "points", "status"], &rows);
        for f in summary.fits.iter().filter(|f| !f.note.is_empty()) {
            let _ = writeln!(out, "  {}: {}", f.experiment, f.note);
        }
    }
    if !summary.checks.is_empty() {
        out.push('\n');
        for c in &summary.checks {
            let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    for n in &summary.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

/// Render every run under `dir` and write the text to `dir/report.txt`.
pub fn emit_report(dir: &Path) -> Result<String> {
    let mut text = String::new();
    for (i, run) in find_runs(dir)?.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&render(&load_run(run)?));
    }
    let path = dir.join(REPORT_FILE);
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(text)
}
