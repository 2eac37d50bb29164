use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use kitt_core::train::read_metric_log;
use serde_json::{json, Value};

use super::start;
use crate::run::RunDir;
use crate::settings::{parse_list, Settings};
use crate::Global;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to summarise.
    pub runs: Vec<String>,
}

/// Two-column series written so far: (file, x label, y label).
struct Series<'a> {
    dir: &'a RunDir,
    written: Vec<Value>,
}

impl Series<'_> {
    fn write(&mut self, name: &str, x: &str, y: &str, points: &[(String, f64)]) -> Result<()> {
        if points.is_empty() {
            return Ok(());
        }
        let rows: Vec<Vec<String>> = points.iter().map(|(a, b)| vec![a.clone(), b.to_string()]).collect();
        let file = format!("plot/{name}.tsv");
        self.dir.write_tsv(&file, &[x, y], &rows)?;
        self.written.push(json!({ "file": file, "x": x, "y": y, "points": points.len() }));
        Ok(())
    }
}

fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().unwrap_or_default().split('\t').map(str::to_string).collect();
    Ok((header, lines.map(|l| l.split('\t').map(str::to_string).collect()).collect()))
}

fn column(header: &[String], name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

fn summarise(run: &Path, out: &mut Series) -> Result<Value> {
    let tag = run.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    let mut found = Vec::new();

    let metrics = run.join("metrics.tsv");
    if metrics.exists() {
        let rows = read_metric_log(&metrics)?;
        let pts = |f: &dyn Fn(&kitt_core::train::MetricRow) -> Option<f64>| -> Vec<(String, f64)> {
            rows.iter().filter_map(|r| f(r).map(|v| (r.step.to_string(), v))).collect()
        };
        out.write(&format!("{tag}.loss"), "step", "loss", &pts(&|r| Some(r.loss)))?;
        out.write(&format!("{tag}.eval_loss"), "step", "eval_loss", &pts(&|r| r.eval_loss))?;
        out.write(&format!("{tag}.eval_acc"), "step", "eval_acc", &pts(&|r| r.eval_acc))?;
        found.push("training curves");
    }

    let accuracy = run.join("accuracy.tsv");
    if accuracy.exists() {
        let (h, rows) = read_tsv(&accuracy)?;
        let (n, top1, top3) = (column(&h, "n"), column(&h, "top1"), column(&h, "top3"));
        if let (Some(n), Some(t1), Some(t3)) = (n, top1, top3) {
            let pick = |c: usize| -> Vec<(String, f64)> { rows.iter().map(|r| (r[n].clone(), r[c].parse().unwrap_or(f64::NAN))).collect() };
            out.write(&format!("{tag}.top1_vs_n"), "n", "top1", &pick(t1))?;
            out.write(&format!("{tag}.top3_vs_n"), "n", "top3", &pick(t3))?;
            found.push("accuracy vs N");
        }
    }

    let timing = run.join("timing.tsv");
    if timing.exists() {
        let (h, rows) = read_tsv(&timing)?;
        if let (Some(n), Some(d), Some(c), Some(s)) = (column(&h, "n"), column(&h, "d"), column(&h, "caption_s"), column(&h, "search_s")) {
            let pick = |col: usize| -> Vec<(String, f64)> {
                rows.iter().map(|r| (format!("{}x{}", r[n], r[d]), r[col].parse().unwrap_or(f64::NAN))).collect()
            };
            out.write(&format!("{tag}.caption_time"), "n_x_d", "seconds", &pick(c))?;
            out.write(&format!("{tag}.search_time"), "n_x_d", "seconds", &pick(s))?;
            found.push("timing vs size");
        } else if let (Some(st), Some(w)) = (column(&h, "step"), column(&h, "wallclock_s")) {
            let pts: Vec<(String, f64)> = rows.iter().map(|r| (r[st].clone(), r[w].parse().unwrap_or(f64::NAN))).collect();
            out.write(&format!("{tag}.wallclock"), "step", "seconds", &pts)?;
            found.push("wallclock");
        }
    }

    let candidates = run.join("candidates.tsv");
    if candidates.exists() {
        let (h, rows) = read_tsv(&candidates)?;
        if let (Some(k), Some(nl), Some(w)) = (column(&h, "kernel"), column(&h, "nlpd"), column(&h, "weight")) {
            let pick = |c: usize| -> Vec<(String, f64)> { rows.iter().map(|r| (r[k].clone(), r[c].parse().unwrap_or(f64::NAN))).collect() };
            out.write(&format!("{tag}.candidate_nlpd"), "kernel", "nlpd", &pick(nl))?;
            out.write(&format!("{tag}.candidate_weight"), "kernel", "weight", &pick(w))?;
            found.push("candidate NLPD bars");
        }
    }

    let trace = run.join("trace.tsv");
    if trace.exists() {
        let (h, rows) = read_tsv(&trace)?;
        if let (Some(k), Some(b)) = (column(&h, "kernel"), column(&h, "bic")) {
            let pts: Vec<(String, f64)> = rows.iter().map(|r| (r[k].clone(), r[b].parse().unwrap_or(f64::NAN))).collect();
            out.write(&format!("{tag}.search_bic"), "kernel", "bic", &pts)?;
            found.push("search trace");
        }
    }

    let report = run.join("report.json");
    let summary: Value = if report.exists() {
        serde_json::from_str(&fs::read_to_string(&report)?).with_context(|| format!("parsing {}", report.display()))?
    } else {
        Value::Null
    };
    if found.is_empty() && summary.is_null() {
        bail!("{} holds nothing to report", run.display());
    }
    Ok(json!({ "run": run.display().to_string(), "series": found, "report": summary }))
}

pub fn report(g: &Global, a: &ReportArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let joined = (!a.runs.is_empty()).then(|| a.runs.join(","));
    let runs: Vec<String> = parse_list("runs", &s.required::<String>("runs", joined)?)?;
    let dir = start("report", g, s)?;
    let mut series = Series { dir: &dir, written: Vec::new() };
    let mut summaries = Vec::new();
    for r in &runs {
        summaries.push(summarise(Path::new(r), &mut series)?);
    }
    let written = std::mem::take(&mut series.written);
    log::info!("wrote {} series from {} runs", written.len(), runs.len());
    dir.write_json("report.json", &json!({ "runs": summaries, "series": written }))?;
    Ok(dir.path)
}
