//! Run summaries: final and best top-1 per run, loss curves, learned policy,
//! KS rows, per-mode mean ± sample standard deviation and the paired
//! `sokd − baseline` delta per seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::dafa::DiscretePolicy;
use crate::error::{Error, Result};
use crate::trainer::{describe, read_metrics, KsRow, MetricRow};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub task_loss: Vec<Option<f32>>,
    pub ld_loss: Vec<Option<f32>>,
    pub lda_loss: Vec<Option<f32>>,
    pub aug_loss: Vec<Option<f32>>,
    pub test_top1: Vec<Option<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Directory relative to the report root (`.` for the root itself).
    pub run: String,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub epochs: usize,
    pub final_top1: Option<f32>,
    pub best_top1: Option<f32>,
    /// `sokd − baseline` final top-1 for the baseline run with the same seed.
    pub delta: Option<f64>,
    pub policy: Option<String>,
    pub ks: Vec<KsRow>,
    pub curves: Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: String,
    pub runs: usize,
    pub mean_final_top1: f64,
    /// Sample standard deviation; absent for a single run.
    pub std_final_top1: Option<f64>,
    pub mean_best_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub pairs: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub aggregates: Vec<Aggregate>,
    pub paired_delta: Option<PairedDelta>,
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n != "checkpoint") {
                find_metrics(&p, out)?;
            }
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn summarize(root: &Path, metrics_path: &Path) -> Result<RunSummary> {
    let dir = metrics_path.parent().unwrap_or(root);
    let rows: Vec<MetricRow> = read_metrics(metrics_path)?;
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let run = if rel.as_os_str().is_empty() { ".".to_string() } else { rel.display().to_string() };
    let cfg = RunConfig::load(dir.join("config.json")).ok();
    let mut curves = Curves::default();
    let mut test = Vec::new();
    for r in &rows {
        match r.split.as_str() {
            "train" => {
                curves.task_loss.push(r.task_loss);
                curves.ld_loss.push(r.ld_loss);
                curves.lda_loss.push(r.lda_loss);
                curves.aug_loss.push(r.aug_loss);
            }
            "test" => {
                curves.test_top1.push(r.top1);
                if let Some(a) = r.top1 {
                    test.push(a);
                }
            }
            _ => {}
        }
    }
    let policy = fs::read_to_string(dir.join("policy_discrete.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<DiscretePolicy>(&s).ok())
        .map(|d| format!("#{} {}", d.index, describe(&d.subpolicy)));
    let ks = match csv::Reader::from_path(dir.join("ks.csv")) {
        Ok(mut r) => r.deserialize().collect::<std::result::Result<Vec<KsRow>, _>>()?,
        Err(_) => Vec::new(),
    };
    Ok(RunSummary {
        run,
        mode: cfg.as_ref().map(|c| c.mode),
        seed: cfg.as_ref().map(|c| c.seed),
        epochs: rows.iter().map(|r| r.epoch).max().unwrap_or(0),
        final_top1: test.last().copied(),
        best_top1: test.iter().copied().reduce(f32::max),
        delta: None,
        policy,
        ks,
        curves,
    })
}

fn mode_name(m: Option<Mode>) -> &'static str {
    match m {
        Some(Mode::Baseline) => "baseline",
        Some(Mode::Sokd) => "sokd",
        None => "unknown",
    }
}

/// Summarizes every run directory (any directory holding `metrics.csv`) under `root`.
pub fn build_report(root: impl AsRef<Path>) -> Result<Report> {
    let root = root.as_ref();
    let mut found = Vec::new();
    if root.is_dir() {
        find_metrics(root, &mut found)?;
    }
    if found.is_empty() {
        return Err(Error::MissingMetrics(root.join("metrics.csv")));
    }
    let mut runs = found.iter().map(|p| summarize(root, p)).collect::<Result<Vec<_>>>()?;

    let baseline: BTreeMap<u64, f32> = runs
        .iter()
        .filter(|r| r.mode == Some(Mode::Baseline))
        .filter_map(|r| Some((r.seed?, r.final_top1?)))
        .collect();
    let mut deltas = Vec::new();
    for r in runs.iter_mut().filter(|r| r.mode == Some(Mode::Sokd)) {
        if let (Some(seed), Some(acc)) = (r.seed, r.final_top1) {
            if let Some(&b) = baseline.get(&seed) {
                let d = acc as f64 - b as f64;
                r.delta = Some(d);
                deltas.push(d);
            }
        }
    }

    let mut groups: BTreeMap<&'static str, Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        if r.final_top1.is_some() {
            groups.entry(mode_name(r.mode)).or_default().push(r);
        }
    }
    let aggregates = groups
        .into_iter()
        .map(|(mode, rs)| {
            let fin: Vec<f64> = rs.iter().filter_map(|r| r.final_top1).map(f64::from).collect();
            let best: Vec<f64> = rs.iter().filter_map(|r| r.best_top1).map(f64::from).collect();
            let (mean, std) = mean_std(&fin);
            Aggregate {
                mode: mode.to_string(),
                runs: rs.len(),
                mean_final_top1: mean,
                std_final_top1: std,
                mean_best_top1: mean_std(&best).0,
            }
        })
        .collect();
    let paired_delta = (!deltas.is_empty()).then(|| {
        let (mean, std) = mean_std(&deltas);
        PairedDelta {
            pairs: deltas.len(),
            mean,
            std,
        }
    });
    Ok(Report {
        runs,
        aggregates,
        paired_delta,
    })
}

fn opt(v: Option<impl std::fmt::Display>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    /// Table with one row per run, one aggregate row per mode, and the delta column.
    pub fn table(&self) -> String {
        let mut s = String::from("run,mode,seed,final_top1,best_top1,delta\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.run,
                mode_name(r.mode),
                opt(r.seed),
                opt(r.final_top1.map(|v| format!("{v:.4}"))),
                opt(r.best_top1.map(|v| format!("{v:.4}"))),
                opt(r.delta.map(|v| format!("{v:+.4}")))
            );
        }
        for a in &self.aggregates {
            let delta = if a.mode == "sokd" {
                opt(self.paired_delta.as_ref().map(|d| format!("{:+.4}", d.mean)))
            } else {
                String::new()
            };
            let _ = writeln!(
                s,
                "mean({}),{},n={},{:.4}±{},{:.4},{}",
                a.mode,
                a.mode,
                a.runs,
                a.mean_final_top1,
                opt(a.std_final_top1.map(|v| format!("{v:.4}"))),
                a.mean_best_top1,
                delta
            );
        }
        s
    }
}

/// Builds the report and writes `report.json` and `report.csv` into `root`.
pub fn write_report(root: impl AsRef<Path>) -> Result<Report> {
    let root = root.as_ref();
    let rep = build_report(root)?;
    let json = root.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&rep)?).map_err(|e| Error::io(&json, e))?;
    let csv = root.join("report.csv");
    fs::write(&csv, rep.table()).map_err(|e| Error::io(&csv, e))?;
    Ok(rep)
}
