//! Run-directory layout:
//!
//! ```text
//! config.toml            resolved configuration (seeded)
//! input.csv, split.json  the series and split the run used
//! selection/             candidates.{csv,json} of the up-front search
//! iterations/NN/         checkpoint.json, flags.csv, changes.csv
//! records.json           iteration records
//! improved.csv           prepared training data
//! skip_manifest.json     excluded steps (skip only)
//! downstream/            checkpoint.json, candidates.{csv,json},
//!                        test_scores.csv, roc.csv, metrics.json
//! summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_baseline, run_cindi, run_downstream, write_atomic, IterationRecord, PipelineConfig};
use crate::detect::sections;
use crate::error::{Error, Result};
use crate::flow::save_checkpoint;
use crate::impute::{write_changes_csv, Method};
use crate::metrics::{evaluate, roc_points, write_roc_csv, MetricReport};
use crate::select::{write_reports_csv, CandidateReport};
use crate::series::{write_csv, MultiSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub iterations: usize,
    pub converged: bool,
    pub flagged_last: usize,
    pub downstream: Option<MetricReport>,
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_candidates(dir: &Path, reports: &[CandidateReport]) -> Result<()> {
    ensure_dir(dir)?;
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, reports)?;
    write_atomic(&dir.join("candidates.csv"), &buf)?;
    write_json(&dir.join("candidates.json"), &reports)
}

/// Columns `timestep, score, label`.
pub fn write_scores_csv(path: &Path, start: usize, scores: &[f64], labels: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["timestep", "score", "label"])?;
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        w.write_record([(start + i).to_string(), s.to_string(), u8::from(*l).to_string()])?;
    }
    let buf = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path, &buf)
}

/// Metrics from a `timestep, score, label` file.
pub fn eval_scores_csv(path: &Path, max_buffer: usize) -> Result<MetricReport> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: expected timestep,score,label", i + 2),
        };
        scores.push(rec.get(1).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad)?);
        labels.push(match rec.get(2) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad()),
        });
    }
    evaluate(&scores, &labels, max_buffer)
}

fn write_downstream(dir: &Path, series: &MultiSeries, out: &super::DownstreamOutput) -> Result<()> {
    ensure_dir(dir)?;
    save_checkpoint(dir.join("checkpoint.json"), &out.model, Some(&out.normalizer))?;
    write_candidates(dir, &out.candidates)?;
    let labels = &series.labels()[out.test.start..out.test.end];
    write_scores_csv(&dir.join("test_scores.csv"), out.test.start, &out.test_scores, labels)?;
    let mut buf = Vec::new();
    write_roc_csv(&mut buf, &roc_points(&out.test_scores, labels)?)?;
    write_atomic(&dir.join("roc.csv"), &buf)?;
    write_json(&dir.join("metrics.json"), &out.report)
}

/// Runs `config.method` end to end and writes the run directory `dir`.
pub fn run(config: &PipelineConfig, dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    ensure_dir(dir)?;
    write_atomic(&dir.join("config.toml"), config.to_toml()?.as_bytes())?;
    let (series, split) = config.dataset()?;
    write_csv(dir.join("input.csv"), &series)?;
    write_json(&dir.join("split.json"), &split)?;
    let n = series.len();

    let (prepared, exclude, records, converged): (MultiSeries, Vec<bool>, Vec<IterationRecord>, bool) =
        if config.method == Method::Cindi {
            let out = run_cindi(&series, &split, config)?;
            if !out.selection.is_empty() {
                write_candidates(&dir.join("selection"), &out.selection)?;
            }
            for (rec, flagging) in out.records.iter().zip(&out.flagging) {
                let it = iteration_dir(dir, rec.iteration);
                ensure_dir(&it)?;
                flagging.save_csv(&it.join("flags.csv"))?;
                let mut buf = Vec::new();
                write_changes_csv(&mut buf, rec.iteration, &rec.changed, series.channel_names())?;
                write_atomic(&it.join("changes.csv"), &buf)?;
            }
            if let Some(last) = out.records.iter().rev().find(|r| r.error.is_none()) {
                save_checkpoint(
                    iteration_dir(dir, last.iteration).join("checkpoint.json"),
                    &out.model,
                    Some(&out.normalizer),
                )?;
            }
            (out.improved, vec![false; n], out.records, out.converged)
        } else {
            let out = run_baseline(&series, &split, config.method)?;
            if config.method == Method::Skip {
                write_json(&dir.join("skip_manifest.json"), &sections(&out.exclude))?;
            }
            let mut buf = Vec::new();
            write_changes_csv(&mut buf, 0, &out.changed, series.channel_names())?;
            write_atomic(&dir.join("changes.csv"), &buf)?;
            (out.series, out.exclude, Vec::new(), true)
        };
    write_json(&dir.join("records.json"), &records)?;
    write_csv(dir.join("improved.csv"), &prepared)?;

    let downstream = if split.test.is_some() {
        let out = run_downstream(&prepared, &exclude, &split, config)?;
        write_downstream(&dir.join("downstream"), &prepared, &out)?;
        Some(out.report)
    } else {
        None
    };
    let summary = RunSummary {
        method: config.method,
        iterations: records.len(),
        converged,
        flagged_last: records.last().map_or(0, |r| r.flagged),
        downstream,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn iteration_dir(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("iterations").join(format!("{iteration:02}"))
}
