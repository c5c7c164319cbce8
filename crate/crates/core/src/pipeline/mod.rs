//! The iterative loop (fit, flag, impute, refit), the single-pass
//! baselines, the downstream detection protocol and run-directory output.

mod config;
mod rundir;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{DataSource, PipelineConfig};
pub use rundir::{eval_scores_csv, run, write_json, write_scores_csv, RunSummary};

use crate::detect::{score_range, sections, smooth, threshold_from_scores, Flagging};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::impute::{flow_impute, interpolate, Change, ImputeResult, InterpKind, Method};
use crate::metrics::{default_starts, evaluate, MetricReport};
use crate::select::{model_select, CandidateReport, HyperParams, Objective, SelectConfig, Selection, SelectionData};
use crate::series::{validation_split, IndexRange, MultiSeries, Normalizer, SplitSpec, ValidationSplit};
use crate::par::Exec;
use crate::train::{fingerprint, fit};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Fixed per-dataset quantities shared by every fit.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub normalizer: Normalizer,
    pub validation: ValidationSplit,
    pub eval: IndexRange,
    pub recon_starts: Vec<usize>,
}

/// Largest window length any fit in this configuration can use.
fn max_window(config: &PipelineConfig, select: &SelectConfig) -> usize {
    config.hyperparams.as_ref().map_or(select.space.window.1, |h| h.window)
}

/// Normalizer from the train range, validation blocks and reconstruction
/// starts (fixed for every candidate and iteration).
pub fn prepare(series: &MultiSeries, split: &SplitSpec, config: &PipelineConfig, select: &SelectConfig) -> Result<Prepared> {
    let eval = split
        .eval
        .ok_or_else(|| Error::invalid("model selection needs an eval range"))?;
    let k_max = max_window(config, select);
    let normalizer = Normalizer::fit(series, &[split.train])?;
    let validation = validation_blocks(split, config, k_max)?;
    let recon_starts = default_starts(series.labels(), eval, k_max, config.recon_steps, config.recon_starts)?;
    Ok(Prepared {
        normalizer,
        validation,
        eval,
        recon_starts,
    })
}

fn validation_blocks(split: &SplitSpec, config: &PipelineConfig, k_max: usize) -> Result<ValidationSplit> {
    match &split.validation {
        Some(blocks) => ValidationSplit::from_blocks(split.train, blocks.clone()),
        None => validation_split(
            split.train,
            config.validation_fraction,
            config.validation_sections,
            config.seed,
            k_max + 1,
        ),
    }
}

/// Selection inputs in the units of `prep.normalizer`.
pub fn selection_data(series: &MultiSeries, prep: &Prepared, exclude: Vec<bool>, max_buffer: usize, recon_steps: usize) -> SelectionData {
    let n = series.len();
    SelectionData {
        values: prep.normalizer.apply(series.values()),
        labels: series.labels().to_vec(),
        train_steps: (0..n).map(|t| prep.validation.is_train(t)).collect(),
        validation_steps: (0..n).map(|t| prep.validation.is_validation(t)).collect(),
        exclude,
        eval: prep.eval,
        recon_starts: prep.recon_starts.clone(),
        recon_steps,
        max_buffer,
    }
}

/// Labels restricted to `range`.
pub fn mask_in(labels: &[bool], range: IndexRange) -> Vec<bool> {
    labels.iter().enumerate().map(|(t, &l)| l && range.contains(t)).collect()
}

fn symmetric_difference(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Flow imputation of `mask`; sections starting before the window length
/// are filled by linear interpolation (constant extension at the series
/// edges) instead. Returns those sections as well.
pub fn impute_with_fallback(
    model: &FlowModel,
    series: &MultiSeries,
    mask: &[bool],
    normalizer: &Normalizer,
) -> Result<(ImputeResult, Vec<IndexRange>)> {
    let k = model.window();
    let early: Vec<IndexRange> = sections(mask).into_iter().filter(|s| s.start < k).collect();
    let mut base = series.clone();
    let mut changes = Vec::new();
    for s in &early {
        log::warn!("section {s} starts within the first {k} steps; filling it by linear interpolation");
        let mut fill = base.clone();
        for t in s.iter() {
            let row: Vec<f64> = (0..series.dim())
                .map(|c| edge_linear(series, *s, t, c))
                .collect();
            fill.set_row(t, &row);
        }
        let rows: Vec<usize> = s.iter().collect();
        changes.push(Change {
            start: s.start,
            length: s.len(),
            old: series.values().select_rows(&rows),
            new: fill.values().select_rows(&rows),
        });
        base = fill;
    }
    let rest: Vec<bool> = (0..mask.len())
        .map(|t| mask[t] && !early.iter().any(|s| s.contains(t)))
        .collect();
    let mut result = flow_impute(model, &base, &rest, normalizer)?;
    changes.extend(result.changed);
    result.changed = changes;
    Ok((result, early))
}

/// Linear between the anchors flanking `section`, constant when one side is
/// missing.
fn edge_linear(series: &MultiSeries, section: IndexRange, t: usize, c: usize) -> f64 {
    let left = section.start.checked_sub(1).map(|a| (a, series.row(a)[c]));
    let right = (section.end < series.len()).then(|| (section.end, series.row(section.end)[c]));
    match (left, right) {
        (Some((a, va)), Some((b, vb))) => va + (vb - va) * (t - a) as f64 / (b - a) as f64,
        (Some((_, v)), None) | (None, Some((_, v))) => v,
        (None, None) => series.row(t)[c],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub tau: f64,
    /// Steps flagged by detection in this iteration.
    pub flagged: usize,
    pub flagged_sections: Vec<IndexRange>,
    /// Steps replaced (detected plus labelled when those are imputed too).
    pub imputed: usize,
    /// Flag changes against the previous iteration (no flags before the first).
    pub symmetric_difference: usize,
    pub changed: Vec<Change>,
    pub fallback_sections: Vec<IndexRange>,
    pub checkpoint_id: String,
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct CindiOutput {
    pub improved: MultiSeries,
    pub records: Vec<IterationRecord>,
    pub model: FlowModel,
    pub normalizer: Normalizer,
    pub hyperparams: HyperParams,
    pub selection: Vec<CandidateReport>,
    pub flagging: Vec<Flagging>,
    pub converged: bool,
}

fn select_up_front(series: &MultiSeries, prep: &Prepared, exclude: Vec<bool>, config: &PipelineConfig) -> Result<Selection> {
    let data = selection_data(series, prep, exclude, config.max_buffer, config.recon_steps);
    let mut sel_cfg = config.selection.clone();
    sel_cfg.encoder = config.encoder;
    model_select(&data, Objective::of_kind(config.objective, series.dim()), &sel_cfg)
}

/// The search that opens [`run_cindi`], on its own. Returns the selection
/// and the normalizer its models expect.
pub fn model_select_for(series: &MultiSeries, split: &SplitSpec, config: &PipelineConfig) -> Result<(Selection, Normalizer)> {
    config.validate()?;
    let prep = prepare(series, split, config, &config.selection)?;
    let exclude = if config.skip_first_fit { mask_in(series.labels(), split.train) } else { vec![false; series.len()] };
    let sel = select_up_front(series, &prep, exclude, config)?;
    Ok((sel, prep.normalizer))
}

/// The iterative loop on the training range of `series`.
///
/// The first fit skips windows touching labelled steps (when configured).
/// Each iteration flags training steps whose smoothed NLL exceeds `tau`
/// (from label-0 training steps), replaces them (and labelled steps, when
/// configured) by the flow's chain, and marks them labelled. The loop stops
/// when consecutive flag masks differ in fewer than `epsilon·T` steps or
/// after `max_iterations`.
pub fn run_cindi(series: &MultiSeries, split: &SplitSpec, config: &PipelineConfig) -> Result<CindiOutput> {
    config.validate()?;
    let prep = prepare(series, split, config, &config.selection)?;
    let n = series.len();
    let train = split.train;
    let objective = Objective::of_kind(config.objective, series.dim());
    let first_exclude = if config.skip_first_fit { mask_in(series.labels(), train) } else { vec![false; n] };

    let mut selection_reports = Vec::new();
    let (hyperparams, mut preselected) = match &config.hyperparams {
        Some(h) => (HyperParams { encoder: config.encoder, ..h.clone() }, None),
        None => {
            let sel = select_up_front(series, &prep, first_exclude.clone(), config)?;
            selection_reports = sel.reports;
            (sel.best_report.hyperparams.clone(), Some((sel.best, sel.best_report.best_epoch)))
        }
    };

    let mut current = series.clone();
    let mut prev_flags = vec![false; n];
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut flaggings = Vec::new();
    let mut last_model: Option<FlowModel> = None;
    let mut converged = false;

    for iteration in 1..=config.max_iterations {
        let exclude = if iteration == 1 { first_exclude.clone() } else { vec![false; n] };
        let step = (|| -> Result<(FlowModel, Option<usize>)> {
            if let Some(m) = preselected.take() {
                return Ok(m);
            }
            let data = selection_data(&current, &prep, exclude.clone(), config.max_buffer, config.recon_steps);
            if config.reselect_each_iteration && config.hyperparams.is_none() {
                let mut sel_cfg = config.selection.clone();
                sel_cfg.encoder = config.encoder;
                sel_cfg.cmaes.seed = sel_cfg.cmaes.seed.wrapping_add(iteration as u64);
                let sel = model_select(&data, objective, &sel_cfg)?;
                return Ok((sel.best, sel.best_report.best_epoch));
            }
            let (tw, vw) = data.windows(hyperparams.window)?;
            let seed = config.seed ^ 0x5bd1_e995;
            let model = FlowModel::new(hyperparams.flow_config(series.dim()), seed)?;
            let (model, report) = fit(model, &tw, &vw, &hyperparams.train_config(&config.selection.train, seed))?;
            Ok((model, Some(report.best_epoch)))
        })();
        let (model, best_epoch) = match step {
            Ok(m) => m,
            Err(e) if iteration > 1 => {
                log::error!("iteration {iteration} failed: {e}; keeping iteration {}", iteration - 1);
                records.push(failed_record(iteration, &e));
                break;
            }
            Err(e) => return Err(e),
        };

        let outcome = (|| -> Result<(Flagging, Vec<bool>, ImputeResult, Vec<IndexRange>)> {
            let (flagging, flags) =
                flag_range(&model, &current, &prep.normalizer, train, config.smoothing, config.selection.train.exec)?;
            let to_impute: Vec<bool> = (0..n)
                .map(|t| flags[t] || (config.impute_labels && train.contains(t) && current.labels()[t]))
                .collect();
            let (result, fallback) = impute_with_fallback(&model, &current, &to_impute, &prep.normalizer)?;
            Ok((flagging, flags, result, fallback))
        })();
        let (flagging, flags, result, fallback) = match outcome {
            Ok(o) => o,
            Err(e) if iteration > 1 => {
                log::error!("iteration {iteration} failed: {e}; keeping iteration {}", iteration - 1);
                records.push(failed_record(iteration, &e));
                break;
            }
            Err(e) => return Err(e),
        };

        let diff = symmetric_difference(&flags, &prev_flags);
        let imputed = result.changed.iter().map(|c| c.length).sum();
        let mut labels = result.series.labels().to_vec();
        for c in &result.changed {
            for t in c.range().iter() {
                labels[t] = true;
            }
        }
        let next = result.series.with_labels(labels)?;
        let mut record = IterationRecord {
            iteration,
            tau: flagging.tau,
            flagged: flagging.flagged(),
            flagged_sections: flagging.sections(),
            imputed,
            symmetric_difference: diff,
            changed: result.changed,
            fallback_sections: fallback,
            checkpoint_id: fingerprint(model.params().values()),
            best_epoch,
            downstream: None,
            error: None,
        };
        if config.downstream_each_iteration && split.test.is_some() {
            record.downstream = Some(run_downstream(&next, &vec![false; n], split, config)?.report);
        }
        log::info!(
            "iteration {iteration}: tau {:.4}, {} flagged, {} replaced, {diff} flag changes",
            record.tau,
            record.flagged,
            record.imputed
        );
        records.push(record);
        flaggings.push(flagging);
        current = next;
        last_model = Some(model);
        prev_flags = flags;
        if (diff as f64) < config.convergence_epsilon * n as f64 {
            converged = true;
            break;
        }
    }
    Ok(CindiOutput {
        improved: current,
        records,
        model: last_model.expect("first iteration succeeded"),
        normalizer: prep.normalizer,
        hyperparams,
        selection: selection_reports,
        flagging: flaggings,
        converged,
    })
}

/// Scores `range`, takes `tau` from its unlabelled steps and flags it.
/// Returns the flagging and the flag mask over the whole series.
pub fn flag_range(
    model: &FlowModel,
    series: &MultiSeries,
    normalizer: &Normalizer,
    range: IndexRange,
    smoothing: usize,
    exec: Exec,
) -> Result<(Flagging, Vec<bool>)> {
    let values = normalizer.apply(series.values());
    let scores = score_range(model, &values, range, exec)?;
    let clean: Vec<f64> = range
        .iter()
        .filter(|&t| !series.labels()[t])
        .map(|t| scores[t - range.start])
        .collect();
    let tau = threshold_from_scores(&clean)?;
    let flagging = Flagging::new(scores, tau, smoothing).with_offset(range.start);
    let mut flags = vec![false; series.len()];
    for (i, &m) in flagging.mask.iter().enumerate() {
        flags[range.start + i] = m;
    }
    Ok((flagging, flags))
}

fn failed_record(iteration: usize, e: &Error) -> IterationRecord {
    IterationRecord {
        iteration,
        tau: f64::NAN,
        flagged: 0,
        flagged_sections: Vec::new(),
        imputed: 0,
        symmetric_difference: 0,
        changed: Vec::new(),
        fallback_sections: Vec::new(),
        checkpoint_id: String::new(),
        best_epoch: None,
        downstream: None,
        error: Some(e.to_string()),
    }
}

/// Training data prepared by a single-pass method.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub series: MultiSeries,
    /// Steps whose windows are left out of training (`skip` only).
    pub exclude: Vec<bool>,
    pub changed: Vec<Change>,
}

/// One pass of `method` over the labelled training steps.
pub fn run_baseline(series: &MultiSeries, split: &SplitSpec, method: Method) -> Result<BaselineOutput> {
    let n = series.len();
    let mask = mask_in(series.labels(), split.train);
    let none = vec![false; n];
    Ok(match method {
        Method::Cindi => return Err(Error::invalid("cindi is iterative; use run_cindi")),
        Method::Raw => BaselineOutput {
            series: crate::impute::raw(series),
            exclude: none,
            changed: Vec::new(),
        },
        Method::Skip => BaselineOutput {
            series: series.clone(),
            exclude: mask,
            changed: Vec::new(),
        },
        m => {
            let kind: InterpKind = m.interp_kind().expect("interpolating method");
            let r = interpolate(series, &mask, kind)?;
            BaselineOutput {
                series: r.series,
                exclude: none,
                changed: r.changed,
            }
        }
    })
}

pub struct DownstreamOutput {
    pub report: MetricReport,
    pub test: IndexRange,
    pub test_scores: Vec<f64>,
    pub model: FlowModel,
    pub normalizer: Normalizer,
    pub candidates: Vec<CandidateReport>,
}

/// Selects a detector on the (improved) training range with the
/// reconstruction-free objective, then scores the test range. Test scores are
/// the detector's segment scores (NLL averaged over `smoothing` steps), the
/// same statistic its flag rule compares with tau.
pub fn run_downstream(series: &MultiSeries, exclude: &[bool], split: &SplitSpec, config: &PipelineConfig) -> Result<DownstreamOutput> {
    let test = split
        .test
        .ok_or_else(|| Error::invalid("downstream evaluation needs a test range"))?;
    let mut sel_cfg = config.downstream.clone();
    sel_cfg.encoder = config.encoder;
    let mut cfg = config.clone();
    cfg.hyperparams = None;
    let prep = prepare_downstream(series, split, &cfg, &sel_cfg)?;
    let data = selection_data(series, &prep, exclude.to_vec(), config.max_buffer, 0);
    let objective = Objective::of_kind(config.objective, series.dim()).without_recon();
    let sel = model_select(&data, objective, &sel_cfg)?;
    let scores = smooth(&score_range(&sel.best, &data.values, test, sel_cfg.train.exec)?, config.smoothing);
    let report = evaluate(&scores, &series.labels()[test.start..test.end], config.max_buffer)?;
    Ok(DownstreamOutput {
        report,
        test,
        test_scores: scores,
        model: sel.best,
        normalizer: prep.normalizer,
        candidates: sel.reports,
    })
}

/// As [`prepare`], without reconstruction starts.
fn prepare_downstream(series: &MultiSeries, split: &SplitSpec, config: &PipelineConfig, select: &SelectConfig) -> Result<Prepared> {
    let eval = split
        .eval
        .ok_or_else(|| Error::invalid("model selection needs an eval range"))?;
    let validation = validation_blocks(split, config, max_window(config, select))?;
    Ok(Prepared {
        normalizer: Normalizer::fit(series, &[split.train])?,
        validation,
        eval,
        recon_starts: Vec::new(),
    })
}
