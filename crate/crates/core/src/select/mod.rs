//! Hyperparameter search: CMA-ES over a unit box decoded into flow and
//! training settings, ranking candidates by a labelled objective (`phi`) or
//! a likelihood-based one (`psi`).

mod cmaes;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cmaes::{cmaes_minimize, cmaes_minimize_batch, CmaesOptions, CmaesResult, Evaluation};

use crate::detect::score_range;
use crate::error::{Error, Result};
use crate::flow::{EncoderKind, FlowConfig, FlowModel};
use crate::metrics::{auc_roc, reconstruction_delta, vus_roc};
use crate::ndcore::Matrix;
use crate::par::Exec;
use crate::series::{IndexRange, WindowedSeries};
use crate::train::{fingerprint, fit, mean_nll, TrainConfig};

/// Inclusive ranges of the searched hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub window: (usize, usize),
    pub n_layers: (usize, usize),
    pub hidden: (usize, usize),
    pub embed_dim: (usize, usize),
    /// Searched on a log scale.
    pub learning_rate: (f64, f64),
    pub batch_size: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            window: (8, 96),
            n_layers: (2, 8),
            hidden: (16, 128),
            embed_dim: (8, 64),
            learning_rate: (1e-4, 1e-2),
            batch_size: (32, 256),
        }
    }
}

impl SearchSpace {
    /// Coordinates per candidate.
    pub const DIM: usize = 6;

    pub fn validate(&self) -> Result<()> {
        let ints = [self.window, self.n_layers, self.hidden, self.embed_dim, self.batch_size];
        if ints.iter().any(|(lo, hi)| lo > hi || *lo == 0) || self.n_layers.0 < 1 {
            return Err(Error::invalid("search ranges must be nonempty and positive"));
        }
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("learning-rate range must be positive and ordered"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); Self::DIM]
    }

    /// Maps `u ∈ [0,1]^6` to hyperparameters; integers round to nearest.
    pub fn decode(&self, u: &[f64], encoder: EncoderKind) -> HyperParams {
        let int = |(lo, hi): (usize, usize), v: f64| {
            (lo as f64 + v.clamp(0.0, 1.0) * (hi - lo) as f64).round() as usize
        };
        let (llo, lhi) = (self.learning_rate.0.ln(), self.learning_rate.1.ln());
        HyperParams {
            window: int(self.window, u[0]),
            n_layers: int(self.n_layers, u[1]),
            hidden: int(self.hidden, u[2]),
            embed_dim: int(self.embed_dim, u[3]),
            encoder,
            learning_rate: (llo + u[4].clamp(0.0, 1.0) * (lhi - llo)).exp(),
            batch_size: int(self.batch_size, u[5]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub window: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl HyperParams {
    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        let mut cfg = FlowConfig::new(dim, self.window, self.n_layers, self.encoder);
        cfg.hidden = self.hidden;
        cfg.embed_dim = self.embed_dim;
        cfg
    }

    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Phi,
    Psi,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Phi => "phi",
            ObjectiveKind::Psi => "psi",
        })
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(ObjectiveKind::Phi),
            "psi" => Ok(ObjectiveKind::Psi),
            _ => Err(Error::invalid(format!("unknown objective `{s}`"))),
        }
    }
}

/// Objective with its weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    /// Weight of the validation NLL in `psi`.
    pub lambda: f64,
    /// Weight of the evaluation NLL in `psi`.
    pub beta: f64,
    /// Whether the reconstruction error is added.
    pub recon_term: bool,
}

impl Objective {
    pub fn phi() -> Self {
        Objective {
            kind: ObjectiveKind::Phi,
            lambda: 0.0,
            beta: 0.0,
            recon_term: true,
        }
    }

    /// `λ = 0.1`, `β = 0.5`, both scaled by `10 / D` above 10 channels.
    pub fn psi(dim: usize) -> Self {
        let scale = if dim > 10 { 10.0 / dim as f64 } else { 1.0 };
        Objective {
            kind: ObjectiveKind::Psi,
            lambda: 0.1 * scale,
            beta: 0.5 * scale,
            recon_term: true,
        }
    }

    pub fn of_kind(kind: ObjectiveKind, dim: usize) -> Self {
        match kind {
            ObjectiveKind::Phi => Self::phi(),
            ObjectiveKind::Psi => Self::psi(dim),
        }
    }

    pub fn without_recon(self) -> Self {
        Objective {
            recon_term: false,
            ..self
        }
    }

    /// The objective value from its components. Missing required
    /// components yield an error.
    pub fn compose(&self, c: &Components) -> Result<f64> {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::invalid(format!("missing component {name}")));
        let recon = if self.recon_term { need(c.reconstruction, "reconstruction")? } else { 0.0 };
        Ok(match self.kind {
            ObjectiveKind::Phi => 0.3 * (1.0 - need(c.auc, "auc")?) + 0.7 * (1.0 - need(c.vus, "vus")?) + recon,
            ObjectiveKind::Psi => {
                self.lambda * need(c.validation_nll, "validation_nll")? + self.beta * need(c.eval_nll, "eval_nll")? + recon
            }
        })
    }
}

/// Metric values behind one objective value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub auc: Option<f64>,
    pub vus: Option<f64>,
    pub reconstruction: Option<f64>,
    pub validation_nll: Option<f64>,
    pub eval_nll: Option<f64>,
}

/// Evaluation split of a normalized series.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    /// Whole normalized series (`T x D`); contexts may reach before `range`.
    pub values: &'a Matrix,
    /// Labels over the whole series.
    pub labels: &'a [bool],
    pub range: IndexRange,
    pub recon_starts: &'a [usize],
    pub recon_steps: usize,
    pub max_buffer: usize,
}

impl EvalSet<'_> {
    fn reconstruction(&self, model: &FlowModel) -> Result<f64> {
        reconstruction_delta(model, self.values, self.recon_starts, self.recon_steps, Some(self.labels))
    }
}

/// AUC and VUS of the model's scores on the evaluation range, plus `Δ` when
/// `recon` is set.
pub fn phi_components(model: &FlowModel, eval: &EvalSet, recon: bool, exec: Exec) -> Result<Components> {
    let scores = score_range(model, eval.values, eval.range, exec)?;
    let labels = &eval.labels[eval.range.start..eval.range.end];
    Ok(Components {
        auc: Some(auc_roc(&scores, labels)?),
        vus: Some(vus_roc(&scores, labels, eval.max_buffer)?),
        reconstruction: if recon { Some(eval.reconstruction(model)?) } else { None },
        ..Components::default()
    })
}

/// Mean NLL on the validation windows and on the evaluation range, plus `Δ`
/// when `recon` is set.
pub fn psi_components(model: &FlowModel, validation: &WindowedSeries, eval: &EvalSet, recon: bool, exec: Exec) -> Result<Components> {
    let scores = score_range(model, eval.values, eval.range, exec)?;
    Ok(Components {
        validation_nll: Some(mean_nll(model, validation, exec)?),
        eval_nll: Some(scores.iter().sum::<f64>() / scores.len() as f64),
        reconstruction: if recon { Some(eval.reconstruction(model)?) } else { None },
        ..Components::default()
    })
}

/// `0.3·(1 − AUC) + 0.7·(1 − VUS) + Δ`.
pub fn objective_phi(model: &FlowModel, eval: &EvalSet, exec: Exec) -> Result<(f64, Components)> {
    let c = phi_components(model, eval, true, exec)?;
    Ok((Objective::phi().compose(&c)?, c))
}

/// `λ·NLL(validation) + β·NLL(evaluation) + Δ`.
pub fn objective_psi(
    model: &FlowModel,
    validation: &WindowedSeries,
    eval: &EvalSet,
    lambda: f64,
    beta: f64,
    exec: Exec,
) -> Result<(f64, Components)> {
    let c = psi_components(model, validation, eval, true, exec)?;
    let obj = Objective {
        kind: ObjectiveKind::Psi,
        lambda,
        beta,
        recon_term: true,
    };
    Ok((obj.compose(&c)?, c))
}

/// Everything candidate training and scoring needs, in normalized units.
#[derive(Debug, Clone)]
pub struct SelectionData {
    pub values: Matrix,
    /// Labels over the whole series; the evaluation range must hold both
    /// classes for `phi`.
    pub labels: Vec<bool>,
    /// Steps that may be training targets.
    pub train_steps: Vec<bool>,
    /// Steps that may be validation targets.
    pub validation_steps: Vec<bool>,
    /// Steps no training or validation window may touch.
    pub exclude: Vec<bool>,
    pub eval: IndexRange,
    pub recon_starts: Vec<usize>,
    pub recon_steps: usize,
    pub max_buffer: usize,
}

impl SelectionData {
    fn check(&self) -> Result<()> {
        let t = self.values.rows();
        if [self.labels.len(), self.train_steps.len(), self.validation_steps.len(), self.exclude.len()]
            .iter()
            .any(|&n| n != t)
        {
            return Err(Error::invalid("selection masks differ in length from the series"));
        }
        if self.eval.end > t || self.eval.is_empty() {
            return Err(Error::invalid(format!("evaluation range {} outside series", self.eval)));
        }
        Ok(())
    }

    /// Training and validation windows for window length `k`. A window
    /// `[t − k, t]` is kept when its target is in the set, every step lies
    /// in the train or validation part, and no step is excluded.
    pub fn windows(&self, k: usize) -> Result<(WindowedSeries, WindowedSeries)> {
        let n = self.values.rows();
        let mut bad = vec![0usize; n + 1];
        for t in 0..n {
            let usable = (self.train_steps[t] || self.validation_steps[t]) && !self.exclude[t];
            bad[t + 1] = bad[t] + (!usable) as usize;
        }
        let clean = |t: usize| t >= k && bad[t + 1] == bad[t - k];
        let pick = |set: &[bool]| -> Vec<usize> { (k..n).filter(|&t| set[t] && clean(t)).collect() };
        let train = WindowedSeries::with_steps(self.values.clone(), k, pick(&self.train_steps))?;
        let val = WindowedSeries::with_steps(self.values.clone(), k, pick(&self.validation_steps))?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(format!(
                "window length {k} leaves {} training and {} validation windows",
                train.len(),
                val.len()
            )));
        }
        Ok((train, val))
    }

    pub fn eval_set(&self) -> EvalSet<'_> {
        EvalSet {
            values: &self.values,
            labels: &self.labels,
            range: self.eval,
            recon_starts: &self.recon_starts,
            recon_steps: self.recon_steps,
            max_buffer: self.max_buffer,
        }
    }

    /// Identifies the reconstruction starts and length.
    pub fn recon_fingerprint(&self) -> String {
        let mut v: Vec<f64> = self.recon_starts.iter().map(|&m| m as f64).collect();
        v.push(self.recon_steps as f64);
        fingerprint(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub space: SearchSpace,
    pub encoder: EncoderKind,
    pub cmaes: CmaesOptions,
    /// Epoch cap, patience and execution mode; batch size and learning
    /// rate come from each candidate.
    pub train: TrainConfig,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            space: SearchSpace::default(),
            encoder: EncoderKind::Base,
            cmaes: CmaesOptions {
                population: Some(8),
                budget: 40,
                seed: 0,
                sigma0: 0.3,
                max_doublings: 1,
            },
            train: TrainConfig::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub index: usize,
    pub restart: usize,
    pub generation: usize,
    pub hyperparams: HyperParams,
    pub objective: f64,
    pub spec: Objective,
    pub components: Components,
    /// Parameter fingerprint of the trained model.
    pub checkpoint_id: Option<String>,
    pub best_epoch: Option<usize>,
    pub recon_fingerprint: String,
    pub error: Option<String>,
}

impl CandidateReport {
    /// The objective recomputed from the stored components.
    pub fn recompose(&self) -> Result<f64> {
        self.spec.compose(&self.components)
    }
}

pub struct Selection {
    pub best: FlowModel,
    pub best_report: CandidateReport,
    pub reports: Vec<CandidateReport>,
}

/// Seed for candidate `index` of a search seeded with `seed`.
pub fn candidate_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

/// Trains and scores one candidate.
pub fn evaluate_candidate(
    data: &SelectionData,
    hp: &HyperParams,
    objective: &Objective,
    train: &TrainConfig,
    seed: u64,
) -> Result<(FlowModel, Components, Option<usize>)> {
    let (tw, vw) = data.windows(hp.window)?;
    let model = FlowModel::new(hp.flow_config(data.values.cols()), seed)?;
    let (model, report) = fit(model, &tw, &vw, &hp.train_config(train, seed))?;
    let exec = train.exec;
    let eval = data.eval_set();
    let c = match objective.kind {
        ObjectiveKind::Phi => phi_components(&model, &eval, objective.recon_term, exec)?,
        ObjectiveKind::Psi => psi_components(&model, &vw, &eval, objective.recon_term, exec)?,
    };
    Ok((model, c, Some(report.best_epoch)))
}

/// CMA-ES search; returns the candidate with the lowest objective (earliest
/// on ties) and every report in evaluation order.
pub fn model_select(data: &SelectionData, objective: Objective, config: &SelectConfig) -> Result<Selection> {
    data.check()?;
    config.space.validate()?;
    let recon_fp = data.recon_fingerprint();
    let mut reports: Vec<CandidateReport> = Vec::new();
    let mut best: Option<(f64, usize, FlowModel)> = None;
    let result = cmaes_minimize_batch(
        |points, first| {
            let hps: Vec<(usize, HyperParams)> = points
                .iter()
                .enumerate()
                .map(|(i, u)| (first + i, config.space.decode(u, config.encoder)))
                .collect();
            let outcomes = config.exec.map(&hps, |(index, hp)| {
                evaluate_candidate(data, hp, &objective, &config.train, candidate_seed(config.cmaes.seed, *index))
                    .and_then(|(m, c, e)| Ok((objective.compose(&c)?, m, c, e)))
            });
            let mut values = Vec::with_capacity(points.len());
            for ((index, hp), outcome) in hps.into_iter().zip(outcomes) {
                let mut report = CandidateReport {
                    index,
                    restart: 0,
                    generation: 0,
                    hyperparams: hp,
                    objective: f64::INFINITY,
                    spec: objective,
                    components: Components::default(),
                    checkpoint_id: None,
                    best_epoch: None,
                    recon_fingerprint: recon_fp.clone(),
                    error: None,
                };
                match outcome {
                    Ok((value, model, c, epoch)) if value.is_finite() => {
                        report.objective = value;
                        report.components = c;
                        report.best_epoch = epoch;
                        report.checkpoint_id = Some(fingerprint(model.params().values()));
                        if best.as_ref().map_or(true, |(b, _, _)| value < *b) {
                            best = Some((value, index, model));
                        }
                    }
                    Ok((value, _, c, _)) => {
                        report.components = c;
                        report.error = Some(format!("non-finite objective {value}"));
                    }
                    Err(e) => {
                        log::warn!("candidate {index} failed: {e}");
                        report.error = Some(e.to_string());
                    }
                }
                values.push(report.objective);
                reports.push(report);
            }
            values
        },
        &config.space.bounds(),
        &config.cmaes,
    )?;
    for (r, e) in reports.iter_mut().zip(&result.history) {
        r.restart = e.restart;
        r.generation = e.generation;
    }
    let (_, best_index, model) = best.ok_or_else(|| {
        Error::invalid(format!(
            "all {} candidates failed; first error: {}",
            reports.len(),
            reports.first().and_then(|r| r.error.clone()).unwrap_or_default()
        ))
    })?;
    Ok(Selection {
        best: model,
        best_report: reports[best_index].clone(),
        reports,
    })
}

pub fn write_reports_csv<W: Write>(writer: W, reports: &[CandidateReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "index", "restart", "generation", "objective", "auc", "vus", "reconstruction", "validation_nll", "eval_nll",
        "window", "n_layers", "hidden", "embed_dim", "encoder", "learning_rate", "batch_size", "checkpoint_id", "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let h = &r.hyperparams;
        w.write_record([
            r.index.to_string(),
            r.restart.to_string(),
            r.generation.to_string(),
            r.objective.to_string(),
            opt(r.components.auc),
            opt(r.components.vus),
            opt(r.components.reconstruction),
            opt(r.components.validation_nll),
            opt(r.components.eval_nll),
            h.window.to_string(),
            h.n_layers.to_string(),
            h.hidden.to_string(),
            h.embed_dim.to_string(),
            h.encoder.to_string(),
            h.learning_rate.to_string(),
            h.batch_size.to_string(),
            r.checkpoint_id.clone().unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<candidate reports>", e))?;
    Ok(())
}
