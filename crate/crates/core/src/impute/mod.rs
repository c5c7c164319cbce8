//! Replacement of flagged sections: the flow's self-regressive chain and the
//! classical baselines (interpolators, window skipping, raw pass-through).

mod interp;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use interp::{InterpKind, Interpolant};

use crate::detect::sections;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Generator, ZChoice};
use crate::ndcore::Matrix;
use crate::series::{context_row, IndexRange, MultiSeries, Normalizer, WindowedSeries};

/// Every way a flagged training series can be prepared for retraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cindi,
    Linear,
    Nearest,
    Slinear,
    Quadratic,
    Cubic,
    Cubicspline,
    Skip,
    Raw,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Cindi,
        Method::Linear,
        Method::Nearest,
        Method::Slinear,
        Method::Quadratic,
        Method::Cubic,
        Method::Cubicspline,
        Method::Skip,
        Method::Raw,
    ];

    pub fn interp_kind(self) -> Option<InterpKind> {
        Some(match self {
            Method::Linear => InterpKind::Linear,
            Method::Nearest => InterpKind::Nearest,
            Method::Slinear => InterpKind::Slinear,
            Method::Quadratic => InterpKind::Quadratic,
            Method::Cubic => InterpKind::Cubic,
            Method::Cubicspline => InterpKind::Cubicspline,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Cindi => "cindi",
            Method::Skip => "skip",
            Method::Raw => "raw",
            m => m.interp_kind().expect("interpolator").name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown imputation method `{s}`")))
    }
}

/// One replaced section, values in original units (`length x D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub start: usize,
    pub length: usize,
    pub old: Matrix,
    pub new: Matrix,
}

impl Change {
    pub fn range(&self) -> IndexRange {
        IndexRange::new(self.start, self.start + self.length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputeResult {
    pub series: MultiSeries,
    pub changed: Vec<Change>,
    pub method: String,
}

fn check_mask(series: &MultiSeries, mask: &[bool]) -> Result<()> {
    if mask.len() != series.len() {
        return Err(Error::invalid(format!(
            "mask of length {} for series of length {}",
            mask.len(),
            series.len()
        )));
    }
    Ok(())
}

fn record(series: &MultiSeries, out: &MultiSeries, range: IndexRange) -> Change {
    let rows: Vec<usize> = range.iter().collect();
    Change {
        start: range.start,
        length: range.len(),
        old: series.values().select_rows(&rows),
        new: out.values().select_rows(&rows),
    }
}

/// Flow imputation with `z = 0`; see [`flow_impute_with`].
pub fn flow_impute(model: &FlowModel, series: &MultiSeries, mask: &[bool], normalizer: &Normalizer) -> Result<ImputeResult> {
    flow_impute_with(model, series, mask, normalizer, ZChoice::Mean, |_, _| {})
}

/// Replaces each flagged section `[a, b)` in time order by the chain
/// `x̂_t = F⁻¹(z | w_t)`, where `w_t` already contains `x̂_a … x̂_{t-1}`.
///
/// `observe(t, w_t)` sees every normalized, flattened context fed to the
/// flow. `ZChoice::Random(seed)` draws a fresh latent per step from
/// `seed ^ t`. Sections starting before step `k` are rejected.
pub fn flow_impute_with(
    model: &FlowModel,
    series: &MultiSeries,
    mask: &[bool],
    normalizer: &Normalizer,
    z: ZChoice,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<ImputeResult> {
    check_mask(series, mask)?;
    if normalizer.dim() != series.dim() || model.dim() != series.dim() {
        return Err(Error::invalid("model, normalizer and series disagree on channel count"));
    }
    let k = model.window();
    let found = sections(mask);
    if let Some(s) = found.iter().find(|s| s.start < k) {
        return Err(Error::Section {
            start: s.start,
            end: s.end,
            reason: format!("needs {k} context steps before it"),
        });
    }
    let mut work = normalizer.apply(series.values());
    let mut ctx = Matrix::zeros(1, k * series.dim());
    for s in &found {
        for t in s.iter() {
            context_row(&work, t, k, ctx.row_mut(0));
            observe(t, ctx.row(0));
            let x = match z {
                ZChoice::Mean => model.generate(&ctx)?,
                ZChoice::Random(seed) => {
                    let w = Matrix::from_vec(k, series.dim(), ctx.row(0).to_vec())?;
                    Matrix::row_vector(model.sample(&w, ZChoice::Random(seed ^ t as u64))?)
                }
            };
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("imputed value at step {t}"),
                });
            }
            work.row_mut(t).copy_from_slice(x.row(0));
        }
    }
    let mut out = series.clone();
    for s in &found {
        for t in s.iter() {
            let mut row = work.row(t).to_vec();
            normalizer.invert_row(&mut row);
            out.set_row(t, &row);
        }
    }
    let changed = found.iter().map(|&r| record(series, &out, r)).collect();
    Ok(ImputeResult {
        series: out,
        changed,
        method: Method::Cindi.name().into(),
    })
}

/// Per-channel interpolation through all unflagged steps.
pub fn interpolate(series: &MultiSeries, mask: &[bool], kind: InterpKind) -> Result<ImputeResult> {
    check_mask(series, mask)?;
    let found = sections(mask);
    let anchors: Vec<usize> = (0..series.len()).filter(|&t| !mask[t]).collect();
    let mut out = series.clone();
    if !found.is_empty() {
        let ts: Vec<f64> = anchors.iter().map(|&t| t as f64).collect();
        if ts.is_empty() {
            return Err(Error::Section {
                start: 0,
                end: series.len(),
                reason: "no unflagged anchors".into(),
            });
        }
        for c in 0..series.dim() {
            let vs = anchors.iter().map(|&t| series.row(t)[c]).collect();
            let curve = Interpolant::new(kind, ts.clone(), vs)?;
            for s in &found {
                for t in s.iter() {
                    let v = curve.eval(t as f64).map_err(|e| Error::Section {
                        start: s.start,
                        end: s.end,
                        reason: e.to_string(),
                    })?;
                    out.set_row(t, &{
                        let mut row = out.row(t).to_vec();
                        row[c] = v;
                        row
                    });
                }
            }
        }
    }
    let changed = found.iter().map(|&r| record(series, &out, r)).collect();
    Ok(ImputeResult {
        series: out,
        changed,
        method: kind.name().into(),
    })
}

/// Windows of `series` whose target and context avoid every flagged step.
pub fn skip(series: &MultiSeries, mask: &[bool], k: usize) -> Result<WindowedSeries> {
    check_mask(series, mask)?;
    let all = WindowedSeries::full(series.values().clone(), k)?;
    // flagged_before[t] = flagged steps in [0, t).
    let mut flagged_before = vec![0usize; mask.len() + 1];
    for (t, &m) in mask.iter().enumerate() {
        flagged_before[t + 1] = flagged_before[t] + m as usize;
    }
    let kept = all.filter(|t| flagged_before[t + 1] == flagged_before[t - k]);
    if kept.is_empty() {
        return Err(Error::invalid("every window overlaps a flagged step"));
    }
    Ok(kept)
}

/// Training data as given.
pub fn raw(series: &MultiSeries) -> MultiSeries {
    series.clone()
}

/// Change ledger as CSV: one row per replaced value.
pub fn write_changes_csv<W: Write>(writer: W, iteration: usize, changes: &[Change], channel_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "start", "length", "step", "channel", "old", "new"])?;
    for ch in changes {
        for r in 0..ch.length {
            for (c, name) in channel_names.iter().enumerate() {
                w.write_record([
                    iteration.to_string(),
                    ch.start.to_string(),
                    ch.length.to_string(),
                    (ch.start + r).to_string(),
                    name.clone(),
                    ch.old.get(r, c).to_string(),
                    ch.new.get(r, c).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<change ledger>", e))?;
    Ok(())
}
