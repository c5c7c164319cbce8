//! Likelihood-threshold flagging.
//!
//! Scores are per-step NLL. The threshold is `mean + 2·std` (sample std) of
//! the scores of known-clean steps, and a step is flagged when the centered
//! moving average of scores exceeds it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::ndcore::Matrix;
use crate::par::Exec;
use crate::series::{IndexRange, WindowedSeries};
use crate::train::nll_per_window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flagging {
    /// Series step of `scores[0]`.
    #[serde(default)]
    pub offset: usize,
    pub scores: Vec<f64>,
    pub tau: f64,
    pub smoothing: usize,
    pub mask: Vec<bool>,
}

impl Flagging {
    pub fn new(scores: Vec<f64>, tau: f64, smoothing: usize) -> Self {
        let mask = flag(&scores, tau, smoothing);
        Flagging {
            offset: 0,
            scores,
            tau,
            smoothing,
            mask,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn flagged(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Flagged runs in series steps.
    pub fn sections(&self) -> Vec<IndexRange> {
        sections(&self.mask)
            .into_iter()
            .map(|r| IndexRange::new(r.start + self.offset, r.end + self.offset))
            .collect()
    }

    /// Columns `timestep, score, tau, flag`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestep", "score", "tau", "flag"])?;
        for (t, (s, m)) in self.scores.iter().zip(&self.mask).enumerate() {
            w.write_record([
                (self.offset + t).to_string(),
                s.to_string(),
                self.tau.to_string(),
                u8::from(*m).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<scores csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::pipeline::write_atomic(path, &buf)
    }
}

/// Flag mask of length `len` from a file written by [`Flagging::write_csv`].
pub fn read_flags_csv(path: &Path, len: usize) -> Result<Vec<bool>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(format!("missing column '{name}'")))
    };
    let (ts, fl) = (col("timestep")?, col("flag")?);
    let mut mask = vec![false; len];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let t: usize = rec
            .get(ts)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(format!("line {line}: bad timestep")))?;
        if t >= len {
            return Err(parse_err(format!("line {line}: timestep {t} outside series of length {len}")));
        }
        mask[t] = match rec.get(fl) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(parse_err(format!("line {line}: flag must be 0 or 1"))),
        };
    }
    Ok(mask)
}

/// `mean + 2·std` with the `n − 1` denominator.
pub fn threshold_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::invalid(format!(
            "threshold needs at least 2 clean points, got {}",
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    Ok(mean + 2.0 * var.sqrt())
}

/// Threshold from the model's NLL on known-clean windows.
pub fn threshold(model: &FlowModel, clean: &WindowedSeries, exec: Exec) -> Result<f64> {
    let scores = nll_per_window(model, clean, exec)?;
    threshold_from_scores(&scores)
}

/// Per-step NLL for a whole (normalized) `T x D` value matrix. Steps before
/// `k` have no window and repeat the first computable score.
pub fn score(model: &FlowModel, values: &Matrix, exec: Exec) -> Result<Vec<f64>> {
    let k = model.window();
    let windows = WindowedSeries::full(values.clone(), k)?;
    let tail = nll_per_window(model, &windows, exec)?;
    let mut out = Vec::with_capacity(values.rows());
    out.extend(std::iter::repeat(tail[0]).take(k));
    out.extend(tail);
    Ok(out)
}

/// Per-step NLL for the steps of `range`; steps before `k` repeat the score
/// of step `k`.
pub fn score_range(model: &FlowModel, values: &Matrix, range: IndexRange, exec: Exec) -> Result<Vec<f64>> {
    let k = model.window();
    if range.end > values.rows() || range.is_empty() || range.end <= k {
        return Err(Error::invalid(format!("cannot score {range} with window length {k}")));
    }
    let first = range.start.max(k);
    let windows = WindowedSeries::with_steps(values.clone(), k, (first..range.end).collect())?;
    let tail = nll_per_window(model, &windows, exec)?;
    let mut out = Vec::with_capacity(range.len());
    out.extend(std::iter::repeat(tail[0]).take(first - range.start));
    out.extend(tail);
    Ok(out)
}

/// Centered moving average, truncated at the ends. The window covers
/// `t − (w−1)/2 ..= t + w/2`.
pub fn smooth(scores: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    if window == 1 {
        return scores.to_vec();
    }
    let n = scores.len();
    let back = (window - 1) / 2;
    let fwd = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for (i, s) in scores.iter().enumerate() {
        prefix[i + 1] = prefix[i] + s;
    }
    (0..n)
        .map(|t| {
            let a = t.saturating_sub(back);
            let b = (t + fwd + 1).min(n);
            // Direct sum keeps short windows exact.
            if b - a <= 8 {
                scores[a..b].iter().sum::<f64>() / (b - a) as f64
            } else {
                (prefix[b] - prefix[a]) / (b - a) as f64
            }
        })
        .collect()
}

/// `mask[t] = smooth(scores)[t] > tau`.
pub fn flag(scores: &[f64], tau: f64, smoothing: usize) -> Vec<bool> {
    smooth(scores, smoothing).into_iter().map(|s| s > tau).collect()
}

/// Maximal runs of `true`.
pub fn sections(mask: &[bool]) -> Vec<IndexRange> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(IndexRange::new(s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(IndexRange::new(s, mask.len()));
    }
    out
}
