use serde::{Deserialize, Serialize};

use super::{IndexRange, MultiSeries};
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// Per-channel z-score factors taken from the training range only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation over `train` (a set of ranges).
    pub fn fit(series: &MultiSeries, train: &[IndexRange]) -> Result<Self> {
        let steps: Vec<usize> = train.iter().flat_map(|r| r.iter()).collect();
        if steps.is_empty() {
            return Err(Error::invalid("empty training range for normalization"));
        }
        if let Some(&bad) = steps.iter().find(|&&t| t >= series.len()) {
            return Err(Error::invalid(format!("training step {bad} outside series")));
        }
        let d = series.dim();
        let n = steps.len() as f64;
        let mut mean = vec![0.0; d];
        for &t in &steps {
            for (m, v) in mean.iter_mut().zip(series.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &t in &steps {
            for c in 0..d {
                let dv = series.row(t)[c] - mean[c];
                var[c] += dv * dv;
            }
        }
        let mut std = Vec::with_capacity(d);
        for (c, v) in var.into_iter().enumerate() {
            let s = (v / n).sqrt();
            if !(s > 1e-12 * mean[c].abs().max(1.0)) {
                return Err(Error::DegenerateChannel { channel: c });
            }
            std.push(s);
        }
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }

    pub fn apply(&self, values: &Matrix) -> Matrix {
        let mut out = values.clone();
        for r in 0..out.rows() {
            self.apply_row(out.row_mut(r));
        }
        out
    }

    pub fn invert(&self, values: &Matrix) -> Matrix {
        let mut out = values.clone();
        for r in 0..out.rows() {
            self.invert_row(out.row_mut(r));
        }
        out
    }

    pub fn apply_series(&self, series: &MultiSeries) -> Result<MultiSeries> {
        series.with_values(self.apply(series.values()))
    }
}
