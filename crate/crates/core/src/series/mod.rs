//! Multivariate series with per-step error labels, CSV I/O, normalization,
//! windowing, split bookkeeping and the synthetic sequence generator.

mod csvio;
mod normalize;
mod split;
mod synth;
mod window;

pub use csvio::{load_csv, read_csv, write_csv, write_csv_to, CsvSchema};
pub use normalize::Normalizer;
pub use split::{validation_split, IndexRange, SplitSpec, ValidationSplit};
pub use synth::{
    benchmark, synth_generate, AnomalyKind, AnomalySpec, BenchmarkSpec, SineComponent, SynthSpec,
};
pub use window::{context_row, make_windows, WindowedSeries};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// `T x D` values with one binary label per step (`true` = possible error).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeries {
    values: Matrix,
    labels: Vec<bool>,
    timestamps: Option<Vec<String>>,
    channel_names: Vec<String>,
}

impl MultiSeries {
    pub fn new(values: Matrix, labels: Vec<bool>) -> Result<Self> {
        let names = (0..values.cols()).map(|c| format!("ch{c}")).collect();
        Self::with_names(values, labels, names, None)
    }

    pub fn with_names(
        values: Matrix,
        labels: Vec<bool>,
        channel_names: Vec<String>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        if values.cols() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 channels, got {}",
                values.cols()
            )));
        }
        if labels.len() != values.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} steps",
                labels.len(),
                values.rows()
            )));
        }
        if channel_names.len() != values.cols() {
            return Err(Error::invalid("channel name count differs from channel count"));
        }
        if timestamps.as_ref().is_some_and(|ts| ts.len() != values.rows()) {
            return Err(Error::invalid("timestamp count differs from step count"));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite {
                context: "series values".into(),
            });
        }
        Ok(MultiSeries {
            values,
            labels,
            timestamps,
            channel_names,
        })
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Number of channels.
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn set_row(&mut self, t: usize, row: &[f64]) {
        self.values.row_mut(t).copy_from_slice(row);
    }

    pub fn set_label(&mut self, t: usize, flagged: bool) {
        self.labels[t] = flagged;
    }

    pub fn with_values(&self, values: Matrix) -> Result<Self> {
        Self::with_names(
            values,
            self.labels.clone(),
            self.channel_names.clone(),
            self.timestamps.clone(),
        )
    }

    pub fn with_labels(&self, labels: Vec<bool>) -> Result<Self> {
        Self::with_names(
            self.values.clone(),
            labels,
            self.channel_names.clone(),
            self.timestamps.clone(),
        )
    }

    /// Sub-series over `[start, end)`.
    pub fn slice(&self, range: IndexRange) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::invalid(format!(
                "range {range} outside series of length {}",
                self.len()
            )));
        }
        let rows: Vec<usize> = range.iter().collect();
        Self::with_names(
            self.values.select_rows(&rows),
            self.labels[range.start..range.end].to_vec(),
            self.channel_names.clone(),
            self.timestamps
                .as_ref()
                .map(|ts| ts[range.start..range.end].to_vec()),
        )
    }

    pub fn flagged_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}
