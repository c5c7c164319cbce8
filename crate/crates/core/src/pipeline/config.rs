use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::EncoderKind;
use crate::impute::Method;
use crate::select::{HyperParams, ObjectiveKind, SelectConfig};
use crate::series::{benchmark, load_csv, synth_generate, BenchmarkSpec, CsvSchema, MultiSeries, SplitSpec, SynthSpec};

/// Where the series comes from. In files, `kind = "csv" | "synth" | "benchmark"`
/// sits beside the variant's own keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_timestamp")]
        timestamp_column: String,
        #[serde(default = "default_label")]
        label_column: String,
    },
    Synth(SynthSpec),
    Benchmark(BenchmarkSpec),
}

fn default_timestamp() -> String {
    CsvSchema::default().timestamp_column
}

fn default_label() -> String {
    CsvSchema::default().label_column
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    /// Required unless the source is a benchmark, which brings its own.
    pub split: Option<SplitSpec>,
    pub method: Method,
    pub encoder: EncoderKind,
    pub objective: ObjectiveKind,
    pub max_iterations: usize,
    /// Stop once consecutive flag masks differ in fewer than this share of
    /// all steps.
    pub convergence_epsilon: f64,
    pub smoothing: usize,
    pub validation_fraction: f64,
    pub validation_sections: usize,
    pub max_buffer: usize,
    pub recon_starts: usize,
    pub recon_steps: usize,
    /// Impute labelled steps as well as detected ones.
    pub impute_labels: bool,
    /// Exclude windows touching labelled steps from the first fit.
    pub skip_first_fit: bool,
    /// Run the full search every iteration instead of refitting.
    pub reselect_each_iteration: bool,
    /// Score the test split after every iteration.
    pub downstream_each_iteration: bool,
    /// Fixed hyperparameters; searched when absent.
    pub hyperparams: Option<HyperParams>,
    /// Search used for the detection model.
    pub selection: SelectConfig,
    /// Search used for the downstream detector.
    pub downstream: SelectConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let selection = SelectConfig::default();
        PipelineConfig {
            data: DataSource::Benchmark(BenchmarkSpec::default()),
            split: None,
            method: Method::Cindi,
            encoder: EncoderKind::Base,
            objective: ObjectiveKind::Phi,
            max_iterations: 8,
            convergence_epsilon: 0.005,
            smoothing: 3,
            validation_fraction: 0.2,
            validation_sections: 5,
            max_buffer: 16,
            recon_starts: 7,
            recon_steps: 48,
            impute_labels: true,
            skip_first_fit: true,
            reselect_each_iteration: false,
            downstream_each_iteration: false,
            hyperparams: None,
            downstream: selection.clone(),
            selection,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.convergence_epsilon) {
            return Err(Error::invalid("convergence_epsilon must lie in [0, 1)"));
        }
        if self.smoothing == 0 {
            return Err(Error::invalid("smoothing must be at least 1"));
        }
        if self.recon_starts == 0 || self.recon_steps == 0 {
            return Err(Error::invalid("reconstruction needs starts and steps"));
        }
        self.selection.space.validate()?;
        self.downstream.space.validate()?;
        self.selection.train.validate()?;
        self.downstream.train.validate()?;
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative CSV path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Invalid(message) => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        if let (DataSource::Csv { path: data, .. }, Some(dir)) = (&mut cfg.data, path.parent()) {
            if data.is_relative() {
                *data = dir.join(&*data);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    /// Applies `seed` to every seeded component.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.selection.cmaes.seed = seed;
        self.downstream.cmaes.seed = seed.wrapping_add(1);
        match &mut self.data {
            DataSource::Synth(s) => s.seed = seed,
            DataSource::Benchmark(b) => b.seed = seed,
            DataSource::Csv { .. } => {}
        }
    }

    /// Loads or generates the series with its split.
    pub fn dataset(&self) -> Result<(MultiSeries, SplitSpec)> {
        let (series, own_split) = match &self.data {
            DataSource::Csv {
                path,
                timestamp_column,
                label_column,
            } => {
                let schema = CsvSchema {
                    timestamp_column: timestamp_column.clone(),
                    label_column: label_column.clone(),
                };
                (load_csv(path, &schema)?, None)
            }
            DataSource::Synth(spec) => (synth_generate(spec)?, None),
            DataSource::Benchmark(spec) => {
                let (s, split) = benchmark(spec)?;
                (s, Some(split))
            }
        };
        let split = self
            .split
            .clone()
            .or(own_split)
            .ok_or_else(|| Error::invalid("config needs a [split] section for this data source"))?;
        split.check(series.len())?;
        Ok((series, split))
    }
}
