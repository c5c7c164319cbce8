#![allow(dead_code)]

use cindi_core::flow::{EncoderKind, FlowConfig, FlowModel};
use cindi_core::pipeline::{DataSource, PipelineConfig};
use cindi_core::select::{CmaesOptions, SearchSpace, SelectConfig};
use cindi_core::series::{AnomalyKind, AnomalySpec, IndexRange, SplitSpec, SynthSpec};
use cindi_core::train::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A flow moved off the identity so every layer matters.
pub fn perturbed(dim: usize, k: usize, layers: usize, encoder: EncoderKind, seed: u64, scale: f64) -> FlowModel {
    let mut cfg = FlowConfig::new(dim, k, layers, encoder);
    cfg.hidden = 8;
    cfg.embed_dim = 4;
    cfg.encoder_hidden = 8;
    cfg.cnn_filters = 3;
    let mut m = FlowModel::new(cfg, seed).unwrap();
    m.perturb(seed.wrapping_add(1), scale);
    m
}

fn anomaly(kind: AnomalyKind, start: usize, length: usize, magnitude: f64) -> AnomalySpec {
    AnomalySpec {
        kind,
        start,
        length,
        channel: None,
        magnitude,
    }
}

/// 1200 steps, two labelled sections in train and one each in eval / test.
pub fn small_synth() -> SynthSpec {
    SynthSpec {
        length: 1200,
        channels: 2,
        sines_per_channel: 2,
        components: None,
        anomalies: vec![
            anomaly(AnomalyKind::Spike, 200, 10, 1.0),
            anomaly(AnomalyKind::LevelShift, 480, 20, 0.8),
            anomaly(AnomalyKind::Spike, 820, 12, 1.0),
            anomaly(AnomalyKind::LevelShift, 1050, 25, -0.8),
        ],
        noise_pct: 0.05,
        seed: 3,
    }
}

pub fn small_split() -> SplitSpec {
    SplitSpec {
        train: IndexRange::new(0, 700),
        validation: None,
        eval: Some(IndexRange::new(700, 950)),
        test: Some(IndexRange::new(950, 1200)),
    }
}

pub fn tiny_select(budget: usize) -> SelectConfig {
    SelectConfig {
        space: SearchSpace {
            window: (8, 12),
            n_layers: (2, 2),
            hidden: (8, 16),
            embed_dim: (4, 8),
            learning_rate: (3e-3, 1e-2),
            batch_size: (64, 64),
        },
        encoder: EncoderKind::Base,
        cmaes: CmaesOptions {
            population: Some(4),
            budget,
            ..CmaesOptions::default()
        },
        train: TrainConfig {
            epochs_max: 3,
            patience: 1,
            ..TrainConfig::default()
        },
        ..SelectConfig::default()
    }
}

/// Fast whole-pipeline configuration on [`small_synth`].
pub fn small_config() -> PipelineConfig {
    PipelineConfig {
        data: DataSource::Synth(small_synth()),
        split: Some(small_split()),
        max_iterations: 3,
        max_buffer: 4,
        recon_starts: 2,
        recon_steps: 8,
        selection: tiny_select(4),
        downstream: tiny_select(4),
        seed: 3,
        ..PipelineConfig::default()
    }
}
