//! Sum-of-sines sequences with planted, labelled anomalies.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{IndexRange, MultiSeries, SplitSpec};
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineComponent {
    pub amplitude: f64,
    /// Period in steps.
    pub period: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Alternating ±`magnitude`·amplitude excursions, one per step.
    Spike,
    /// Constant `magnitude`·amplitude offset (sign carried by `magnitude`).
    LevelShift,
    /// Every component's frequency multiplied by `magnitude`.
    FrequencyChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub length: usize,
    /// Affected channel; all channels when `None`.
    #[serde(default)]
    pub channel: Option<usize>,
    pub magnitude: f64,
}

impl AnomalySpec {
    pub fn range(&self) -> IndexRange {
        IndexRange::new(self.start, self.start + self.length)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    /// Sines per channel when `components` is not given.
    #[serde(default = "default_sines")]
    pub sines_per_channel: usize,
    /// Explicit per-channel components; drawn from `seed` otherwise.
    #[serde(default)]
    pub components: Option<Vec<Vec<SineComponent>>>,
    #[serde(default)]
    pub anomalies: Vec<AnomalySpec>,
    /// Gaussian noise σ as a fraction of each channel's amplitude.
    #[serde(default)]
    pub noise_pct: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sines() -> usize {
    2
}

impl SynthSpec {
    pub fn clean(length: usize, channels: usize, seed: u64) -> Self {
        SynthSpec {
            length,
            channels,
            sines_per_channel: 2,
            components: None,
            anomalies: Vec::new(),
            noise_pct: 0.0,
            seed,
        }
    }

    /// Per-channel components, explicit or drawn from the seed.
    pub fn resolved_components(&self) -> Vec<Vec<SineComponent>> {
        if let Some(c) = &self.components {
            return c.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.channels)
            .map(|_| {
                (0..self.sines_per_channel.max(1))
                    .map(|_| SineComponent {
                        amplitude: rng.gen_range(0.5..1.5),
                        period: rng.gen_range(16.0..64.0),
                        phase: rng.gen_range(0.0..TAU),
                    })
                    .collect()
            })
            .collect()
    }
}

fn channel_amplitude(components: &[SineComponent]) -> f64 {
    components.iter().map(|c| c.amplitude.abs()).sum()
}

fn sine_value(components: &[SineComponent], t: f64, freq_mult: f64) -> f64 {
    components
        .iter()
        .map(|c| c.amplitude * (TAU * freq_mult * t / c.period + c.phase).sin())
        .sum()
}

/// Generates the series; labels are 1 exactly over the anomaly ranges.
pub fn synth_generate(spec: &SynthSpec) -> Result<MultiSeries> {
    if spec.length == 0 {
        return Err(Error::invalid("synthetic length must be positive"));
    }
    if spec.channels < 2 {
        return Err(Error::invalid("synthetic series need at least 2 channels"));
    }
    if !(0.0..=1.0).contains(&spec.noise_pct) {
        return Err(Error::invalid(format!("noise_pct {} not in [0, 1]", spec.noise_pct)));
    }
    let components = spec.resolved_components();
    if components.len() != spec.channels {
        return Err(Error::invalid("component list does not match channel count"));
    }
    for a in &spec.anomalies {
        if a.start + a.length > spec.length || a.length == 0 {
            return Err(Error::invalid(format!(
                "anomaly {} exceeds series length {}",
                a.range(),
                spec.length
            )));
        }
        if a.channel.is_some_and(|c| c >= spec.channels) {
            return Err(Error::invalid(format!("anomaly channel {:?} out of range", a.channel)));
        }
    }
    let (t_len, d) = (spec.length, spec.channels);
    let amps: Vec<f64> = components.iter().map(|c| channel_amplitude(c)).collect();
    let mut values = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        for c in 0..d {
            values.set(t, c, sine_value(&components[c], t as f64, 1.0));
        }
    }
    let mut labels = vec![false; t_len];
    for a in &spec.anomalies {
        let channels: Vec<usize> = match a.channel {
            Some(c) => vec![c],
            None => (0..d).collect(),
        };
        for (i, t) in a.range().iter().enumerate() {
            labels[t] = true;
            for &c in &channels {
                let v = match a.kind {
                    AnomalyKind::Spike => {
                        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                        values.get(t, c) + sign * a.magnitude * amps[c]
                    }
                    AnomalyKind::LevelShift => values.get(t, c) + a.magnitude * amps[c],
                    AnomalyKind::FrequencyChange => sine_value(&components[c], t as f64, a.magnitude),
                };
                values.set(t, c, v);
            }
        }
    }
    if spec.noise_pct > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        let normals: Vec<Normal<f64>> = amps
            .iter()
            .map(|a| Normal::new(0.0, spec.noise_pct * a).expect("finite sigma"))
            .collect();
        for t in 0..t_len {
            for c in 0..d {
                let v = values.get(t, c) + normals[c].sample(&mut rng);
                values.set(t, c, v);
            }
        }
    }
    MultiSeries::new(values, labels)
}

/// Layout of the synthetic benchmark: one series cut into train / eval /
/// test, anomalies planted at random in each region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub length: usize,
    pub channels: usize,
    #[serde(default = "default_sines")]
    pub sines_per_channel: usize,
    pub noise_pct: f64,
    /// Anomaly sections across the whole series (split over the regions).
    pub sections: usize,
    /// Share of all steps covered by those sections.
    pub anomaly_fraction: f64,
    /// Extra share of the training region covered by corrupted sections.
    #[serde(default)]
    pub train_corruption: f64,
    /// Length of each training corruption section.
    #[serde(default = "default_corruption_len")]
    pub corruption_length: usize,
    pub train_fraction: f64,
    pub eval_fraction: f64,
    /// Steps kept anomaly-free at the start of each region.
    #[serde(default = "default_lead")]
    pub lead: usize,
    pub seed: u64,
}

fn default_corruption_len() -> usize {
    48
}

fn default_lead() -> usize {
    64
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            length: 8000,
            channels: 2,
            sines_per_channel: 2,
            noise_pct: 0.05,
            sections: 6,
            anomaly_fraction: 0.02,
            train_corruption: 0.0,
            corruption_length: default_corruption_len(),
            train_fraction: 0.6,
            eval_fraction: 0.15,
            lead: default_lead(),
            seed: 0,
        }
    }
}

const KINDS: [AnomalyKind; 3] = [AnomalyKind::Spike, AnomalyKind::LevelShift, AnomalyKind::FrequencyChange];

fn magnitude(kind: AnomalyKind, rng: &mut ChaCha8Rng) -> f64 {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    match kind {
        AnomalyKind::Spike => rng.gen_range(0.8..1.2),
        AnomalyKind::LevelShift => sign * rng.gen_range(0.6..1.0),
        AnomalyKind::FrequencyChange => {
            if rng.gen_bool(0.5) {
                rng.gen_range(2.0..3.0)
            } else {
                rng.gen_range(0.3..0.5)
            }
        }
    }
}

/// Places `count` sections of `len` steps at random in `region`, keeping
/// `lead` clean steps at the start and a gap of at least `gap` between them.
fn place(region: IndexRange, count: usize, len: usize, gap: usize, lead: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let needed = lead + count * len + (count - 1) * gap + gap;
    if needed > region.len() {
        return Err(Error::invalid(format!(
            "cannot place {count} sections of {len} steps in {region}"
        )));
    }
    let spare = region.len() - needed;
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut starts = Vec::with_capacity(count);
    let mut cur = region.start + lead;
    let mut prev = 0;
    for (i, c) in cuts.into_iter().enumerate() {
        cur += c - prev;
        prev = c;
        starts.push(cur);
        cur += len + if i + 1 < count { gap } else { 0 };
    }
    Ok(starts)
}

/// Builds the benchmark series and its splits.
pub fn benchmark(spec: &BenchmarkSpec) -> Result<(MultiSeries, SplitSpec)> {
    let t = spec.length;
    let train_end = (spec.train_fraction * t as f64).round() as usize;
    let eval_end = train_end + (spec.eval_fraction * t as f64).round() as usize;
    if !(0 < train_end && train_end < eval_end && eval_end < t) {
        return Err(Error::invalid("benchmark fractions leave an empty region"));
    }
    let regions = [
        IndexRange::new(0, train_end),
        IndexRange::new(train_end, eval_end),
        IndexRange::new(eval_end, t),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(17));
    let total = (spec.anomaly_fraction * t as f64).round() as usize;
    let sec_len = (total / spec.sections.max(1)).max(1);
    // Spread sections over train / eval / test, at least one in eval and test.
    let mut per_region = [0usize; 3];
    for i in 0..spec.sections {
        per_region[[2, 1, 0][i % 3]] += 1;
    }
    let mut anomalies = Vec::new();
    let mut kind_idx = rng.gen_range(0..3);
    for (r, region) in regions.iter().enumerate() {
        let mut lens = vec![sec_len; per_region[r]];
        if r == 0 && spec.train_corruption > 0.0 {
            let extra = (spec.train_corruption * region.len() as f64).round() as usize;
            let n = extra.div_ceil(spec.corruption_length.max(1));
            lens.extend(std::iter::repeat(spec.corruption_length).take(n));
        }
        if lens.is_empty() {
            continue;
        }
        let max_len = *lens.iter().max().expect("nonempty");
        let gap = (max_len / 2).max(16);
        let starts = place(*region, lens.len(), max_len, gap, spec.lead, &mut rng)?;
        // Shuffle which slot gets which length so short and long sections mix.
        let mut order: Vec<usize> = (0..lens.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (slot, &li) in order.iter().enumerate() {
            let kind = KINDS[kind_idx % 3];
            kind_idx += 1;
            let channel = if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(0..spec.channels)) };
            anomalies.push(AnomalySpec {
                kind,
                start: starts[slot],
                length: lens[li],
                channel,
                magnitude: magnitude(kind, &mut rng),
            });
        }
    }
    anomalies.sort_by_key(|a| a.start);
    let synth = SynthSpec {
        length: t,
        channels: spec.channels,
        sines_per_channel: spec.sines_per_channel,
        components: None,
        anomalies,
        noise_pct: spec.noise_pct,
        seed: spec.seed,
    };
    let series = synth_generate(&synth)?;
    let split = SplitSpec {
        train: regions[0],
        validation: None,
        eval: Some(regions[1]),
        test: Some(regions[2]),
    };
    Ok((series, split))
}
