use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open step interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct IndexRange {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for IndexRange {
    fn from([start, end]: [usize; 2]) -> Self {
        IndexRange { start, end }
    }
}

impl From<IndexRange> for [usize; 2] {
    fn from(r: IndexRange) -> Self {
        [r.start, r.end]
    }
}

impl fmt::Display for IndexRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

impl IndexRange {
    pub fn new(start: usize, end: usize) -> Self {
        IndexRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &IndexRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn covers(&self, other: &IndexRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// Named step ranges of one series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: IndexRange,
    /// Explicit validation blocks inside `train`; drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Vec<IndexRange>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<IndexRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<IndexRange>,
}

impl SplitSpec {
    pub fn check(&self, len: usize) -> Result<()> {
        let mut named = vec![("train", self.train)];
        named.extend(self.eval.map(|r| ("eval", r)));
        named.extend(self.test.map(|r| ("test", r)));
        for (name, r) in &named {
            if r.is_empty() || r.end > len {
                return Err(Error::invalid(format!(
                    "{name} range {r} is empty or outside series of length {len}"
                )));
            }
        }
        for (name, r) in named.iter().skip(1) {
            if r.overlaps(&self.train) {
                return Err(Error::invalid(format!("{name} range {r} overlaps train")));
            }
        }
        if let (Some(e), Some(t)) = (self.eval, self.test) {
            if e.overlaps(&t) {
                return Err(Error::invalid("eval and test ranges overlap"));
            }
        }
        if let Some(val) = &self.validation {
            if let Some(bad) = val.iter().find(|v| !self.train.covers(v)) {
                return Err(Error::invalid(format!("validation block {bad} is outside train")));
            }
        }
        Ok(())
    }
}

/// Result of carving validation blocks out of a training range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSplit {
    pub train: Vec<IndexRange>,
    pub validation: Vec<IndexRange>,
}

impl ValidationSplit {
    /// Derives the train remainder from given validation blocks.
    pub fn from_blocks(train: IndexRange, mut validation: Vec<IndexRange>) -> Result<Self> {
        validation.sort();
        for w in validation.windows(2) {
            if w[0].end >= w[1].start {
                return Err(Error::invalid("validation blocks overlap or touch"));
            }
        }
        let mut rest = Vec::new();
        let mut cur = train.start;
        for v in &validation {
            if !train.covers(v) {
                return Err(Error::invalid(format!("validation block {v} outside train")));
            }
            if v.start > cur {
                rest.push(IndexRange::new(cur, v.start));
            }
            cur = v.end;
        }
        if cur < train.end {
            rest.push(IndexRange::new(cur, train.end));
        }
        Ok(ValidationSplit {
            train: rest,
            validation,
        })
    }

    pub fn validation_len(&self) -> usize {
        self.validation.iter().map(IndexRange::len).sum()
    }

    pub fn is_validation(&self, t: usize) -> bool {
        self.validation.iter().any(|r| r.contains(t))
    }

    pub fn is_train(&self, t: usize) -> bool {
        self.train.iter().any(|r| r.contains(t))
    }
}

/// Carves `sections` disjoint contiguous blocks covering
/// `⌈fraction·|train|⌉` steps out of `train`.
///
/// Block lengths differ by at most one. The gaps around the blocks are a
/// seeded random composition of the remaining steps, with at least one
/// training step between neighbouring blocks. Fails if no remaining training
/// run is at least `min_train_run` long.
pub fn validation_split(
    train: IndexRange,
    fraction: f64,
    sections: usize,
    seed: u64,
    min_train_run: usize,
) -> Result<ValidationSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {fraction} not in (0, 1)")));
    }
    if sections == 0 {
        return Err(Error::invalid("need at least one validation section"));
    }
    let n = train.len();
    let target = (fraction * n as f64).ceil() as usize;
    if target < sections || n < target + (sections - 1) + min_train_run {
        return Err(Error::invalid(format!(
            "validation fraction {fraction} with {sections} sections leaves no training run of {min_train_run} steps in {n}"
        )));
    }
    let free = n - target;
    let spare = free - (sections - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cuts: Vec<usize> = (0..sections).map(|_| rng.gen_range(0..=spare)).collect();
    cuts.sort_unstable();
    // gaps[0] before the first block, gaps[sections] after the last.
    let mut gaps = Vec::with_capacity(sections + 1);
    let mut prev = 0;
    for (i, &c) in cuts.iter().enumerate() {
        gaps.push(c - prev + usize::from(i > 0));
        prev = c;
    }
    gaps.push(spare - prev);

    let base = target / sections;
    let extra = target % sections;
    let mut blocks = Vec::with_capacity(sections);
    let mut cur = train.start;
    for i in 0..sections {
        cur += gaps[i];
        let len = base + usize::from(i < extra);
        blocks.push(IndexRange::new(cur, cur + len));
        cur += len;
    }
    let split = ValidationSplit::from_blocks(train, blocks)?;
    let longest = split.train.iter().map(IndexRange::len).max().unwrap_or(0);
    if longest < min_train_run {
        return Err(Error::invalid(format!(
            "longest training run after validation split is {longest}, need {min_train_run}"
        )));
    }
    Ok(split)
}
