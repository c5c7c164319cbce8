use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

/// Flat parameter vector with named matrix-shaped slots.
///
/// Every differentiable component registers its weights here, so a whole
/// model is one `Vec<f64>` for the optimizer, checkpoints and snapshots.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Slot>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, init: Matrix) -> ParamId {
        let offset = self.values.len();
        self.slots.push(Slot {
            name: name.into(),
            rows: init.rows(),
            cols: init.cols(),
            offset,
        });
        self.values.extend_from_slice(init.data());
        ParamId(self.slots.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    /// Uniform in ±1/√fan_in, fan_in taken as `rows`.
    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All slot ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let s = &self.slots[id.0];
        s.offset..s.offset + s.rows * s.cols
    }

    pub fn matrix(&self, id: ParamId) -> Matrix {
        let s = &self.slots[id.0];
        Matrix::from_vec(s.rows, s.cols, self.values[self.range(id)].to_vec()).expect("slot sized")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Replaces all values; the layout must match.
    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len(), "parameter layout mismatch");
        self.values.copy_from_slice(values);
    }

    pub fn slot_values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.values[r]
    }

    /// Same slot names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.slots == other.slots
    }
}
