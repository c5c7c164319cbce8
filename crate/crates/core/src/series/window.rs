use super::MultiSeries;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// `(x_t, w_t)` tuples over a shared value matrix.
///
/// Tuples are stored as target step indices; `w_t` row `j` is `x_{t-1-j}`
/// (most recent first) and is materialized on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSeries {
    k: usize,
    values: Matrix,
    steps: Vec<usize>,
}

/// Windows for every `t` in `k..T` (0-based), so exactly `T - k` tuples.
pub fn make_windows(series: &MultiSeries, k: usize) -> Result<WindowedSeries> {
    WindowedSeries::full(series.values().clone(), k)
}

/// Flattened context for step `t`: `[x_{t-1}, x_{t-2}, …, x_{t-k}]`.
pub fn context_row(values: &Matrix, t: usize, k: usize, out: &mut [f64]) {
    let d = values.cols();
    debug_assert!(t >= k && out.len() == k * d);
    for j in 0..k {
        out[j * d..(j + 1) * d].copy_from_slice(values.row(t - 1 - j));
    }
}

impl WindowedSeries {
    pub fn full(values: Matrix, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("window length must be >= 1"));
        }
        if values.rows() <= k {
            return Err(Error::invalid(format!(
                "series of length {} is too short for window length {k}",
                values.rows()
            )));
        }
        let steps = (k..values.rows()).collect();
        Ok(WindowedSeries { k, values, steps })
    }

    /// Windows at the given target steps; each must satisfy `k <= t < T`.
    pub fn with_steps(values: Matrix, k: usize, steps: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("window length must be >= 1"));
        }
        if let Some(&bad) = steps.iter().find(|&&t| t < k || t >= values.rows()) {
            return Err(Error::invalid(format!("step {bad} has no full window")));
        }
        Ok(WindowedSeries { k, values, steps })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// `(x_t, w_t)` for tuple `i`, with `w_t` as a `k x D` matrix.
    pub fn tuple(&self, i: usize) -> (Vec<f64>, Matrix) {
        let t = self.steps[i];
        let mut ctx = vec![0.0; self.k * self.dim()];
        context_row(&self.values, t, self.k, &mut ctx);
        (
            self.values.row(t).to_vec(),
            Matrix::from_vec(self.k, self.dim(), ctx).expect("sized"),
        )
    }

    /// Targets (`B x D`) and flattened contexts (`B x kD`) for tuples `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let d = self.dim();
        let mut x = Matrix::zeros(idx.len(), d);
        let mut w = Matrix::zeros(idx.len(), self.k * d);
        for (r, &i) in idx.iter().enumerate() {
            let t = self.steps[i];
            x.row_mut(r).copy_from_slice(self.values.row(t));
            context_row(&self.values, t, self.k, w.row_mut(r));
        }
        (x, w)
    }

    /// Keeps tuples whose target step satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> WindowedSeries {
        WindowedSeries {
            k: self.k,
            values: self.values.clone(),
            steps: self.steps.iter().copied().filter(|&t| keep(t)).collect(),
        }
    }
}
