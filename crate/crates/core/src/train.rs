//! Negative log-likelihood training with early stopping on a validation set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::model::Bound;
use crate::flow::FlowModel;
use crate::ndcore::{Adam, Axis, Tape};
use crate::par::Exec;
use crate::series::WindowedSeries;

/// Rows per gradient tape. Fixed so that parallel and sequential runs split
/// batches identically.
pub const GRAD_CHUNK: usize = 64;
/// Rows per scoring tape.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 300,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: 10,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("epochs_max, batch_size and patience must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.patience > self.epochs_max {
            return Err(Error::invalid("patience exceeds epochs_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the untrained model.
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub stopped_early: bool,
    /// Set when training aborted on a non-finite loss or gradient.
    pub diagnostic: Option<String>,
    /// Fingerprint of the returned parameters.
    pub snapshot_id: String,
}

impl TrainReport {
    pub fn initial_validation(&self) -> f64 {
        self.epochs[0].validation
    }
}

/// FNV-1a over parameter bit patterns.
pub fn fingerprint(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Per-tuple NLL for every window, in window order.
pub fn nll_per_window(model: &FlowModel, windows: &WindowedSeries, exec: Exec) -> Result<Vec<f64>> {
    let n = windows.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect();
    let parts = exec.map(&chunks, |&(a, b)| {
        let idx: Vec<usize> = (a..b).collect();
        let (x, ctx) = windows.batch(&idx);
        model
            .log_likelihood_batch(&x, &ctx)
            .map(|ll| ll.into_iter().map(|v| -v).collect::<Vec<_>>())
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean NLL over the tuples `idx` of `windows`.
pub fn nll_loss(model: &FlowModel, windows: &WindowedSeries, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (x, ctx) = windows.batch(idx);
    let ll = model.log_likelihood_batch(&x, &ctx)?;
    Ok(-ll.iter().sum::<f64>() / idx.len() as f64)
}

/// Mean NLL over all windows.
pub fn mean_nll(model: &FlowModel, windows: &WindowedSeries, exec: Exec) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to score"));
    }
    let s = nll_per_window(model, windows, exec)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Mean NLL over `idx` and its gradient in the model's flat parameter layout.
pub fn nll_loss_and_grad(model: &FlowModel, windows: &WindowedSeries, idx: &[usize], exec: Exec) -> Result<(f64, Vec<f64>)> {
    if idx.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let chunks: Vec<&[usize]> = idx.chunks(GRAD_CHUNK).collect();
    let parts = exec.map(&chunks, |chunk| -> Result<(f64, Vec<f64>)> {
        let (x, ctx) = windows.batch(chunk);
        let mut tape = Tape::new();
        let bound = Bound::new(model, &mut tape);
        let xn = tape.constant(x);
        let cn = tape.constant(ctx);
        let rows = bound.nll_rows(&mut tape, xn, cn)?;
        let total = tape.sum(rows, Axis::All)?;
        let grads = tape.backward(total)?;
        let loss = tape.value(total).data()[0];
        Ok((loss, tape.param_grads(&grads, model.params())))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = idx.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Trains `model` on `train` and returns the parameters of the epoch with the
/// lowest validation loss (epoch 0 = untrained counts).
pub fn fit(
    mut model: FlowModel,
    train: &WindowedSeries,
    validation: &WindowedSeries,
    config: &TrainConfig,
) -> Result<(FlowModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::invalid(format!(
            "training needs windows in both sets (train {}, validation {})",
            train.len(),
            validation.len()
        )));
    }
    if train.k() != model.window() || validation.k() != model.window() {
        return Err(Error::invalid("window length differs from the model's"));
    }
    let exec = config.exec;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.param_count(), config.learning_rate);
    let initial_train = mean_nll(&model, train, exec)?;
    let initial_val = mean_nll(&model, validation, exec)?;
    let mut epochs = vec![EpochLoss {
        epoch: 0,
        train: initial_train,
        validation: initial_val,
    }];
    let mut best = (0usize, initial_val, model.params().values().to_vec());
    let mut stale = 0;
    let mut diagnostic = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=config.epochs_max {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in order.chunks(config.batch_size) {
            let step = nll_loss_and_grad(&model, train, batch, exec).and_then(|(loss, grad)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("training loss at epoch {epoch}"),
                    });
                }
                adam.step(model.params_mut().values_mut(), &grad)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => weighted += loss * batch.len() as f64,
                Err(e @ (Error::NonFinite { .. } | Error::NonFiniteLayer { .. })) => {
                    diagnostic = Some(format!("aborted at epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val = match mean_nll(&model, validation, exec) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. } | Error::NonFiniteLayer { .. }) => {
                diagnostic = Some(format!("aborted at epoch {epoch}: non-finite validation loss"));
                break;
            }
            Err(e) => return Err(e),
        };
        epochs.push(EpochLoss {
            epoch,
            train: weighted / train.len() as f64,
            validation: val,
        });
        if val < best.1 {
            best = (epoch, val, model.params().values().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some(d) = &diagnostic {
        log::warn!("{d}; returning snapshot from epoch {}", best.0);
    }
    let last_epoch = epochs.last().map_or(0, |e| e.epoch);
    model.params_mut().set_values(&best.2);
    let report = TrainReport {
        best_epoch: best.0,
        best_validation: best.1,
        stopped_early: diagnostic.is_none() && last_epoch < config.epochs_max,
        diagnostic,
        snapshot_id: fingerprint(&best.2),
        epochs,
    };
    Ok((model, report))
}
