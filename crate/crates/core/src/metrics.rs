//! Detection and reconstruction metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Generator;
use crate::ndcore::Matrix;
use crate::series::IndexRange;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub vus: f64,
    pub f1: f64,
    pub f1_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<f64>,
}

/// AUC, VUS and F1 for `scores` against `labels`.
pub fn evaluate(scores: &[f64], labels: &[bool], max_buffer: usize) -> Result<MetricReport> {
    let auc = auc_roc(scores, labels)?;
    let vus = vus_roc(scores, labels, max_buffer)?;
    let (f1, f1_threshold) = f1_at_diagonal(scores, labels)?;
    Ok(MetricReport {
        auc,
        vus,
        f1,
        f1_threshold,
        reconstruction: None,
    })
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: format!("score {i}"),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    // Twice the U statistic, kept integral.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count() as u128;
        let n = g.len() as u128 - p;
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Soft labels for buffer `ell`: 1 inside a labelled range, `1 − d/ell` at
/// distance `d < ell` from the nearest labelled step, 0 beyond.
pub fn soft_labels(labels: &[bool], ell: usize) -> Vec<f64> {
    let n = labels.len();
    let mut dist = vec![usize::MAX; n];
    let mut last = None;
    for t in 0..n {
        if labels[t] {
            last = Some(t);
        }
        if let Some(l) = last {
            dist[t] = t - l;
        }
    }
    let mut next = None;
    for t in (0..n).rev() {
        if labels[t] {
            next = Some(t);
        }
        if let Some(l) = next {
            dist[t] = dist[t].min(l - t);
        }
    }
    dist.into_iter()
        .map(|d| {
            if d == 0 {
                1.0
            } else if d < ell {
                1.0 - d as f64 / ell as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// AUC with discounted negatives: every labelled point is a positive of
/// weight 1, every other point `j` a negative of weight `1 − w_j`, so a high
/// score just outside a range costs less than one far away. Pairs are
/// weighted by the negative's weight; ties count one half.
pub fn weighted_auc(scores: &[f64], labels: &[bool], weights: &[f64]) -> Result<f64> {
    let mut num = 0.0;
    let mut neg_below = 0.0;
    let (mut total_p, mut total_n) = (0.0, 0.0);
    for g in tie_groups(scores) {
        let (mut p, mut n) = (0.0, 0.0);
        for &i in &g {
            if labels[i] {
                p += 1.0;
            } else {
                n += 1.0 - weights[i];
            }
        }
        num += p * neg_below + 0.5 * (p * n);
        neg_below += n;
        total_p += p;
        total_n += n;
    }
    let denom = total_p * total_n;
    if !(denom > 0.0) {
        return Err(Error::SingleClass);
    }
    Ok(num / denom)
}

/// Mean of the buffered AUC over buffers `0..=max_buffer`.
pub fn vus_roc(scores: &[f64], labels: &[bool], max_buffer: usize) -> Result<f64> {
    check(scores, labels)?;
    let mut total = 0.0;
    for ell in 0..=max_buffer {
        total += weighted_auc(scores, labels, &soft_labels(labels, ell))?;
    }
    Ok(total / (max_buffer + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Predict positive when `score >= threshold`.
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tpr: f64,
    pub fpr: f64,
}

/// Operating points at every distinct score, highest threshold first.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check(scores, labels)?;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for g in tie_groups(scores).into_iter().rev() {
        for &i in &g {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(RocPoint {
            threshold: scores[g[0]],
            tp,
            fp,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(points)
}

pub fn write_roc_csv<W: Write>(writer: W, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "tp", "fp", "tpr", "fpr"])?;
    for p in points {
        w.write_record([
            p.threshold.to_string(),
            p.tp.to_string(),
            p.fp.to_string(),
            p.tpr.to_string(),
            p.fpr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<roc csv>", e))?;
    Ok(())
}

/// F1 at the ROC operating point closest to the equal-error line
/// `TPR = 1 − FPR`; ties go to the lower threshold. Returns `(f1, threshold)`.
pub fn f1_at_diagonal(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, _) = check(scores, labels)?;
    let points = roc_points(scores, labels)?;
    let mut best: Option<(f64, &RocPoint)> = None;
    for p in &points {
        let gap = (p.tpr - (1.0 - p.fpr)).abs();
        if best.map_or(true, |(g, _)| gap <= g) {
            best = Some((gap, p));
        }
    }
    let (_, p) = best.expect("at least one operating point");
    let fn_ = pos - p.tp;
    let f1 = 2.0 * p.tp as f64 / (2 * p.tp + p.fp + fn_) as f64;
    Ok((f1, p.threshold))
}

/// Mean squared error of self-regressive generation.
///
/// For every start `m`, generation begins from the true context `w_m` and
/// each prediction is rolled into the context for the next step; the error
/// is summed over `S` steps and averaged over `|M|·S`. `clean`, when given,
/// must be false over `[m − k, m + S)` for every start.
pub fn reconstruction_delta<G: Generator + ?Sized>(
    generator: &G,
    values: &Matrix,
    starts: &[usize],
    steps: usize,
    clean: Option<&[bool]>,
) -> Result<f64> {
    if starts.is_empty() || steps == 0 {
        return Err(Error::invalid("reconstruction needs at least one start and one step"));
    }
    let (k, d) = (generator.window(), generator.dim());
    if values.cols() != d {
        return Err(Error::invalid("value width differs from generator dimension"));
    }
    for &m in starts {
        if m < k || m + steps > values.rows() {
            return Err(Error::ReconstructionStart {
                start: m,
                reason: format!("needs {k} steps before and {steps} from it within {} steps", values.rows()),
            });
        }
        if let Some(flags) = clean {
            if let Some(t) = (m - k..m + steps).find(|&t| flags[t]) {
                return Err(Error::ReconstructionStart {
                    start: m,
                    reason: format!("step {t} in its run is flagged"),
                });
            }
        }
    }
    let mut ctx = Matrix::zeros(starts.len(), k * d);
    for (r, &m) in starts.iter().enumerate() {
        crate::series::context_row(values, m, k, ctx.row_mut(r));
    }
    let mut total = 0.0;
    for s in 0..steps {
        let pred = generator.generate(&ctx)?;
        for (r, &m) in starts.iter().enumerate() {
            let truth = values.row(m + s);
            total += truth
                .iter()
                .zip(pred.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            let row = ctx.row_mut(r);
            row.copy_within(0..(k - 1) * d, d);
            row[..d].copy_from_slice(pred.row(r));
        }
    }
    let delta = total / (starts.len() * steps) as f64;
    if !delta.is_finite() {
        return Err(Error::NonFinite {
            context: "reconstruction error".into(),
        });
    }
    Ok(delta)
}

/// `count` starts spread evenly over the admissible starts in `region`: those
/// `m` whose run `[m − k, m + steps)` lies in `region` and is unflagged.
pub fn default_starts(flags: &[bool], region: IndexRange, k: usize, steps: usize, count: usize) -> Result<Vec<usize>> {
    if region.end > flags.len() {
        return Err(Error::invalid("reconstruction region outside series"));
    }
    // Length of the unflagged run ending at each step.
    let mut run = vec![0usize; flags.len() + 1];
    for t in region.iter() {
        run[t + 1] = if flags[t] { 0 } else { run[t] + 1 };
    }
    let need = k + steps;
    let candidates: Vec<usize> = (region.start + k..=region.end.saturating_sub(steps))
        .filter(|&m| run[m + steps] >= need)
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid(format!(
            "no clean run of {need} steps in {region} for reconstruction"
        )));
    }
    if count <= 1 || candidates.len() <= count {
        return Ok(if count <= 1 { vec![candidates[candidates.len() / 2]] } else { candidates.into_iter().take(count).collect() });
    }
    let last = candidates.len() - 1;
    Ok((0..count)
        .map(|i| candidates[(i * last + (count - 1) / 2) / (count - 1)])
        .collect())
}
