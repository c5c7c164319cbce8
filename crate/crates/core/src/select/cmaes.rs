//! (μ/μ_w, λ)-CMA-ES with rank-one and rank-μ covariance updates,
//! cumulative step-size adaptation and population-doubling restarts.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaesOptions {
    /// Initial population; `None` uses `4 + ⌊3 ln n⌋`.
    pub population: Option<usize>,
    /// Total objective evaluations.
    pub budget: usize,
    pub seed: u64,
    /// Initial step size as a fraction of the widest bound interval.
    pub sigma0: f64,
    /// Cap on population doublings across restarts.
    pub max_doublings: usize,
}

impl Default for CmaesOptions {
    fn default() -> Self {
        CmaesOptions {
            population: None,
            budget: 1000,
            seed: 0,
            sigma0: 0.3,
            // Effectively unbounded: doubling also stops once a population
            // would exceed the budget.
            max_doublings: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Running index over all evaluations.
    pub index: usize,
    pub restart: usize,
    pub generation: usize,
    /// Point passed to the objective (clipped into bounds).
    pub x: Vec<f64>,
    /// Objective plus clipping penalty; NaN is recorded as `+∞`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaesResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub best_index: usize,
    pub history: Vec<Evaluation>,
    pub restarts: usize,
}

/// Minimizes `f` over the box `bounds`, one evaluation at a time.
pub fn cmaes_minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    options: &CmaesOptions,
) -> Result<CmaesResult> {
    cmaes_minimize_batch(|points, _| points.iter().map(|x| f(x)).collect(), bounds, options)
}

/// Minimizes with a generation-wise evaluator `f(points, first_index)`
/// returning one value per point; `first_index` is the running index of
/// `points[0]`, so callers can evaluate a generation in parallel while
/// keeping per-candidate seeds independent of scheduling.
pub fn cmaes_minimize_batch(
    mut f: impl FnMut(&[Vec<f64>], usize) -> Vec<f64>,
    bounds: &[(f64, f64)],
    options: &CmaesOptions,
) -> Result<CmaesResult> {
    let n = bounds.len();
    if n == 0 {
        return Err(Error::invalid("CMA-ES needs at least one dimension"));
    }
    if let Some(&(lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::invalid(format!("invalid bound [{lo}, {hi}]")));
    }
    let lambda0 = options
        .population
        .unwrap_or(4 + (3.0 * (n as f64).ln()).floor() as usize);
    if lambda0 < 4 || options.budget < lambda0 {
        return Err(Error::invalid(format!(
            "need budget >= population >= 4 (budget {}, population {lambda0})",
            options.budget
        )));
    }
    if !(options.sigma0 > 0.0) {
        return Err(Error::invalid("sigma0 must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let width = bounds.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    let mut history: Vec<Evaluation> = Vec::with_capacity(options.budget);
    let mut best: Option<(f64, usize)> = None;
    let mut lambda = lambda0;
    let mut restart = 0;
    let mut doublings = 0;

    while history.len() < options.budget {
        let mean0: Vec<f64> = if restart == 0 {
            bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
        } else {
            bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect()
        };
        let mut es = Strategy::new(mean0, options.sigma0 * width, lambda);
        loop {
            let remaining = options.budget - history.len();
            if remaining == 0 {
                break;
            }
            let ys = es.sample(&mut rng);
            let take = ys.len().min(remaining);
            let raw: Vec<Vec<f64>> = ys[..take].iter().map(|y| es.point(y)).collect();
            let clipped: Vec<Vec<f64>> = raw.iter().map(|x| clip(x, bounds)).collect();
            let values = f(&clipped, history.len());
            if values.len() != take {
                return Err(Error::invalid("batch objective returned the wrong number of values"));
            }
            let mut scored = Vec::with_capacity(take);
            for ((x, c), v) in raw.iter().zip(clipped).zip(values) {
                let penalty: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                let value = if v.is_nan() { f64::INFINITY } else { v + penalty };
                let index = history.len();
                if best.map_or(true, |(b, _)| value < b) {
                    best = Some((value, index));
                }
                scored.push(value);
                history.push(Evaluation {
                    index,
                    restart,
                    generation: es.generation,
                    x: c,
                    value,
                });
            }
            if take < ys.len() {
                break;
            }
            es.update(&ys, &scored);
            if es.stagnated() {
                break;
            }
        }
        restart += 1;
        if doublings < options.max_doublings && lambda < options.budget {
            lambda *= 2;
            doublings += 1;
        }
    }
    let (best_value, best_index) = best.expect("budget is at least one population");
    Ok(CmaesResult {
        best: history[best_index].x.clone(),
        best_value,
        best_index,
        history,
        restarts: restart - 1,
    })
}

fn clip(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter().zip(bounds).map(|(v, &(lo, hi))| v.clamp(lo, hi)).collect()
}

struct Strategy {
    n: usize,
    lambda: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    sigma0: f64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: usize,
    /// Best value of each recent generation.
    recent: Vec<f64>,
}

impl Strategy {
    fn new(mean: Vec<f64>, sigma: f64, lambda: usize) -> Self {
        let n = mean.len();
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        Strategy {
            n,
            lambda,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n: nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf)),
            mean: DVector::from_vec(mean),
            sigma,
            sigma0: sigma,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            recent: Vec::new(),
        }
    }

    /// `λ` steps `y ~ N(0, C)`.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.n, |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.basis * self.scales.component_mul(&z)
            })
            .collect()
    }

    fn point(&self, y: &DVector<f64>) -> Vec<f64> {
        (&self.mean + y * self.sigma).iter().copied().collect()
    }

    fn update(&mut self, ys: &[DVector<f64>], values: &[f64]) {
        let mut order: Vec<usize> = (0..ys.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut y_w = DVector::zeros(self.n);
        for (w, &i) in self.weights.iter().zip(&order) {
            y_w += &ys[i] * *w;
        }
        self.mean += &y_w * self.sigma;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d))
            * self.basis.transpose();
        self.p_sigma = &self.p_sigma * (1.0 - self.c_sigma)
            + (inv_sqrt * &y_w) * (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();
        self.generation += 1;
        let ps_norm = self.p_sigma.norm();
        let decay = (1.0 - (1.0 - self.c_sigma).powi(2 * self.generation as i32)).sqrt();
        let h_sigma = ps_norm / decay < (1.4 + 2.0 / (self.n as f64 + 1.0)) * self.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - self.c_c) + &y_w * (h * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(self.n, self.n);
        for (w, &i) in self.weights.iter().zip(&order) {
            rank_mu += &ys[i] * ys[i].transpose() * *w;
        }
        let rank_one = &self.p_c * self.p_c.transpose() + &self.cov * ((1.0 - h) * self.c_c * (2.0 - self.c_c));
        self.cov = &self.cov * (1.0 - self.c1 - self.c_mu) + rank_one * self.c1 + rank_mu * self.c_mu;
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        self.sigma *= ((self.c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();

        let eig = SymmetricEigen::new(self.cov.clone());
        self.basis = eig.eigenvectors;
        self.scales = eig.eigenvalues.map(|v| v.max(1e-300).sqrt());
        self.recent.push(values[order[0]]);
    }

    /// Restart triggers: vanishing steps, flat recent history, or an
    /// ill-conditioned covariance.
    fn stagnated(&self) -> bool {
        let max_scale = self.scales.max();
        if !(self.sigma * max_scale > 1e-12 * self.sigma0) || !self.sigma.is_finite() {
            return true;
        }
        let min_scale = self.scales.min();
        if max_scale / min_scale > 1e7 {
            return true;
        }
        let span = 10 + (30 * self.n) / self.lambda;
        if self.recent.len() >= span {
            let tail = &self.recent[self.recent.len() - span..];
            let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
            if hi - lo <= 1e-12 * lo.abs().max(1e-300) || hi == lo {
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(budget: usize, seed: u64) -> CmaesOptions {
        CmaesOptions {
            budget,
            seed,
            ..CmaesOptions::default()
        }
    }

    #[test]
    fn sphere_converges() {
        let r = cmaes_minimize(|x| x.iter().map(|v| v * v).sum(), &[(-3.0, 5.0); 4], &opts(3000, 1)).unwrap();
        assert!(r.best_value < 1e-6, "{}", r.best_value);
        assert_eq!(r.history.len(), 3000);
    }

    #[test]
    fn constant_objective_stays_in_bounds() {
        let b = [(-1.0, 2.0); 3];
        let r = cmaes_minimize(|_| 7.0, &b, &opts(200, 2)).unwrap();
        assert!(r.history.iter().all(|e| e.x.iter().zip(&b).all(|(v, (lo, hi))| lo <= v && v <= hi)));
        assert!(r.best_value >= 7.0);
    }

    #[test]
    fn nan_is_infinite() {
        let r = cmaes_minimize(|x| if x[0] > 0.0 { f64::NAN } else { x[0] * x[0] }, &[(-1.0, 1.0); 2], &opts(100, 3)).unwrap();
        assert!(r.history.iter().any(|e| e.value == f64::INFINITY));
        assert!(r.best_value.is_finite());
    }

    #[test]
    fn seeded_runs_repeat() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + 3.0 * (x[1] + 0.1).powi(2);
        let a = cmaes_minimize(f, &[(-2.0, 2.0); 2], &opts(400, 9)).unwrap();
        let b = cmaes_minimize(f, &[(-2.0, 2.0); 2], &opts(400, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_equal_to_population() {
        let o = CmaesOptions {
            population: Some(4),
            budget: 4,
            ..CmaesOptions::default()
        };
        let r = cmaes_minimize(|x| x[0], &[(0.0, 1.0); 2], &o).unwrap();
        assert_eq!(r.history.len(), 4);
    }

    #[test]
    fn penalty_pushes_inside() {
        // Unconstrained minimum lies outside the box; the clipped corner wins.
        let r = cmaes_minimize(|x| x[0] + x[1], &[(0.0, 1.0); 2], &opts(600, 4)).unwrap();
        assert!(r.best.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn invalid_setups_rejected() {
        assert!(cmaes_minimize(|_| 0.0, &[(0.0, 1.0)], &CmaesOptions { population: Some(3), ..opts(10, 0) }).is_err());
        assert!(cmaes_minimize(|_| 0.0, &[(0.0, 1.0)], &CmaesOptions { population: Some(8), ..opts(4, 0) }).is_err());
        assert!(cmaes_minimize(|_| 0.0, &[(1.0, 1.0)], &opts(10, 0)).is_err());
    }
}
