//! One-dimensional interpolants over integer anchor positions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpKind {
    Linear,
    Nearest,
    Slinear,
    Quadratic,
    Cubic,
    Cubicspline,
}

impl InterpKind {
    pub const ALL: [InterpKind; 6] = [
        InterpKind::Linear,
        InterpKind::Nearest,
        InterpKind::Slinear,
        InterpKind::Quadratic,
        InterpKind::Cubic,
        InterpKind::Cubicspline,
    ];

    /// Anchors needed on each side of an evaluation point.
    pub fn support(self) -> usize {
        match self {
            InterpKind::Quadratic => 2,
            InterpKind::Cubic => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InterpKind::Linear => "linear",
            InterpKind::Nearest => "nearest",
            InterpKind::Slinear => "slinear",
            InterpKind::Quadratic => "quadratic",
            InterpKind::Cubic => "cubic",
            InterpKind::Cubicspline => "cubicspline",
        }
    }
}

impl fmt::Display for InterpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown interpolation kind `{s}`")))
    }
}

/// Interpolant through `(ts[i], vs[i])`, `ts` strictly increasing.
///
/// `quadratic`/`cubic` fit a Lagrange polynomial through the 3/4 anchors
/// nearest to the query, drawn from 2/3 anchors on each side (ties to the
/// earlier anchor). `cubicspline` is the global natural spline.
#[derive(Debug, Clone)]
pub struct Interpolant {
    kind: InterpKind,
    ts: Vec<f64>,
    vs: Vec<f64>,
    /// Per-segment slopes (`slinear`) or knot second derivatives (`cubicspline`).
    coef: Vec<f64>,
}

impl Interpolant {
    pub fn new(kind: InterpKind, ts: Vec<f64>, vs: Vec<f64>) -> Result<Self> {
        if ts.len() != vs.len() || ts.is_empty() {
            return Err(Error::invalid("interpolant needs matching, nonempty anchors"));
        }
        if ts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("anchor positions must increase strictly"));
        }
        let coef = match kind {
            InterpKind::Slinear => ts
                .windows(2)
                .zip(vs.windows(2))
                .map(|(t, v)| (v[1] - v[0]) / (t[1] - t[0]))
                .collect(),
            InterpKind::Cubicspline => natural_second_derivatives(&ts, &vs),
            _ => Vec::new(),
        };
        Ok(Interpolant { kind, ts, vs, coef })
    }

    pub fn kind(&self) -> InterpKind {
        self.kind
    }

    /// Anchors strictly left of / strictly right of / exactly at `t`.
    fn locate(&self, t: f64) -> (usize, usize, Option<usize>) {
        let left = self.ts.partition_point(|&a| a < t);
        let exact = (left < self.ts.len() && self.ts[left] == t).then_some(left);
        let right_start = left + exact.is_some() as usize;
        (left, self.ts.len() - right_start, exact)
    }

    /// Value at `t`; anchors are reproduced exactly.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let (n_left, n_right, exact) = self.locate(t);
        if let Some(i) = exact {
            return Ok(self.vs[i]);
        }
        let need = self.kind.support();
        if n_left < need || n_right < need {
            return Err(Error::invalid(format!(
                "{} needs {need} anchor(s) on each side of {t}, found {n_left} left and {n_right} right",
                self.kind
            )));
        }
        // `i0`, `i1`: flanking anchors.
        let (i0, i1) = (n_left - 1, n_left);
        let (t0, t1, v0, v1) = (self.ts[i0], self.ts[i1], self.vs[i0], self.vs[i1]);
        Ok(match self.kind {
            InterpKind::Linear => v0 + (v1 - v0) * (t - t0) / (t1 - t0),
            InterpKind::Slinear => v0 + self.coef[i0] * (t - t0),
            InterpKind::Nearest => {
                if t - t0 <= t1 - t {
                    v0
                } else {
                    v1
                }
            }
            InterpKind::Quadratic | InterpKind::Cubic => {
                let pool = (n_left - need)..(n_left + need);
                let mut idx: Vec<usize> = pool.collect();
                // Stable sort keeps the earlier anchor first on distance ties.
                idx.sort_by(|&a, &b| (self.ts[a] - t).abs().total_cmp(&(self.ts[b] - t).abs()));
                idx.truncate(need + 1);
                idx.sort_unstable();
                lagrange(&idx.iter().map(|&i| (self.ts[i], self.vs[i])).collect::<Vec<_>>(), t)
            }
            InterpKind::Cubicspline => {
                let h = t1 - t0;
                let (m0, m1) = (self.coef[i0], self.coef[i1]);
                let (a, b) = ((t1 - t) / h, (t - t0) / h);
                a * v0 + b * v1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
            }
        })
    }
}

fn lagrange(points: &[(f64, f64)], t: f64) -> f64 {
    let mut total = 0.0;
    for (i, &(ti, vi)) in points.iter().enumerate() {
        let mut basis = 1.0;
        for (j, &(tj, _)) in points.iter().enumerate() {
            if i != j {
                basis *= (t - tj) / (ti - tj);
            }
        }
        total += vi * basis;
    }
    total
}

/// Knot second derivatives of the natural cubic spline (zero at both ends),
/// from the tridiagonal continuity system solved by forward elimination.
fn natural_second_derivatives(ts: &[f64], vs: &[f64]) -> Vec<f64> {
    let n = ts.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Interior unknowns m[1..n-1]: sub/diag/super and right-hand side.
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut sup = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for i in 1..n - 1 {
        let (h0, h1) = (ts[i] - ts[i - 1], ts[i + 1] - ts[i]);
        diag[i - 1] = 2.0 * (h0 + h1);
        sup[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((vs[i + 1] - vs[i]) / h1 - (vs[i] - vs[i - 1]) / h0);
    }
    for r in 1..k {
        let sub = ts[r + 1] - ts[r];
        let w = sub / diag[r - 1];
        diag[r] -= w * sup[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for r in (0..k - 1).rev() {
        m[r + 1] = (rhs[r] - sup[r] * m[r + 2]) / diag[r];
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(kind: InterpKind, ts: &[f64], vs: &[f64], t: f64) -> f64 {
        Interpolant::new(kind, ts.to_vec(), vs.to_vec()).unwrap().eval(t).unwrap()
    }

    #[test]
    fn linear_gap() {
        let (ts, vs) = ([0.0, 3.0], [1.0, 4.0]);
        assert_eq!(at(InterpKind::Linear, &ts, &vs, 1.0), 2.0);
        assert_eq!(at(InterpKind::Linear, &ts, &vs, 2.0), 3.0);
        assert_eq!(at(InterpKind::Slinear, &ts, &vs, 1.0), 2.0);
    }

    #[test]
    fn nearest_prefers_earlier_on_ties() {
        let (ts, vs) = ([0.0, 3.0], [1.0, 4.0]);
        assert_eq!(at(InterpKind::Nearest, &ts, &vs, 1.0), 1.0);
        assert_eq!(at(InterpKind::Nearest, &ts, &vs, 2.0), 4.0);
        assert_eq!(at(InterpKind::Nearest, &[0.0, 2.0], &[1.0, 4.0], 1.0), 1.0);
    }

    #[test]
    fn polynomials_reproduce_their_degree() {
        let ts: Vec<f64> = vec![0.0, 1.0, 2.0, 5.0, 6.0, 7.0];
        let quad = |t: f64| 2.0 * t * t - 3.0 * t + 1.0;
        let cube = |t: f64| t * t * t - t;
        let q = at(InterpKind::Quadratic, &ts, &ts.iter().map(|&t| quad(t)).collect::<Vec<_>>(), 3.5);
        let c = at(InterpKind::Cubic, &ts, &ts.iter().map(|&t| cube(t)).collect::<Vec<_>>(), 3.5);
        assert!((q - quad(3.5)).abs() < 1e-10);
        assert!((c - cube(3.5)).abs() < 1e-10);
    }

    #[test]
    fn missing_support_is_reported() {
        let i = Interpolant::new(InterpKind::Cubic, vec![0.0, 1.0, 4.0, 5.0], vec![0.0; 4]).unwrap();
        assert!(i.eval(2.0).is_err());
        let l = Interpolant::new(InterpKind::Linear, vec![1.0, 2.0], vec![0.0; 2]).unwrap();
        assert!(l.eval(0.0).is_err());
        assert!(l.eval(3.0).is_err());
    }

    #[test]
    fn anchors_are_exact() {
        let ts: Vec<f64> = vec![0.0, 1.0, 3.0, 4.0, 7.0, 9.0, 10.0];
        let vs: Vec<f64> = vec![0.1, -0.7, 0.33, 1.9, -2.2, 0.05, 0.6];
        for kind in InterpKind::ALL {
            let i = Interpolant::new(kind, ts.clone(), vs.clone()).unwrap();
            for (t, v) in ts.iter().zip(&vs) {
                assert_eq!(i.eval(*t).unwrap(), *v, "{kind}");
            }
        }
    }

    #[test]
    fn kind_round_trips_through_text() {
        for kind in InterpKind::ALL {
            assert_eq!(kind.name().parse::<InterpKind>().unwrap(), kind);
        }
        assert!("spline".parse::<InterpKind>().is_err());
    }
}
