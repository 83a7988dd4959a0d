//! Generalized mutual information for the decoding metric.
//!
//! ```text
//! GMI = max_{s ≥ 0} Σ_ij P_X(x_i) W(y_j|x_i) log[e^{-s d_ij} / Σ_k P_X(x_k) e^{-s d_kj}]
//! ```
//!
//! The objective is concave in `s`, so a golden-section search suffices.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::DiscreteProblem;

pub const DEFAULT_S_MAX: f64 = 50.0;
const S_TOL: f64 = 1e-10;
const GROWTH_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmiResult {
    pub value_nats: f64,
    pub s_star: f64,
    pub evaluations: usize,
}

/// Precomputed pieces of the objective.
struct Objective<'a> {
    p: &'a DiscreteProblem,
    log_px: Array1<f64>,
    /// `Σ_i P_X(x_i) W(y_j|x_i)`.
    col_weight: Array1<f64>,
    /// `Σ_ij P_X W d`.
    mean_metric: f64,
}

impl<'a> Objective<'a> {
    fn new(p: &'a DiscreteProblem) -> Result<Self> {
        let w = p
            .w
            .as_ref()
            .ok_or_else(|| Error::Unsupported("GMI needs the channel matrix W".into()))?;
        let mut col_weight = Array1::zeros(p.n());
        let mut mean_metric = 0.0;
        for i in 0..p.m() {
            let mut row = 0.0;
            for j in 0..p.n() {
                let pw = p.p_x[i] * w[[i, j]];
                col_weight[j] += pw;
                row += w[[i, j]] * p.d[[i, j]];
            }
            mean_metric += p.p_x[i] * row;
        }
        Ok(Self {
            p,
            log_px: p.p_x.mapv(f64::ln),
            col_weight,
            mean_metric,
        })
    }

    fn eval(&self, s: f64) -> f64 {
        let p = self.p;
        let (m, n) = (p.m(), p.n());
        let mut total = -s * self.mean_metric;
        for j in 0..n {
            let cw = self.col_weight[j];
            if cw == 0.0 {
                continue;
            }
            let top = (0..m)
                .map(|k| self.log_px[k] - s * p.d[[k, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..m).map(|k| (self.log_px[k] - s * p.d[[k, j]] - top).exp()).sum();
            total -= cw * (top + sum.ln());
        }
        total
    }
}

/// The GMI objective at a fixed `s ≥ 0`, in nats.
pub fn gmi_objective(p: &DiscreteProblem, s: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::InvalidConfig(format!("s must be nonnegative, got {s}")));
    }
    Ok(Objective::new(p)?.eval(s))
}

/// Maximizes the GMI objective over `s ∈ [0, 50]`, doubling the bracket when
/// the maximizer sits at its right edge.
pub fn gmi(p: &DiscreteProblem) -> Result<GmiResult> {
    gmi_with(p, DEFAULT_S_MAX)
}

pub fn gmi_with(p: &DiscreteProblem, s_max: f64) -> Result<GmiResult> {
    p.validate()?;
    if !(s_max > 0.0) {
        return Err(Error::InvalidConfig("s_max must be positive".into()));
    }
    let obj = Objective::new(p)?;
    let mut evaluations = 0;
    let mut hi = s_max;
    for _ in 0..=GROWTH_STEPS {
        let (s, v, k) = golden(&obj, 0.0, hi);
        evaluations += k;
        if hi - s > 1e-6 * hi {
            let v0 = obj.eval(0.0);
            evaluations += 1;
            let (s, v) = if v0 > v { (0.0, v0) } else { (s, v) };
            return Ok(GmiResult {
                value_nats: v,
                s_star: s,
                evaluations,
            });
        }
        hi *= 2.0;
    }
    Err(Error::UnboundedBracket { s_max: hi / 2.0 })
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn golden(obj: &Objective<'_>, mut a: f64, mut b: f64) -> (f64, f64, usize) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = obj.eval(c);
    let mut fd = obj.eval(d);
    let mut evals = 2;
    while b - a > S_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = obj.eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = obj.eval(d);
        }
        evals += 1;
    }
    let s = 0.5 * (a + b);
    let v = obj.eval(s);
    (s, v, evals + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn bsc(eps: f64) -> DiscreteProblem {
        let w = array![[1.0 - eps, eps], [eps, 1.0 - eps]];
        let d = w.mapv(|v: f64| -v.ln());
        DiscreteProblem::from_channel(d, array![0.5, 0.5], w).unwrap()
    }

    #[test]
    fn zero_at_origin() {
        let p = bsc(0.1);
        assert!(gmi_objective(&p, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn matched_metric_gives_mutual_information() {
        let eps: f64 = 0.1;
        let p = bsc(eps);
        let h = -(eps * eps.ln() + (1.0 - eps) * (1.0 - eps).ln());
        let mi = 2f64.ln() - h;
        let r = gmi(&p).unwrap();
        assert!((r.value_nats - mi).abs() < 1e-10, "{} vs {mi}", r.value_nats);
        assert!((r.s_star - 1.0).abs() < 1e-4);
    }

    #[test]
    fn scaling_the_metric_rescales_s() {
        let p = bsc(0.2);
        let mut q = p.clone();
        q.d = &p.d * 3.0;
        let a = gmi(&p).unwrap();
        let b = gmi(&q).unwrap();
        assert!((a.value_nats - b.value_nats).abs() < 1e-8);
        assert!((a.s_star / 3.0 - b.s_star).abs() < 1e-6);
    }

    #[test]
    fn unbounded_when_noise_free() {
        // Perfect channel with a metric that separates the inputs: the
        // objective increases toward log 2 as s → ∞.
        let w = Array2::eye(2);
        let d = array![[0.0, 1.0], [1.0, 0.0]];
        let p = DiscreteProblem::from_channel(d, array![0.5, 0.5], w).unwrap();
        assert!(matches!(gmi(&p), Err(Error::UnboundedBracket { .. })));
    }

    #[test]
    fn requires_channel() {
        let p = DiscreteProblem::from_marginals(array![[0.0]], array![1.0], array![1.0], 0.0).unwrap();
        assert!(gmi(&p).is_err());
    }
}
