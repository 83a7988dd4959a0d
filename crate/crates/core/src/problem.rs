//! The discrete constrained transport instance and the primal-side evaluations
//! shared by every solver.
//!
//! All logarithms are natural. Rates are converted to bits only at the
//! presentation layer ([`nats_to_bits`]).

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural log of the smallest positive normal `f64`; coupling entries whose
/// log falls below this contribute exactly zero to entropy sums.
pub const LOG_MIN_POSITIVE: f64 = -708.3964185322641;

/// Default cap on `M·N` for materializing a dense coupling.
pub const DEFAULT_MATERIALIZE_CAP: usize = 10_000_000;

pub fn nats_to_bits(x: f64) -> f64 {
    x / std::f64::consts::LN_2
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `Σ_k f(k)` accumulated as `(f(k) + f(n-1-k))` pairs from the outside in.
///
/// The result is bit-identical for `f` and its reversal `k ↦ f(n-1-k)`, which
/// keeps marginals of centrally symmetric problems exactly symmetric.
pub fn mirrored_sum(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..n / 2 {
        acc += f(k) + f(n - 1 - k);
    }
    if n % 2 == 1 {
        acc += f(n / 2);
    }
    acc
}

/// `Σ_ij q(i,j)·d_ij`, row by row.
pub fn metric_expectation(d: ArrayView2<f64>, q: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in d.outer_iter().enumerate() {
        let mut acc = 0.0;
        for (j, &dij) in row.iter().enumerate() {
            acc += q(i, j) * dij;
        }
        total += acc;
    }
    total
}

/// Decoding metric `d`, marginals `P_X`/`P_Y`, optional channel kernel `W`
/// and threshold `T` of the discrete problem
///
/// ```text
/// min Σ Q log Q   s.t.  Q1 = P_X,  Qᵀ1 = P_Y,  ⟨D, Q⟩ ≤ T.
/// ```
#[derive(Clone, Debug)]
pub struct DiscreteProblem {
    pub d: Array2<f64>,
    pub p_x: Array1<f64>,
    pub p_y: Array1<f64>,
    /// Row-stochastic `W(y_j | x_i)`. Instances given only by marginals and a
    /// threshold have none; GMI and the Scarlett dual need it.
    pub w: Option<Array2<f64>>,
    pub t: f64,
    /// Set when the instance is known to satisfy the hypotheses under which
    /// the multiplier equation has a unique root with `F(0) > 0` (centrally
    /// symmetric alphabets, AWGN kernel, decoder matrix identity, channel
    /// matrix with positive-definite quadratic form).
    pub unique_lambda_root: bool,
}

impl DiscreteProblem {
    /// Derives `P_Y = P_Xᵀ W` and `T = Σ P_X W d` from the channel kernel.
    pub fn from_channel(d: Array2<f64>, p_x: Array1<f64>, w: Array2<f64>) -> Result<Self> {
        if w.dim() != d.dim() {
            return Err(Error::InvalidProblem(format!(
                "kernel shape {:?} differs from metric shape {:?}",
                w.dim(),
                d.dim()
            )));
        }
        let p_y = p_x.dot(&w);
        let t = metric_expectation(d.view(), |i, j| p_x[i] * w[[i, j]]);
        let p = Self {
            d,
            p_x,
            p_y,
            w: Some(w),
            t,
            unique_lambda_root: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// An instance given directly by its marginals and threshold.
    pub fn from_marginals(d: Array2<f64>, p_x: Array1<f64>, p_y: Array1<f64>, t: f64) -> Result<Self> {
        let p = Self {
            d,
            p_x,
            p_y,
            w: None,
            t,
            unique_lambda_root: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Replaces the threshold (the LM rate decreases as `T` grows).
    pub fn with_threshold(mut self, t: f64) -> Result<Self> {
        self.t = t;
        self.validate()?;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.p_x.len()
    }

    pub fn n(&self) -> usize {
        self.p_y.len()
    }

    /// `‖D‖∞ = max d_ij`.
    pub fn max_metric(&self) -> f64 {
        self.d.iter().cloned().fold(0.0, f64::max)
    }

    pub fn entropy_x(&self) -> f64 {
        entropy(self.p_x.as_slice().expect("contiguous"))
    }

    pub fn entropy_y(&self) -> f64 {
        entropy(self.p_y.as_slice().expect("contiguous"))
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.d.dim();
        let bad = |msg: String| Err(Error::InvalidProblem(msg));
        if m == 0 || n == 0 {
            return bad("empty metric matrix".into());
        }
        if self.p_x.len() != m || self.p_y.len() != n {
            return bad(format!(
                "marginal lengths ({}, {}) do not match metric shape ({m}, {n})",
                self.p_x.len(),
                self.p_y.len()
            ));
        }
        if let Some(w) = &self.w {
            if w.dim() != (m, n) {
                return bad(format!("kernel shape {:?} differs from ({m}, {n})", w.dim()));
            }
            for (i, row) in w.outer_iter().enumerate() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > 1e-12 || row.iter().any(|&v| !(v >= 0.0)) {
                    return bad(format!("kernel row {i} is not a distribution (sum {s})"));
                }
            }
        }
        if self.d.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return bad("metric entries must be finite and nonnegative".into());
        }
        for (name, marg) in [("P_X", &self.p_x), ("P_Y", &self.p_y)] {
            if marg.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return bad(format!("{name} must be strictly positive"));
            }
            let s = marg.sum();
            if (s - 1.0).abs() > 1e-12 {
                return bad(format!("{name} sums to {s}"));
            }
        }
        if !self.t.is_finite() {
            return bad(format!("threshold {} is not finite", self.t));
        }
        Ok(())
    }

    /// Row-major nested-array JSON snapshot.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ProblemSnapshot::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: ProblemSnapshot = serde_json::from_str(s)?;
        snap.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct ProblemSnapshot {
    d: Vec<Vec<f64>>,
    p_x: Vec<f64>,
    p_y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<Vec<f64>>>,
    t: f64,
    #[serde(default)]
    unique_lambda_root: bool,
}

fn nested(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn unnest(rows: Vec<Vec<f64>>, what: &str) -> Result<Array2<f64>> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidProblem(format!("ragged rows in `{what}`")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((m, n), flat).map_err(|e| Error::InvalidProblem(e.to_string()))
}

impl From<&DiscreteProblem> for ProblemSnapshot {
    fn from(p: &DiscreteProblem) -> Self {
        Self {
            d: nested(&p.d),
            p_x: p.p_x.to_vec(),
            p_y: p.p_y.to_vec(),
            w: p.w.as_ref().map(nested),
            t: p.t,
            unique_lambda_root: p.unique_lambda_root,
        }
    }
}

impl TryFrom<ProblemSnapshot> for DiscreteProblem {
    type Error = Error;

    fn try_from(s: ProblemSnapshot) -> Result<Self> {
        let p = DiscreteProblem {
            d: unnest(s.d, "d")?,
            p_x: Array1::from(s.p_x),
            p_y: Array1::from(s.p_y),
            w: s.w.map(|w| unnest(w, "w")).transpose()?,
            t: s.t,
            unique_lambda_root: s.unique_lambda_root,
        };
        p.validate()?;
        Ok(p)
    }
}

/// A coupling in factored form `Q_ij = φ_i · exp(-λ d_ij) · ψ_j`.
///
/// The scalings are stored as logarithms so that couplings with very
/// large multipliers remain representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub log_phi: Array1<f64>,
    pub log_psi: Array1<f64>,
    pub lam: f64,
}

impl Coupling {
    pub fn from_scalings(phi: &Array1<f64>, psi: &Array1<f64>, lam: f64) -> Self {
        Self {
            log_phi: phi.mapv(f64::ln),
            log_psi: psi.mapv(f64::ln),
            lam,
        }
    }

    /// The product coupling `P_X ⊗ P_Y` with `λ = 0`.
    pub fn product(p: &DiscreteProblem) -> Self {
        Self {
            log_phi: p.p_x.mapv(f64::ln),
            log_psi: p.p_y.mapv(f64::ln),
            lam: 0.0,
        }
    }

    pub fn phi(&self) -> Array1<f64> {
        self.log_phi.mapv(f64::exp)
    }

    pub fn psi(&self) -> Array1<f64> {
        self.log_psi.mapv(f64::exp)
    }

    #[inline]
    pub fn log_entry(&self, d: f64, i: usize, j: usize) -> f64 {
        self.log_phi[i] + self.log_psi[j] - self.lam * d
    }

    fn check_finite(&self) -> Result<()> {
        if !self.lam.is_finite()
            || self.log_phi.iter().any(|v| !v.is_finite())
            || self.log_psi.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Evaluation("non-finite coupling factor".into()));
        }
        Ok(())
    }

    pub fn materialize(&self, p: &DiscreteProblem, cap: usize) -> Result<Array2<f64>> {
        let size = p.m() * p.n();
        if size > cap {
            return Err(Error::UnsupportedSize {
                what: "coupling",
                size,
                cap,
            });
        }
        Ok(Array2::from_shape_fn(p.d.dim(), |(i, j)| {
            self.log_entry(p.d[[i, j]], i, j).exp()
        }))
    }

    /// `Q 1_N`.
    pub fn row_sums(&self, p: &DiscreteProblem) -> Array1<f64> {
        Array1::from_shape_fn(p.m(), |i| {
            p.d.row(i)
                .iter()
                .enumerate()
                .map(|(j, &dij)| self.log_entry(dij, i, j).exp())
                .sum()
        })
    }

    /// `Qᵀ 1_M`.
    pub fn col_sums(&self, p: &DiscreteProblem) -> Array1<f64> {
        let mut out = Array1::zeros(p.n());
        for (i, row) in p.d.outer_iter().enumerate() {
            for (j, &dij) in row.iter().enumerate() {
                out[j] += self.log_entry(dij, i, j).exp();
            }
        }
        out
    }

    /// `⟨D, Q⟩`.
    pub fn expected_metric(&self, p: &DiscreteProblem) -> f64 {
        metric_expectation(p.d.view(), |i, j| self.log_entry(p.d[[i, j]], i, j).exp())
    }
}

/// `Σ_ij Q_ij log Q_ij`, accumulated per row.
pub fn primal_entropy(q: &Coupling, p: &DiscreteProblem) -> Result<f64> {
    q.check_finite()?;
    let mut total = 0.0;
    for (i, row) in p.d.outer_iter().enumerate() {
        let mut acc = 0.0;
        for (j, &dij) in row.iter().enumerate() {
            let lq = q.log_entry(dij, i, j);
            if lq >= LOG_MIN_POSITIVE {
                acc += lq.exp() * lq;
            }
        }
        total += acc;
    }
    Ok(total)
}

/// `D(Q ‖ P_X P_Y) = Σ Q log Q + H(P_X) + H(P_Y)` in nats, valid when `Q`
/// carries the prescribed marginals.
pub fn lm_rate(q: &Coupling, p: &DiscreteProblem) -> Result<f64> {
    Ok(primal_entropy(q, p)? + p.entropy_x() + p.entropy_y())
}

/// `T - ⟨D, Q⟩`; nonnegative means feasible.
pub fn constraint_gap(q: &Coupling, p: &DiscreteProblem) -> f64 {
    p.t - q.expected_metric(p)
}
