//! A posteriori sub-linear convergence certificate for a solver run.
//!
//! From the recorded trace we compute
//!
//! ```text
//! M_D = max d,  Δ = max |λ^{ℓ+1} - λ^ℓ|,  L_λ = M_D² e^{Δ M_D},
//! M_λ = sup λ^ℓ / 2,  C_d = e^{-2 M_D M_λ},
//! M₀ = max{M_λ / (τ L_λ), 2 M_D / L_λ},
//! S₀ = max{M₀, -ln(C_d · min{min P_X / max P_X, min P_Y / max P_Y})}
//! ```
//!
//! and check `1/e^{ℓ+1} ≥ 1/e⁰ + (ℓ+1) / (8 S₀² (1 + L_λ))` with
//! `e^ℓ = g^ℓ - g*`. Because the constants use the whole trace, the check is
//! only meaningful after the run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::DiscreteProblem;
use crate::sinkhorn::SolveReport;

/// Dual values this far below `g*` are treated as rounding.
const NEGATIVE_SLACK: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GStarSource {
    NewtonOracle,
    ExtendedSinkhorn,
    Supplied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCertificate {
    pub m_d: f64,
    pub delta: f64,
    pub l_lambda: f64,
    pub m_lambda: f64,
    pub m0: f64,
    pub s0: f64,
    pub e0: f64,
    pub bound_satisfied: bool,
    /// Smallest `1/e^{ℓ+1} - (1/e⁰ + (ℓ+1)/(8S₀²(1+L_λ)))` over iterations
    /// with `e^{ℓ+1} > 0`; `+∞` when every such error has reached zero.
    pub worst_margin: f64,
    pub c_d: f64,
    pub tau: f64,
    pub g_star: f64,
    pub g_star_source: GStarSource,
    /// Largest `max α - min α` / `max β - min β` seen in the trace.
    pub max_alpha_spread: f64,
    pub max_beta_spread: f64,
    /// Whether `S₀` dominates every observed spread.
    pub spreads_bounded: bool,
    /// Index of the first violated iteration, if any.
    pub first_violation: Option<usize>,
}

impl ConvergenceCertificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The per-iteration increment `1 / (8 S₀² (1 + L_λ))`.
    pub fn rate_constant(&self) -> f64 {
        1.0 / (8.0 * self.s0 * self.s0 * (1.0 + self.l_lambda))
    }
}

fn ratio(v: &ndarray::Array1<f64>) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lo / hi
}

/// Builds the certificate for a projected-gradient run.
pub fn certificate(
    report: &SolveReport,
    p: &DiscreteProblem,
    g_star: f64,
    source: GStarSource,
) -> Result<ConvergenceCertificate> {
    let tau = report
        .tau
        .ok_or_else(|| Error::InvalidConfig("certificate needs a run with a projection step size".into()))?;
    if report.residual_trace.is_empty() {
        return Err(Error::InvalidConfig("certificate needs a non-empty trace".into()));
    }

    let m_d = p.max_metric();
    let mut lams = vec![report.initial_lambda];
    lams.extend(report.residual_trace.iter().map(|r| r.lambda));
    let delta = lams.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let l_lambda = m_d * m_d * (delta * m_d).exp();
    let m_lambda = lams.iter().cloned().fold(0.0, f64::max) / 2.0;
    let c_d = (-2.0 * m_d * m_lambda).exp();
    let m0 = (m_lambda / (tau * l_lambda)).max(2.0 * m_d / l_lambda);
    let marg = ratio(&p.p_x).min(ratio(&p.p_y));
    // -ln(C_d · r) written out so that tiny C_d does not underflow.
    let s0 = m0.max(2.0 * m_d * m_lambda - marg.ln());

    let e0 = report.initial_dual_objective - g_star;
    let rate = 1.0 / (8.0 * s0 * s0 * (1.0 + l_lambda));
    let inv = |e: f64| if e > 0.0 { 1.0 / e } else { f64::INFINITY };
    let base = inv(e0);

    let mut worst = f64::INFINITY;
    let mut first_violation = None;
    for (l, row) in report.residual_trace.iter().enumerate() {
        let e = row.dual_objective - g_star;
        if e < -NEGATIVE_SLACK {
            return Err(Error::InconsistentOracle {
                iteration: row.iter,
                error: e,
            });
        }
        if e <= 0.0 {
            continue;
        }
        let margin = inv(e) - (base + (l as f64 + 1.0) * rate);
        if margin < worst {
            worst = margin;
        }
        if margin < 0.0 && first_violation.is_none() {
            first_violation = Some(row.iter);
        }
    }

    let max_alpha_spread = report.residual_trace.iter().map(|r| r.alpha_spread).fold(0.0, f64::max);
    let max_beta_spread = report.residual_trace.iter().map(|r| r.beta_spread).fold(0.0, f64::max);
    Ok(ConvergenceCertificate {
        m_d,
        delta,
        l_lambda,
        m_lambda,
        m0,
        s0,
        e0,
        bound_satisfied: first_violation.is_none(),
        worst_margin: worst,
        c_d,
        tau,
        g_star,
        g_star_source: source,
        max_alpha_spread,
        max_beta_spread,
        spreads_bounded: s0 >= max_alpha_spread && s0 >= max_beta_spread,
        first_violation,
    })
}
