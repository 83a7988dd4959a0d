//! Dual side of the transport problem.
//!
//! With `Q_ij(α, β, λ) = exp(-α_i - β_j - λ d_ij - 1)` the dual objective is
//!
//! ```text
//! g(α, β, λ) = 1ᵀQ1 + ⟨α, P_X⟩ + ⟨β, P_Y⟩ + λT,
//! ```
//!
//! convex, constant along `(1_M; -1_N; 0)`, and equal to `-Σ Q* log Q*` at
//! the optimum.

pub mod certificate;
pub mod kernel;
pub mod newton;

use nalgebra::DMatrix;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Coupling, DiscreteProblem};

pub use certificate::{certificate, ConvergenceCertificate, GStarSource};
pub use kernel::{hessian_null_dimension, kernel_report, KernelReport};
pub use newton::{newton_from, newton_oracle, NewtonConfig};

/// Default cap on `M + N + 1` for dense Hessians.
pub const DEFAULT_HESSIAN_CAP: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub lam: f64,
}

impl DualPoint {
    /// `α = -log φ - 1/2`, `β = -log ψ - 1/2`.
    pub fn from_coupling(q: &Coupling) -> Self {
        Self {
            alpha: q.log_phi.mapv(|l| -l - 0.5),
            beta: q.log_psi.mapv(|l| -l - 0.5),
            lam: q.lam,
        }
    }

    pub fn to_coupling(&self) -> Coupling {
        Coupling {
            log_phi: self.alpha.mapv(|a| -a - 0.5),
            log_psi: self.beta.mapv(|b| -b - 0.5),
            lam: self.lam,
        }
    }

    #[inline]
    fn log_q(&self, d: f64, i: usize, j: usize) -> f64 {
        -self.alpha[i] - self.beta[j] - self.lam * d - 1.0
    }

    fn check_shape(&self, p: &DiscreteProblem) -> Result<()> {
        if self.alpha.len() != p.m() || self.beta.len() != p.n() {
            return Err(Error::InvalidProblem(format!(
                "dual point has shape ({}, {}), problem is {}×{}",
                self.alpha.len(),
                self.beta.len(),
                p.m(),
                p.n()
            )));
        }
        Ok(())
    }

    /// Flattened `(α, β, λ)`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .chain(self.beta.iter())
            .copied()
            .chain(std::iter::once(self.lam))
            .collect()
    }

    pub fn from_slice(z: &[f64], m: usize, n: usize) -> Self {
        assert_eq!(z.len(), m + n + 1);
        Self {
            alpha: Array1::from(z[..m].to_vec()),
            beta: Array1::from(z[m..m + n].to_vec()),
            lam: z[m + n],
        }
    }
}

/// Row masses, column masses and `⟨D, Q⟩` of `Q(α, β, λ)`.
struct Moments {
    rows: Array1<f64>,
    cols: Array1<f64>,
    dq: f64,
}

fn moments(dp: &DualPoint, p: &DiscreteProblem) -> Result<Moments> {
    dp.check_shape(p)?;
    let mut rows = Array1::zeros(p.m());
    let mut cols = Array1::zeros(p.n());
    let mut dq = 0.0;
    for (i, drow) in p.d.outer_iter().enumerate() {
        let (mut r, mut rd) = (0.0, 0.0);
        for (j, &dij) in drow.iter().enumerate() {
            let q = dp.log_q(dij, i, j).exp();
            r += q;
            rd += q * dij;
            cols[j] += q;
        }
        rows[i] = r;
        dq += rd;
    }
    if !rows.iter().all(|v| v.is_finite()) || !dq.is_finite() {
        return Err(Error::Evaluation(
            "exp overflow in Q(α, β, λ); shift along the gauge direction".into(),
        ));
    }
    Ok(Moments { rows, cols, dq })
}

/// `g(α, β, λ)`.
pub fn dual_objective(dp: &DualPoint, p: &DiscreteProblem) -> Result<f64> {
    let mm = moments(dp, p)?;
    Ok(mm.rows.sum() + dp.alpha.dot(&p.p_x) + dp.beta.dot(&p.p_y) + dp.lam * p.t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualGradient {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub lam: f64,
}

impl DualGradient {
    pub fn max_abs(&self) -> f64 {
        self.alpha
            .iter()
            .chain(self.beta.iter())
            .chain(std::iter::once(&self.lam))
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .chain(self.beta.iter())
            .copied()
            .chain(std::iter::once(self.lam))
            .collect()
    }
}

/// `(P_X - Q1, P_Y - Qᵀ1, T - ⟨D, Q⟩)`.
pub fn dual_gradient(dp: &DualPoint, p: &DiscreteProblem) -> Result<DualGradient> {
    let mm = moments(dp, p)?;
    Ok(DualGradient {
        alpha: &p.p_x - &mm.rows,
        beta: &p.p_y - &mm.cols,
        lam: p.t - mm.dq,
    })
}

/// Objective and gradient from a single pass.
pub fn dual_value_and_gradient(dp: &DualPoint, p: &DiscreteProblem) -> Result<(f64, DualGradient)> {
    let mm = moments(dp, p)?;
    let g = mm.rows.sum() + dp.alpha.dot(&p.p_x) + dp.beta.dot(&p.p_y) + dp.lam * p.t;
    Ok((
        g,
        DualGradient {
            alpha: &p.p_x - &mm.rows,
            beta: &p.p_y - &mm.cols,
            lam: p.t - mm.dq,
        },
    ))
}

/// Dense Hessian of `g`, ordered `(α, β, λ)`.
///
/// ```text
/// [ Diag(Q1)   Q            (D⊙Q)1       ]
/// [ Qᵀ         Diag(Qᵀ1)    (D⊙Q)ᵀ1      ]
/// [ ·          ·            1ᵀ(D⊙D⊙Q)1   ]
/// ```
pub fn dual_hessian(dp: &DualPoint, p: &DiscreteProblem, cap: usize) -> Result<DMatrix<f64>> {
    dp.check_shape(p)?;
    let (m, n) = (p.m(), p.n());
    let size = m + n + 1;
    if size > cap {
        return Err(Error::UnsupportedSize {
            what: "Hessian",
            size,
            cap,
        });
    }
    let mut h = DMatrix::zeros(size, size);
    let l = m + n;
    for (i, drow) in p.d.outer_iter().enumerate() {
        for (j, &dij) in drow.iter().enumerate() {
            let q = dp.log_q(dij, i, j).exp();
            h[(i, i)] += q;
            h[(m + j, m + j)] += q;
            h[(i, m + j)] = q;
            h[(m + j, i)] = q;
            h[(i, l)] += dij * q;
            h[(m + j, l)] += dij * q;
            h[(l, l)] += dij * dij * q;
        }
    }
    for k in 0..l {
        h[(l, k)] = h[(k, l)];
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("exp overflow while assembling the Hessian".into()));
    }
    Ok(h)
}

/// The gauge direction `(1_M; -1_N; 0)`.
pub fn gauge_direction(m: usize, n: usize) -> Vec<f64> {
    let mut v = vec![1.0; m];
    v.extend(std::iter::repeat_n(-1.0, n));
    v.push(0.0);
    v
}

/// Shifts along the gauge direction so that `Σα = Σβ`.
pub fn gauge_normalize(dp: &DualPoint) -> DualPoint {
    let (m, n) = (dp.alpha.len() as f64, dp.beta.len() as f64);
    let s = (dp.beta.sum() - dp.alpha.sum()) / (m + n);
    DualPoint {
        alpha: dp.alpha.mapv(|a| a + s),
        beta: dp.beta.mapv(|b| b - s),
        lam: dp.lam,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarlettDualPoint {
    pub zeta: f64,
    pub a: Array1<f64>,
}

impl ScarlettDualPoint {
    /// `ζ = λ`, `a_i = log φ_i - log P_X(x_i)`.
    pub fn from_coupling(q: &Coupling, p: &DiscreteProblem) -> Self {
        Self {
            zeta: q.lam,
            a: &q.log_phi - &p.p_x.mapv(f64::ln),
        }
    }
}

/// `Σ_ij P_X(x_i) W(y_j|x_i) log[e^{-ζ d_ij + a_i} / Σ_k P_X(x_k) e^{-ζ d_kj + a_k}]`.
///
/// A lower bound on the LM rate for every `ζ ≥ 0`, tight at the optimum.
pub fn scarlett_dual_value(sp: &ScarlettDualPoint, p: &DiscreteProblem) -> Result<f64> {
    if !(sp.zeta >= 0.0) {
        return Err(Error::InvalidConfig(format!("zeta must be nonnegative, got {}", sp.zeta)));
    }
    if sp.a.len() != p.m() {
        return Err(Error::InvalidProblem("a has the wrong length".into()));
    }
    let w = p
        .w
        .as_ref()
        .ok_or_else(|| Error::Unsupported("the channel matrix W is required".into()))?;
    let log_px = p.p_x.mapv(f64::ln);
    let (m, n) = (p.m(), p.n());

    // log Σ_k P_X(x_k) exp(-ζ d_kj + a_k), per column
    let mut lse = Array1::from_elem(n, f64::NEG_INFINITY);
    for k in 0..m {
        for j in 0..n {
            lse[j] = lse[j].max(log_px[k] + sp.a[k] - sp.zeta * p.d[[k, j]]);
        }
    }
    let mut acc = Array1::<f64>::zeros(n);
    for k in 0..m {
        for j in 0..n {
            acc[j] += (log_px[k] + sp.a[k] - sp.zeta * p.d[[k, j]] - lse[j]).exp();
        }
    }
    let lse = &lse + &acc.mapv(f64::ln);

    let mut total = 0.0;
    for i in 0..m {
        let mut row = 0.0;
        for j in 0..n {
            let pw = w[[i, j]];
            if pw > 0.0 {
                row += pw * (-sp.zeta * p.d[[i, j]] + sp.a[i] - lse[j]);
            }
        }
        total += p.p_x[i] * row;
    }
    Ok(total)
}
