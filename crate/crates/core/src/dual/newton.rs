//! Damped Newton method on the dual, used as an independent reference.
//!
//! The constraint `λ ≥ 0` is handled by an active set. With `λ` frozen at
//! zero the minimizer is the product coupling in closed form; if the
//! multiplier gradient there is nonnegative the constraint is inactive and we
//! stop. Otherwise `λ` is released and Newton steps are taken on all of
//! `(α, β, λ)`, each projected orthogonally to the gauge direction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{dual_hessian, dual_value_and_gradient, gauge_direction, gauge_normalize, DualPoint, DEFAULT_HESSIAN_CAP};
use crate::error::{Error, Result};
use crate::problem::{lm_rate, DiscreteProblem};
use crate::sinkhorn::{Residuals, SolveReport, Status, TraceRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    /// Stop when the projected gradient's ∞-norm is at most this.
    pub tol: f64,
    pub max_iters: usize,
    /// Cap on `M + N + 1`.
    pub hessian_cap: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 200,
            hessian_cap: DEFAULT_HESSIAN_CAP,
        }
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const STEP_CAP: f64 = 10.0;

const BLOCK_SWITCH: f64 = 1e-3;

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + it.map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// `argmin_α g` followed by `argmin_β g`, both in closed form.
fn block_minimize(dp: &DualPoint, p: &DiscreteProblem) -> DualPoint {
    let (m, n) = (p.m(), p.n());
    let lam = dp.lam;
    let alpha = ndarray::Array1::from_shape_fn(m, |i| {
        log_sum_exp((0..n).map(|j| -dp.beta[j] - lam * p.d[[i, j]] - 1.0)) - p.p_x[i].ln()
    });
    let beta = ndarray::Array1::from_shape_fn(n, |j| {
        log_sum_exp((0..m).map(|i| -alpha[i] - lam * p.d[[i, j]] - 1.0)) - p.p_y[j].ln()
    });
    DualPoint { alpha, beta, lam }
}

/// Minimizer of the dual with `λ` frozen at `lam = 0`: the product coupling.
fn product_point(p: &DiscreteProblem, lam: f64) -> DualPoint {
    DualPoint {
        alpha: p.p_x.mapv(|v| -v.ln() - 0.5),
        beta: p.p_y.mapv(|v| -v.ln() - 0.5),
        lam,
    }
}

/// Solves the dual to `cfg.tol` from the product coupling.
pub fn newton_oracle(p: &DiscreteProblem, cfg: &NewtonConfig) -> Result<SolveReport> {
    p.validate()?;
    check_size(p, cfg)?;
    let frozen = product_point(p, 0.0);
    let (g0, grad0) = dual_value_and_gradient(&frozen, p)?;
    if grad0.lam >= 0.0 {
        // Constraint inactive: the product coupling is optimal.
        let sol = frozen.to_coupling();
        return Ok(SolveReport {
            lm_rate_nats: lm_rate(&sol, p)?,
            lambda_final: 0.0,
            iterations: 1,
            residual_trace: vec![trace_row(1, &frozen, g0, &grad0, p)?],
            status: Status::Converged,
            failure: None,
            strategy: None,
            tau: None,
            initial_lambda: 0.0,
            initial_dual_objective: g0,
            solution: sol,
        });
    }
    newton_from(p, &frozen, cfg)
}

fn check_size(p: &DiscreteProblem, cfg: &NewtonConfig) -> Result<()> {
    let size = p.m() + p.n() + 1;
    if size > cfg.hessian_cap {
        return Err(Error::UnsupportedSize {
            what: "Hessian",
            size,
            cap: cfg.hessian_cap,
        });
    }
    Ok(())
}

fn trace_row(
    iter: usize,
    dp: &DualPoint,
    g: f64,
    grad: &super::DualGradient,
    p: &DiscreteProblem,
) -> Result<TraceRow> {
    let rate = -g + p.entropy_x() + p.entropy_y();
    let r = Residuals {
        r_phi: grad.alpha.iter().map(|v| v.abs()).sum(),
        r_psi: grad.beta.iter().map(|v| v.abs()).sum(),
        r_lambda: if dp.lam == 0.0 && grad.lam > 0.0 { 0.0 } else { grad.lam.abs() },
    };
    let spread = |v: &ndarray::Array1<f64>| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    Ok(TraceRow {
        iter,
        r_phi: r.r_phi,
        r_psi: r.r_psi,
        r_lambda: r.r_lambda,
        dual_objective: g,
        lm_rate_nats: rate,
        lambda: dp.lam,
        alpha_spread: spread(&dp.alpha),
        beta_spread: spread(&dp.beta),
        f_at_zero: None,
    })
}

/// Newton iterations with `λ` free, from an arbitrary start with `λ ≥ 0`.
pub fn newton_from(p: &DiscreteProblem, start: &DualPoint, cfg: &NewtonConfig) -> Result<SolveReport> {
    p.validate()?;
    check_size(p, cfg)?;
    if !(start.lam >= 0.0) {
        return Err(Error::InvalidConfig("starting λ must be nonnegative".into()));
    }
    let (m, n) = (p.m(), p.n());
    let size = m + n + 1;
    let k = DVector::from_vec(gauge_direction(m, n));
    let k_norm2 = k.norm_squared();

    let mut dp = gauge_normalize(start);
    let (mut g, mut grad) = dual_value_and_gradient(&dp, p)?;
    let initial_dual_objective = g;
    let mut trace = Vec::new();
    let mut status = Status::MaxIters;
    let mut failure = None;

    for it in 1..=cfg.max_iters {
        if grad.max_abs() <= cfg.tol {
            status = Status::Converged;
            break;
        }
        // Far from the optimum damped steps are tiny; exact minimization over
        // α then β repairs the marginals first. Both are descent steps.
        if grad.alpha.iter().chain(grad.beta.iter()).any(|v| v.abs() > BLOCK_SWITCH) {
            dp = block_minimize(&dp, p);
            (g, grad) = dual_value_and_gradient(&dp, p)?;
            if grad.max_abs() <= cfg.tol {
                status = Status::Converged;
                break;
            }
        }
        let h = dual_hessian(&dp, p, cfg.hessian_cap)?;
        let gv = DVector::from_vec(grad.to_vec());
        let mut step = match newton_direction(&h, &gv, m) {
            Some(s) => s,
            None => {
                failure = Some((it, "Newton system could not be factored".to_string()));
                status = Status::NumericalFailure;
                break;
            }
        };
        let kc = step.dot(&k) / k_norm2;
        step.axpy(-kc, &k, 1.0);

        // Far from the optimum the exponential makes raw Newton steps in
        // (α, β) overshoot by the mass ratio; cap their length.
        let scaling_step = step.rows(0, m + n).amax();
        let mut t: f64 = (STEP_CAP / scaling_step).min(1.0);

        // Fraction to the boundary λ = 0.
        let dl = step[size - 1];
        if dl < 0.0 && dp.lam > 0.0 {
            t = t.min(0.995 * dp.lam / -dl);
        } else if dl < 0.0 {
            failure = Some((it, "Newton step leaves λ ≥ 0 at the boundary".to_string()));
            status = Status::NumericalFailure;
            break;
        }

        let slope = gv.dot(&step);
        let z = DVector::from_vec(dp.to_vec());
        let gnorm = grad.max_abs();
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = DualPoint::from_slice((&z + &step * t).as_slice(), m, n);
            if let Ok((gc, gr)) = dual_value_and_gradient(&cand, p) {
                if gc <= g + ARMIJO * t * slope || (gc <= g + 1e-14 * g.abs().max(1.0) && gr.max_abs() <= 0.5 * gnorm) {
                    accepted = Some((cand, gc, gr));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, gc, gr)) => {
                dp = cand;
                g = gc;
                grad = gr;
            }
            None => {
                failure = Some((it, "line search failed to decrease the dual objective".to_string()));
                status = Status::NumericalFailure;
                break;
            }
        }
        dp = gauge_normalize(&dp);
        trace.push(trace_row(it, &dp, g, &grad, p)?);
    }
    if status == Status::MaxIters && grad.max_abs() <= cfg.tol {
        status = Status::Converged;
    }

    let sol = dp.to_coupling();
    Ok(SolveReport {
        lm_rate_nats: lm_rate(&sol, p)?,
        lambda_final: dp.lam,
        iterations: trace.len(),
        residual_trace: trace,
        status,
        failure,
        strategy: None,
        tau: None,
        initial_lambda: start.lam,
        initial_dual_objective,
        solution: sol,
    })
}

/// Solves `H s = -∇g` on the complement of the gauge direction.
///
/// The Hessian is Jacobi-scaled, and the rank-one term `u uᵀ` (with `u` the
/// kernel direction in scaled coordinates) makes it positive definite.
fn newton_direction(h: &DMatrix<f64>, grad: &DVector<f64>, m: usize) -> Option<DVector<f64>> {
    let size = h.nrows();
    let diag: Vec<f64> = (0..size).map(|i| h[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let mut hs = h.clone();
    for i in 0..size {
        for j in 0..size {
            hs[(i, j)] /= diag[i] * diag[j];
        }
    }
    // Kernel of H is k = (1; -1; 0); in scaled coordinates it is diag·k.
    let mut u = DVector::zeros(size);
    for i in 0..size - 1 {
        u[i] = if i < m { diag[i] } else { -diag[i] };
    }
    u /= u.norm();
    hs += &u * u.transpose();
    let rhs = DVector::from_fn(size, |i, _| -grad[i] / diag[i]);
    let mut ridge = 0.0;
    for _ in 0..6 {
        let mut a = hs.clone();
        for i in 0..size {
            a[(i, i)] += ridge;
        }
        if let Some(ch) = a.cholesky() {
            let y = ch.solve(&rhs);
            if y.iter().all(|v| v.is_finite()) {
                return Some(DVector::from_fn(size, |i, _| y[i] / diag[i]));
            }
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
    }
    None
}
