//! Sinkhorn-type solver for the capacity-constrained transport problem.
//!
//! Each iteration refreshes `Λ = exp(-λD)`, rescales the rows (`φ`) and then
//! the columns (`ψ`, using the new `φ`), and finally moves the multiplier `λ`
//! either by a projected gradient step or by solving `F(λ; φ, ψ) = 0`, where
//!
//! ```text
//! F(λ; φ, ψ) = Σ_ij φ_i ψ_j d_ij exp(-λ d_ij) - T
//! ```
//!
//! is decreasing in `λ` and equals `-∂g/∂λ` for the dual objective `g`.
//!
//! Scalings are held as logarithms. While `λ·max d` and the log-scalings are
//! moderate the reductions run on a cached `Λ` matrix; beyond that (or when a
//! denominator underflows) they switch to max-shifted log-sum-exp reductions.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dual::{dual_objective, DualPoint};
use crate::error::{Error, Result};
use crate::problem::{lm_rate, Coupling, DiscreteProblem};

/// Exponents below this trigger the log-domain reductions.
const EXPONENT_LIMIT: f64 = 700.0;
const ROOT_REL_TOL: f64 = 1e-13;
const ROOT_BRACKET_CAP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStrategy {
    /// `λ ← [λ + τ F(λ)]₊`.
    GradientProjection,
    /// `λ ← root of F(·; φ, ψ)` on `[0, ∞)`, or `0` if `F(0) ≤ 0`.
    RootFind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDomain {
    /// Never leave the `Λ`-matrix path; an underflowing denominator is a
    /// numerical failure.
    Off,
    /// Switch to log-sum-exp reductions when exponents get extreme.
    Fallback,
    /// Always use log-sum-exp reductions.
    Always,
}

/// Newton polishing on `(α, λ)` with `β` eliminated by the exact column
/// update. Plain scaling has very slow modes when the kernel is close to
/// block diagonal (large `λ`, well separated inputs); the semi-dual Hessian
/// resolves them directly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Acceleration {
    Off,
    /// Switch from scaling to Newton once `max(r_φ, r_ψ, r_λ) ≤ switch_below`,
    /// or once the residual has failed to halve over the last
    /// [`STALL_WINDOW`] iterations.
    SemiDualNewton { switch_below: f64 },
}

pub const STALL_WINDOW: usize = 50;

impl Acceleration {
    pub fn semidual() -> Self {
        Acceleration::SemiDualNewton { switch_below: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Threshold on `max(r_φ, r_ψ, r_λ)`.
    pub tol: f64,
    pub lambda_strategy: LambdaStrategy,
    /// Projection step size; `None` means `1 / (max d)²`.
    pub tau: Option<f64>,
    pub lambda_init: f64,
    pub log_domain: LogDomain,
    /// Optional Newton steps on the semi-dual once the residual is small.
    pub acceleration: Acceleration,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
            lambda_strategy: LambdaStrategy::GradientProjection,
            tau: None,
            lambda_init: 1.0,
            log_domain: LogDomain::Fallback,
            acceleration: Acceleration::Off,
        }
    }
}

impl SolverConfig {
    /// Defaults, with root finding selected when the instance guarantees a
    /// unique multiplier root.
    pub fn for_problem(p: &DiscreteProblem) -> Self {
        Self {
            lambda_strategy: if p.unique_lambda_root {
                LambdaStrategy::RootFind
            } else {
                LambdaStrategy::GradientProjection
            },
            ..Self::default()
        }
    }

    pub fn with_strategy(mut self, s: LambdaStrategy) -> Self {
        self.lambda_strategy = s;
        self
    }

    pub fn resolved_tau(&self, p: &DiscreteProblem) -> f64 {
        self.tau.unwrap_or_else(|| default_tau(p))
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidConfig("tau must be positive".into()));
            }
        }
        if let Acceleration::SemiDualNewton { switch_below } = self.acceleration {
            if !(switch_below > 0.0) {
                return Err(Error::InvalidConfig("acceleration switch threshold must be positive".into()));
            }
        }
        if !(self.lambda_init >= 0.0) || !self.lambda_init.is_finite() {
            return Err(Error::InvalidConfig("lambda_init must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `1 / M_D²`, the step that keeps the projected update within the
/// smoothness bound of the dual in `λ`.
pub fn default_tau(p: &DiscreteProblem) -> f64 {
    let md = p.max_metric();
    if md > 0.0 {
        1.0 / (md * md)
    } else {
        1.0
    }
}

/// `1 / E[d²]` under the joint law (the product of marginals when `W` is
/// absent). Much larger than [`default_tau`] on wide grids, and in practice
/// the projected update then converges at the pace of root finding.
pub fn moment_tau(p: &DiscreteProblem) -> f64 {
    let (m, n) = (p.m(), p.n());
    let mut e2 = 0.0;
    for i in 0..m {
        for j in 0..n {
            let q = match &p.w {
                Some(w) => p.p_x[i] * w[[i, j]],
                None => p.p_x[i] * p.p_y[j],
            };
            e2 += q * p.d[[i, j]] * p.d[[i, j]];
        }
    }
    if e2 > 0.0 {
        1.0 / e2
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub r_phi: f64,
    pub r_psi: f64,
    pub r_lambda: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.r_phi.max(self.r_psi).max(self.r_lambda)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornState {
    pub log_phi: Array1<f64>,
    pub log_psi: Array1<f64>,
    pub lam: f64,
    pub iter: usize,
    pub residuals: Residuals,
}

impl SinkhornState {
    /// `φ = 1_M`, `ψ = 1_N`, `λ = λ₀`.
    pub fn initial(p: &DiscreteProblem, lam: f64) -> Self {
        Self {
            log_phi: Array1::zeros(p.m()),
            log_psi: Array1::zeros(p.n()),
            lam,
            iter: 0,
            residuals: Residuals::default(),
        }
    }

    pub fn phi(&self) -> Array1<f64> {
        self.log_phi.mapv(f64::exp)
    }

    pub fn psi(&self) -> Array1<f64> {
        self.log_psi.mapv(f64::exp)
    }

    pub fn coupling(&self) -> Coupling {
        Coupling {
            log_phi: self.log_phi.clone(),
            log_psi: self.log_psi.clone(),
            lam: self.lam,
        }
    }

    pub fn dual_point(&self) -> DualPoint {
        DualPoint::from_coupling(&self.coupling())
    }

    fn check(&self, iteration: usize) -> Result<()> {
        let ok = self.lam.is_finite()
            && self.lam >= 0.0
            && self.log_phi.iter().all(|v| v.is_finite())
            && self.log_psi.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NumericalFailure {
                iteration,
                reason: "scaling vectors left the positive finite range".into(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub r_phi: f64,
    pub r_psi: f64,
    pub r_lambda: f64,
    pub dual_objective: f64,
    pub lm_rate_nats: f64,
    pub lambda: f64,
    /// `max α - min α` of the iterate.
    pub alpha_spread: f64,
    pub beta_spread: f64,
    /// `F(0; φ, ψ)` seen by the root finder; `None` for projection steps.
    pub f_at_zero: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub solution: Coupling,
    pub lm_rate_nats: f64,
    pub lambda_final: f64,
    pub iterations: usize,
    pub residual_trace: Vec<TraceRow>,
    pub status: Status,
    /// Iteration index and reason when `status` is `NumericalFailure`.
    pub failure: Option<(usize, String)>,
    pub strategy: Option<LambdaStrategy>,
    pub tau: Option<f64>,
    pub initial_lambda: f64,
    /// Dual objective at the initial point.
    pub initial_dual_objective: f64,
}

impl SolveReport {
    pub fn final_residuals(&self) -> Residuals {
        self.residual_trace
            .last()
            .map(|r| Residuals {
                r_phi: r.r_phi,
                r_psi: r.r_psi,
                r_lambda: r.r_lambda,
            })
            .unwrap_or_default()
    }

    pub fn dual_point(&self) -> DualPoint {
        DualPoint::from_coupling(&self.solution)
    }

    /// Turns a numerical failure into an error.
    pub fn into_result(self) -> Result<Self> {
        match &self.failure {
            Some((iteration, reason)) => Err(Error::NumericalFailure {
                iteration: *iteration,
                reason: reason.clone(),
            }),
            None => Ok(self),
        }
    }

    /// CSV with columns `iter, r_phi, r_psi, r_lambda, dual_objective,
    /// lm_rate_nats`, 17 significant digits.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iter,r_phi,r_psi,r_lambda,dual_objective,lm_rate_nats\n");
        for r in &self.residual_trace {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter,
                fmt17(r.r_phi),
                fmt17(r.r_psi),
                fmt17(r.r_lambda),
                fmt17(r.dual_objective),
                fmt17(r.lm_rate_nats)
            ));
        }
        s
    }
}

/// Lossless float formatting used by every CSV artifact.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Reductions of the scaled kernel at a fixed multiplier.
struct Kernel<'a> {
    p: &'a DiscreteProblem,
    log_d: Array2<f64>,
    log_p_x: Array1<f64>,
    log_p_y: Array1<f64>,
    max_d: f64,
    policy: LogDomain,
    /// `exp(-λD)` for `cached_lam`.
    lambda_mat: Option<(f64, Array2<f64>)>,
}

/// Row or column masses of `Q` together with the metric-weighted totals.
struct Masses {
    /// `log Σ_j Λ_ij ψ_j` (rows) or `log Σ_i Λ_ij φ_i` (columns).
    log_sums: Array1<f64>,
    /// `Σ_ij φ_i Λ_ij ψ_j d_ij`.
    weighted: f64,
}

impl<'a> Kernel<'a> {
    fn new(p: &'a DiscreteProblem, policy: LogDomain) -> Self {
        Self {
            p,
            log_d: p.d.mapv(f64::ln),
            log_p_x: p.p_x.mapv(f64::ln),
            log_p_y: p.p_y.mapv(f64::ln),
            max_d: p.max_metric(),
            policy,
            lambda_mat: None,
        }
    }

    fn use_log(&self, lam: f64, a: &Array1<f64>, b: &Array1<f64>) -> bool {
        match self.policy {
            LogDomain::Always => true,
            LogDomain::Off => false,
            LogDomain::Fallback => {
                lam * self.max_d > EXPONENT_LIMIT
                    || a.iter().chain(b.iter()).any(|v| v.abs() > EXPONENT_LIMIT)
            }
        }
    }

    fn lambda_matrix(&mut self, lam: f64) -> &Array2<f64> {
        let stale = !matches!(&self.lambda_mat, Some((l, _)) if *l == lam);
        if stale {
            self.lambda_mat = Some((lam, self.p.d.mapv(|d| (-lam * d).exp())));
        }
        &self.lambda_mat.as_ref().unwrap().1
    }

    /// Row reductions against `ψ`; `with_phi` also accumulates `⟨D, Q⟩`.
    fn rows(&mut self, lam: f64, log_phi: &Array1<f64>, log_psi: &Array1<f64>, log: bool) -> Masses {
        let p = self.p;
        let (m, _) = p.d.dim();
        let mut log_sums = Array1::zeros(m);
        let mut weighted = 0.0;
        if log {
            for i in 0..m {
                let d = p.d.row(i);
                let top = d
                    .iter()
                    .zip(log_psi.iter())
                    .map(|(&dij, &lp)| lp - lam * dij)
                    .fold(f64::NEG_INFINITY, f64::max);
                let (mut s, mut sd) = (0.0, 0.0);
                for (&dij, &lp) in d.iter().zip(log_psi.iter()) {
                    let e = (lp - lam * dij - top).exp();
                    s += e;
                    sd += e * dij;
                }
                log_sums[i] = top + s.ln();
                weighted += (log_phi[i] + top).exp() * sd;
            }
        } else {
            let psi = log_psi.mapv(f64::exp);
            let phi = log_phi.mapv(f64::exp);
            let lm = self.lambda_matrix(lam);
            for i in 0..m {
                let (mut s, mut sd) = (0.0, 0.0);
                for ((&l, &ps), &dij) in lm.row(i).iter().zip(psi.iter()).zip(p.d.row(i).iter()) {
                    let v = l * ps;
                    s += v;
                    sd += v * dij;
                }
                log_sums[i] = s.ln();
                weighted += phi[i] * sd;
            }
        }
        Masses { log_sums, weighted }
    }

    /// `log Σ_i Λ_ij φ_i` for every column.
    fn cols(&mut self, lam: f64, log_phi: &Array1<f64>, log: bool) -> Array1<f64> {
        let p = self.p;
        let (m, n) = p.d.dim();
        if log {
            let mut top = Array1::from_elem(n, f64::NEG_INFINITY);
            for i in 0..m {
                for (j, &dij) in p.d.row(i).iter().enumerate() {
                    let v = log_phi[i] - lam * dij;
                    if v > top[j] {
                        top[j] = v;
                    }
                }
            }
            let mut s = Array1::<f64>::zeros(n);
            for i in 0..m {
                for (j, &dij) in p.d.row(i).iter().enumerate() {
                    s[j] += (log_phi[i] - lam * dij - top[j]).exp();
                }
            }
            Array1::from_shape_fn(n, |j| top[j] + s[j].ln())
        } else {
            let phi = log_phi.mapv(f64::exp);
            let lm = self.lambda_matrix(lam);
            let mut s = Array1::<f64>::zeros(n);
            for i in 0..m {
                let f = phi[i];
                for (acc, &l) in s.iter_mut().zip(lm.row(i).iter()) {
                    *acc += l * f;
                }
            }
            s.mapv(f64::ln)
        }
    }

    /// `log Σ_ij φ_i ψ_j d_ij e^{-λ d_ij} - log T` and its derivative in `λ`.
    fn log_ratio(&self, lam: f64, log_phi: &Array1<f64>, log_psi: &Array1<f64>) -> (f64, f64) {
        let p = self.p;
        let mut top = f64::NEG_INFINITY;
        for (i, row) in self.log_d.outer_iter().enumerate() {
            for (j, &ld) in row.iter().enumerate() {
                let v = log_phi[i] + log_psi[j] + ld - lam * p.d[[i, j]];
                if v > top {
                    top = v;
                }
            }
        }
        if top == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, 0.0);
        }
        let (mut s, mut sd) = (0.0, 0.0);
        for (i, row) in self.log_d.outer_iter().enumerate() {
            for (j, &ld) in row.iter().enumerate() {
                let dij = p.d[[i, j]];
                let e = (log_phi[i] + log_psi[j] + ld - lam * dij - top).exp();
                s += e;
                sd += e * dij;
            }
        }
        (top + s.ln() - p.t.ln(), -sd / s)
    }

    fn phi_update(&mut self, st: &mut SinkhornState) -> Result<()> {
        let log = self.use_log(st.lam, &st.log_phi, &st.log_psi);
        let mut r = self.rows(st.lam, &st.log_phi, &st.log_psi, log);
        if !log && r.log_sums.iter().any(|v| !v.is_finite()) && self.policy != LogDomain::Off {
            r = self.rows(st.lam, &st.log_phi, &st.log_psi, true);
        }
        if r.log_sums.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: st.iter,
                reason: "row denominator Σ_j Λ_ij ψ_j underflowed".into(),
            });
        }
        st.log_phi = &self.log_p_x - &r.log_sums;
        Ok(())
    }

    fn psi_update(&mut self, st: &mut SinkhornState) -> Result<()> {
        let log = self.use_log(st.lam, &st.log_phi, &st.log_psi);
        let mut c = self.cols(st.lam, &st.log_phi, log);
        if !log && c.iter().any(|v| !v.is_finite()) && self.policy != LogDomain::Off {
            c = self.cols(st.lam, &st.log_phi, true);
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: st.iter,
                reason: "column denominator Σ_i Λ_ij φ_i underflowed".into(),
            });
        }
        st.log_psi = &self.log_p_y - &c;
        Ok(())
    }

    /// `F(λ; φ, ψ)` at the state's own multiplier.
    fn multiplier_residual(&mut self, st: &SinkhornState) -> f64 {
        let log = self.use_log(st.lam, &st.log_phi, &st.log_psi);
        self.rows(st.lam, &st.log_phi, &st.log_psi, log).weighted - self.p.t
    }

    fn project(&mut self, st: &mut SinkhornState, tau: f64) {
        let f = self.multiplier_residual(st);
        st.lam = (st.lam + tau * f).max(0.0);
    }

    /// Returns `F(0; φ, ψ)` as seen by the bracketing step.
    fn root_find(&mut self, st: &mut SinkhornState) -> Result<f64> {
        let t = self.p.t;
        if !(t > 0.0) {
            return Err(Error::NumericalFailure {
                iteration: st.iter,
                reason: format!("root finding needs T > 0, got {t}"),
            });
        }
        let eval = |lam: f64| self.log_ratio(lam, &st.log_phi, &st.log_psi);
        let (g0, _) = eval(0.0);
        let f0 = t * g0.exp_m1();
        if g0 <= 0.0 {
            st.lam = 0.0;
            return Ok(f0);
        }

        let mut lo = 0.0;
        let mut hi = (2.0 * st.lam).max(1.0);
        loop {
            let (g, _) = eval(hi);
            if g <= 0.0 {
                break;
            }
            lo = hi;
            hi *= 2.0;
            if hi > ROOT_BRACKET_CAP {
                return Err(Error::NumericalFailure {
                    iteration: st.iter,
                    reason: format!("multiplier root not bracketed below {ROOT_BRACKET_CAP:e}"),
                });
            }
        }

        let mut x = if st.lam > lo && st.lam < hi { st.lam } else { 0.5 * (lo + hi) };
        for _ in 0..200 {
            let (g, dg) = eval(x);
            if g.exp_m1().abs() <= ROOT_REL_TOL {
                break;
            }
            if g > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - g / dg;
            x = if dg < 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
        }
        st.lam = x;
        Ok(f0)
    }

    /// Semi-dual value `min_β g(α, β, λ)` for `log φ = -α - 1/2`, together
    /// with the minimizing `log ψ`.
    fn semidual_value(&mut self, log_phi: &Array1<f64>, lam: f64) -> Option<(f64, Array1<f64>)> {
        let p = self.p;
        let cols = self.cols(lam, log_phi, true);
        if cols.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let log_psi = &self.log_p_y - &cols;
        // With exact columns 1ᵀQ1 = 1.
        let ax: f64 = log_phi.iter().zip(p.p_x.iter()).map(|(l, q)| (-l - 0.5) * q).sum();
        let by: f64 = log_psi.iter().zip(p.p_y.iter()).map(|(l, q)| (-l - 0.5) * q).sum();
        let v = 1.0 + ax + by + lam * p.t;
        v.is_finite().then_some((v, log_psi))
    }

    /// One damped Newton step on `(α, λ)` with `β` at its exact minimizer.
    ///
    /// The reduced Hessian is assembled cancellation-free: the `α` block is
    /// the Laplacian of `w_ik = Σ_j Q_ij Q_kj / (Qᵀ1)_j`, the border is
    /// `Σ_j Q_ij (d_ij - d̄_j)` and the corner `Σ_ij Q_ij (d_ij - d̄_j)²`,
    /// where `d̄_j` is the `Q`-weighted column mean of `d`.
    fn semidual_newton(&mut self, st: &mut SinkhornState) -> Result<()> {
        let p = self.p;
        let (m, n) = p.d.dim();
        let fail = |reason: &str| Error::NumericalFailure {
            iteration: st.iter,
            reason: reason.to_string(),
        };
        let (g0, log_psi) = self
            .semidual_value(&st.log_phi, st.lam)
            .ok_or_else(|| fail("semi-dual value is not finite"))?;
        st.log_psi = log_psi;

        let mut w = DMatrix::<f64>::zeros(m, m);
        let mut border = vec![0.0; m];
        let mut corner = 0.0;
        let mut rows = vec![0.0; m];
        let mut dq = 0.0;
        let mut q = vec![0.0; m];
        for j in 0..n {
            let mut s = 0.0;
            let mut sd = 0.0;
            for i in 0..m {
                let dij = p.d[[i, j]];
                let v = (st.log_phi[i] + st.log_psi[j] - st.lam * dij).exp();
                q[i] = v;
                s += v;
                sd += v * dij;
            }
            if s == 0.0 {
                continue;
            }
            let dbar = sd / s;
            dq += sd;
            for i in 0..m {
                let qi = q[i];
                if qi == 0.0 {
                    continue;
                }
                rows[i] += qi;
                let dev = p.d[[i, j]] - dbar;
                border[i] += qi * dev;
                corner += qi * dev * dev;
                let a = qi / s;
                for k in (i + 1)..m {
                    w[(i, k)] += a * q[k];
                }
            }
        }
        let size = m + 1;
        let mut h = DMatrix::<f64>::zeros(size, size);
        for i in 0..m {
            for k in (i + 1)..m {
                h[(i, k)] = -w[(i, k)];
                h[(k, i)] = -w[(i, k)];
            }
        }
        for i in 0..m {
            let off: f64 = (0..m).filter(|&k| k != i).map(|k| -h[(i, k)]).sum();
            h[(i, i)] = off;
            h[(i, m)] = border[i];
            h[(m, i)] = border[i];
        }
        h[(m, m)] = corner;

        // Gradient of g in (α, λ).
        let mut grad = DVector::<f64>::zeros(size);
        for i in 0..m {
            grad[i] = p.p_x[i] - rows[i];
        }
        grad[m] = p.t - dq;
        let pinned = st.lam == 0.0 && grad[m] > 0.0;
        if pinned {
            // λ stays on its bound; drop it from the system.
            grad[m] = 0.0;
            for k in 0..size {
                h[(m, k)] = 0.0;
                h[(k, m)] = 0.0;
            }
            h[(m, m)] = 1.0;
        }

        let mut step = semidual_direction(&h, &grad, m).ok_or_else(|| fail("semi-dual Newton system is singular"))?;
        // The α-kernel direction 1_M changes nothing; remove it.
        let mean = step.rows(0, m).sum() / m as f64;
        for i in 0..m {
            step[i] -= mean;
        }
        let cap = step.rows(0, m).amax();
        let mut t: f64 = if cap > 10.0 { 10.0 / cap } else { 1.0 };
        let slope = grad.dot(&step);
        let gnorm = grad.amax();
        let alpha: Array1<f64> = st.log_phi.mapv(|l| -l - 0.5);
        for _ in 0..60 {
            let cand_alpha = Array1::from_shape_fn(m, |i| alpha[i] + t * step[i]);
            let cand_lam = (st.lam + t * step[m]).max(0.0);
            let cand_phi = cand_alpha.mapv(|a| -a - 0.5);
            if let Some((gc, lpsi)) = self.semidual_value(&cand_phi, cand_lam) {
                let armijo = gc <= g0 + 1e-4 * t * slope;
                let flat = gc <= g0 + 1e-14 * g0.abs().max(1.0);
                if armijo || (flat && t < 1.0 / 1024.0) || (flat && gnorm < 1e-8) {
                    st.log_phi = cand_phi;
                    st.lam = cand_lam;
                    st.log_psi = lpsi;
                    return Ok(());
                }
            }
            t *= 0.5;
        }
        Err(fail("semi-dual line search failed"))
    }

    /// Residuals, dual objective and primal rate at the state as it stands.
    fn evaluate(&mut self, st: &SinkhornState) -> (Residuals, f64, f64) {
        let p = self.p;
        let log = self.use_log(st.lam, &st.log_phi, &st.log_psi);
        let rows = self.rows(st.lam, &st.log_phi, &st.log_psi, log);
        let cols = self.cols(st.lam, &st.log_phi, log);
        let row_mass = Array1::from_shape_fn(p.m(), |i| (st.log_phi[i] + rows.log_sums[i]).exp());
        let col_mass = Array1::from_shape_fn(p.n(), |j| (st.log_psi[j] + cols[j]).exp());
        let r_phi: f64 = row_mass.iter().zip(p.p_x.iter()).map(|(a, b)| (a - b).abs()).sum();
        let r_psi: f64 = col_mass.iter().zip(p.p_y.iter()).map(|(a, b)| (a - b).abs()).sum();
        let f = rows.weighted - p.t;
        let r_lambda = if st.lam == 0.0 && f < 0.0 { 0.0 } else { f.abs() };

        // g = 1ᵀQ1 + ⟨α, P_X⟩ + ⟨β, P_Y⟩ + λT with α = -log φ - 1/2
        let mass = row_mass.sum();
        let ax: f64 = st.log_phi.iter().zip(p.p_x.iter()).map(|(l, q)| (-l - 0.5) * q).sum();
        let by: f64 = st.log_psi.iter().zip(p.p_y.iter()).map(|(l, q)| (-l - 0.5) * q).sum();
        let g = mass + ax + by + st.lam * p.t;

        // Σ Q log Q = Σ_i (Q1)_i log φ_i + Σ_j (Qᵀ1)_j log ψ_j - λ⟨D, Q⟩
        let qlogq = row_mass.dot(&st.log_phi) + col_mass.dot(&st.log_psi) - st.lam * rows.weighted;
        let rate = qlogq + p.entropy_x() + p.entropy_y();
        (
            Residuals {
                r_phi,
                r_psi,
                r_lambda,
            },
            g,
            rate,
        )
    }
}

/// Jacobi-scaled solve of `(H + u uᵀ) s = -∇`, with `u` the kernel direction
/// `(1_M; 0)` in scaled coordinates.
fn semidual_direction(h: &DMatrix<f64>, grad: &DVector<f64>, m: usize) -> Option<DVector<f64>> {
    let size = h.nrows();
    let scale: Vec<f64> = (0..size).map(|i| h[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let mut hs = DMatrix::from_fn(size, size, |i, j| h[(i, j)] / (scale[i] * scale[j]));
    let mut u = DVector::from_fn(size, |i, _| if i < m { scale[i] } else { 0.0 });
    u /= u.norm();
    hs += &u * u.transpose();
    let rhs = DVector::from_fn(size, |i, _| -grad[i] / scale[i]);
    let mut ridge = 0.0;
    for _ in 0..6 {
        let mut a = hs.clone();
        for i in 0..size {
            a[(i, i)] += ridge;
        }
        if let Some(ch) = a.cholesky() {
            let y = ch.solve(&rhs);
            if y.iter().all(|v| v.is_finite()) {
                return Some(DVector::from_fn(size, |i, _| y[i] / scale[i]));
            }
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
    }
    None
}

fn spread(v: &Array1<f64>) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// One scaling sweep: rows, then columns against the new rows.
pub fn sinkhorn_step(state: &SinkhornState, p: &DiscreteProblem) -> Result<SinkhornState> {
    sinkhorn_step_with(state, p, LogDomain::Fallback)
}

pub fn sinkhorn_step_with(
    state: &SinkhornState,
    p: &DiscreteProblem,
    policy: LogDomain,
) -> Result<SinkhornState> {
    let mut k = Kernel::new(p, policy);
    let mut st = state.clone();
    k.phi_update(&mut st)?;
    k.psi_update(&mut st)?;
    Ok(st)
}

/// `λ ← max(0, λ + τ F(λ; φ, ψ))`.
pub fn update_lambda_projection(state: &SinkhornState, p: &DiscreteProblem, tau: f64) -> Result<SinkhornState> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    let mut k = Kernel::new(p, LogDomain::Fallback);
    let mut st = state.clone();
    k.project(&mut st, tau);
    Ok(st)
}

/// `λ ←` the root of `F(·; φ, ψ)` on `[0, ∞)`, or `0` when `F(0) ≤ 0`.
pub fn update_lambda_rootfind(state: &SinkhornState, p: &DiscreteProblem) -> Result<SinkhornState> {
    let mut k = Kernel::new(p, LogDomain::Fallback);
    let mut st = state.clone();
    k.root_find(&mut st)?;
    Ok(st)
}

/// `F(λ; φ, ψ)` at the state's multiplier.
pub fn multiplier_residual(state: &SinkhornState, p: &DiscreteProblem) -> f64 {
    Kernel::new(p, LogDomain::Fallback).multiplier_residual(state)
}

/// Marginal and multiplier residuals at the state.
///
/// `r_λ` is `|F(λ)|` except when the projection is pinned (`λ = 0` and
/// `F(0) < 0`), where the constraint is slack and the residual is zero.
pub fn residuals(state: &SinkhornState, p: &DiscreteProblem) -> Residuals {
    Kernel::new(p, LogDomain::Fallback).evaluate(state).0
}

/// Runs the alternating scheme until `max(r_φ, r_ψ, r_λ) ≤ tol` or the
/// iteration budget is spent.
pub fn solve(p: &DiscreteProblem, cfg: &SolverConfig) -> Result<SolveReport> {
    p.validate()?;
    cfg.validate()?;
    let tau = cfg.resolved_tau(p);
    let mut kernel = Kernel::new(p, cfg.log_domain);
    let mut st = SinkhornState::initial(p, cfg.lambda_init);
    let initial_dual_objective = kernel.evaluate(&st).1;

    let mut trace = Vec::with_capacity(cfg.max_iters.min(10_000));
    let mut status = Status::MaxIters;
    let mut failure = None;

    let mut newton = false;
    for it in 1..=cfg.max_iters {
        st.iter = it;
        let step = (|| -> Result<Option<f64>> {
            if newton {
                kernel.semidual_newton(&mut st)?;
                st.check(st.iter)?;
                return Ok(None);
            }
            kernel.phi_update(&mut st)?;
            kernel.psi_update(&mut st)?;
            let f0 = match cfg.lambda_strategy {
                LambdaStrategy::GradientProjection => {
                    kernel.project(&mut st, tau);
                    None
                }
                LambdaStrategy::RootFind => Some(kernel.root_find(&mut st)?),
            };
            st.check(st.iter)?;
            Ok(f0)
        })();
        let f_at_zero = match step {
            Ok(f0) => f0,
            Err(Error::NumericalFailure { iteration, reason }) => {
                status = Status::NumericalFailure;
                failure = Some((iteration, reason));
                break;
            }
            Err(e) => return Err(e),
        };

        let (res, g, rate) = kernel.evaluate(&st);
        st.residuals = res;
        trace.push(TraceRow {
            iter: it,
            r_phi: res.r_phi,
            r_psi: res.r_psi,
            r_lambda: res.r_lambda,
            dual_objective: g,
            lm_rate_nats: rate,
            lambda: st.lam,
            alpha_spread: spread(&st.log_phi),
            beta_spread: spread(&st.log_psi),
            f_at_zero,
        });
        if !res.max().is_finite() {
            status = Status::NumericalFailure;
            failure = Some((it, "non-finite residual".into()));
            break;
        }
        if res.max() <= cfg.tol {
            status = Status::Converged;
            break;
        }
        if let Acceleration::SemiDualNewton { switch_below } = cfg.acceleration {
            let stalled = it > STALL_WINDOW && {
                let old = &trace[it - 1 - STALL_WINDOW];
                res.max() > 0.5 * old.r_phi.max(old.r_psi).max(old.r_lambda)
            };
            newton |= res.max() <= switch_below || stalled;
        }
    }

    let solution = st.coupling();
    let lm = if failure.is_some() {
        f64::NAN
    } else {
        lm_rate(&solution, p)?
    };
    Ok(SolveReport {
        lambda_final: st.lam,
        lm_rate_nats: lm,
        iterations: trace.len(),
        residual_trace: trace,
        status,
        failure,
        strategy: Some(cfg.lambda_strategy),
        tau: (cfg.lambda_strategy == LambdaStrategy::GradientProjection).then_some(tau),
        initial_lambda: cfg.lambda_init,
        initial_dual_objective,
        solution,
    })
}

/// Dual objective of a solver state, for callers that track descent.
pub fn state_dual_objective(state: &SinkhornState, p: &DiscreteProblem) -> Result<f64> {
    dual_objective(&state.dual_point(), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn uniform2(d: Array2<f64>, t: f64) -> DiscreteProblem {
        DiscreteProblem::from_marginals(d, array![0.5, 0.5], array![0.5, 0.5], t).unwrap()
    }

    #[test]
    fn constant_metric_step_closed_form() {
        // d ≡ 1, λ = 1: Λ = e⁻¹ everywhere.
        // φ = (1/2) / (2 e⁻¹) = e/4,  ψ = (1/2) / (2 e⁻¹ · e/4) = 1.
        let p = uniform2(array![[1.0, 1.0], [1.0, 1.0]], 1.0);
        let st = SinkhornState::initial(&p, 1.0);
        for policy in [LogDomain::Off, LogDomain::Always] {
            let next = sinkhorn_step_with(&st, &p, policy).unwrap();
            let e = std::f64::consts::E;
            for v in next.phi().iter() {
                assert!((v - e / 4.0).abs() < 1e-15);
            }
            for v in next.psi().iter() {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn row_residual_vanishes_before_column_update() {
        let p = uniform2(array![[0.0, 2.0], [1.5, 0.3]], 0.5);
        let mut k = Kernel::new(&p, LogDomain::Fallback);
        let mut st = SinkhornState::initial(&p, 1.0);
        k.phi_update(&mut st).unwrap();
        let (res, _, _) = k.evaluate(&st);
        assert!(res.r_phi < 1e-16);
        k.psi_update(&mut st).unwrap();
        let (res, _, _) = k.evaluate(&st);
        assert!(res.r_psi < 1e-16);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let p = uniform2(array![[0.0, 2.0], [2.0, 0.0]], 0.6);
        let cfg = SolverConfig::default().with_strategy(LambdaStrategy::RootFind);
        let rep = solve(&p, &cfg).unwrap();
        assert_eq!(rep.status, Status::Converged);
        let st = SinkhornState {
            log_phi: rep.solution.log_phi.clone(),
            log_psi: rep.solution.log_psi.clone(),
            lam: rep.lambda_final,
            iter: 0,
            residuals: Residuals::default(),
        };
        let next = sinkhorn_step(&st, &p).unwrap();
        for (a, b) in next.phi().iter().zip(st.phi().iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs());
        }
        for (a, b) in next.psi().iter().zip(st.psi().iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs());
        }
    }

    #[test]
    fn projection_update_signs() {
        let p = uniform2(array![[0.0, 1.0], [1.0, 0.0]], 0.4);
        let mut st = SinkhornState::initial(&p, 0.0);
        // Pick a slack state: F(0) = Σ φψ d - T < 0 with tiny scalings.
        st.log_phi.fill(-5.0);
        st.log_psi.fill(-5.0);
        assert!(multiplier_residual(&st, &p) < 0.0);
        let next = update_lambda_projection(&st, &p, 0.5).unwrap();
        assert_eq!(next.lam, 0.0);

        st.lam = 2.0;
        let f = multiplier_residual(&st, &p);
        assert!(f < 0.0);
        let next = update_lambda_projection(&st, &p, 0.1).unwrap();
        assert!(next.lam < 2.0);
        assert!((next.lam - (2.0 + 0.1 * f)).abs() < 1e-15);
    }

    #[test]
    fn projection_is_still_at_a_root() {
        // 1x1, d = 1, T = e^-1, φ = ψ = 1, λ = 1: F = 0.
        let p = DiscreteProblem::from_marginals(array![[1.0]], array![1.0], array![1.0], (-1f64).exp()).unwrap();
        let st = SinkhornState::initial(&p, 1.0);
        assert!(multiplier_residual(&st, &p).abs() < 1e-16);
        let next = update_lambda_projection(&st, &p, 3.0).unwrap();
        assert!((next.lam - 1.0).abs() < 1e-15);
    }

    #[test]
    fn root_find_closed_form() {
        let p = DiscreteProblem::from_marginals(array![[1.0]], array![1.0], array![1.0], (-1f64).exp()).unwrap();
        let mut st = SinkhornState::initial(&p, 7.0);
        st = update_lambda_rootfind(&st, &p).unwrap();
        assert!((st.lam - 1.0).abs() < 1e-12, "{}", st.lam);
    }

    #[test]
    fn root_find_clamps_to_zero_when_slack() {
        let p = uniform2(array![[0.0, 1.0], [1.0, 0.0]], 10.0);
        let st = SinkhornState::initial(&p, 3.0);
        let st = update_lambda_rootfind(&st, &p).unwrap();
        assert_eq!(st.lam, 0.0);
    }

    #[test]
    fn root_bracket_cap_is_a_failure() {
        // Root near λ = 7e8, beyond the bracket cap.
        let p = uniform2(Array2::from_elem((2, 2), 1e-6), 1e-300);
        let st = SinkhornState::initial(&p, 1.0);
        assert!(matches!(
            update_lambda_rootfind(&st, &p),
            Err(Error::NumericalFailure { .. })
        ));
    }

    #[test]
    fn slack_constraint_gives_product_coupling() {
        let d = array![[0.0, 1.0, 4.0], [1.0, 0.0, 1.0], [4.0, 1.0, 0.0]];
        let p = DiscreteProblem::from_marginals(d, array![0.2, 0.5, 0.3], array![0.3, 0.4, 0.3], 5.0).unwrap();
        for s in [LambdaStrategy::RootFind, LambdaStrategy::GradientProjection] {
            let mut cfg = SolverConfig::default().with_strategy(s);
            cfg.max_iters = 5000;
            let rep = solve(&p, &cfg).unwrap();
            assert_eq!(rep.status, Status::Converged, "{s:?}");
            assert_eq!(rep.lambda_final, 0.0);
            assert!(rep.lm_rate_nats.abs() < 1e-9);
        }
    }

    #[test]
    fn underflow_without_fallback_fails() {
        let d = array![[0.0, 2000.0], [2000.0, 0.0]];
        let p = uniform2(d, 1.0);
        let mut st = SinkhornState::initial(&p, 1.0);
        st.log_psi = array![-800.0, 0.0];
        let err = sinkhorn_step_with(&st, &p, LogDomain::Off);
        assert!(matches!(err, Err(Error::NumericalFailure { .. })));
        let ok = sinkhorn_step_with(&st, &p, LogDomain::Fallback).unwrap();
        assert!(ok.log_phi.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trace_csv_layout() {
        let p = uniform2(array![[0.0, 1.0], [1.0, 0.0]], 0.3);
        let cfg = SolverConfig::default().with_strategy(LambdaStrategy::RootFind);
        let rep = solve(&p, &cfg).unwrap();
        let csv = rep.trace_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iter,r_phi,r_psi,r_lambda,dual_objective,lm_rate_nats");
        assert_eq!(lines.len(), rep.iterations + 1);
        assert_eq!(rep.residual_trace.len(), rep.iterations);
    }

    #[test]
    fn config_validation() {
        let p = uniform2(array![[0.0, 1.0], [1.0, 0.0]], 0.3);
        let cfg = SolverConfig {
            tau: Some(0.0),
            ..SolverConfig::default()
        };
        assert!(solve(&p, &cfg).is_err());
        let cfg = SolverConfig {
            max_iters: 0,
            ..SolverConfig::default()
        };
        assert!(solve(&p, &cfg).is_err());
    }
}
