//! Acceptance checks. Runs as a plain binary (`harness = false`) so that the
//! PASS/FAIL lines are always printed; exits nonzero if any check fails.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use lmrate::dual::{
    certificate, dual_gradient, dual_objective, kernel_report, newton_oracle, GStarSource, NewtonConfig,
};
use lmrate::{
    build_channel, discretize, gmi, moment_tau, nats_to_bits, primal_entropy, scarlett_dual_value, solve,
    Acceleration, Constellation, DiscreteProblem, DualPoint, GridOptions, LambdaStrategy, ScarlettDualPoint, Scheme,
    SolveReport, SolverConfig, Status,
};
use common::seed;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PAIRS: [(f64, f64); 4] = [(0.9, PI / 18.0), (0.9, PI / 12.0), (0.8, PI / 18.0), (0.8, PI / 12.0)];
const SCHEMES: [Scheme; 2] = [Scheme::Qpsk, Scheme::Qam16];

fn instance(s: Scheme, eta: f64, theta: f64, snr_db: f64, n_side: usize) -> DiscreteProblem {
    let ch = build_channel(1.0, eta, theta, snr_db).unwrap();
    discretize(&ch, &Constellation::build(s), GridOptions::new(n_side)).unwrap().1
}

/// `|Σ Q log Q + g|` at the final iterate.
fn duality_gap(rep: &SolveReport, p: &DiscreteProblem) -> f64 {
    let h = primal_entropy(&rep.solution, p).unwrap();
    let g = dual_objective(&rep.dual_point(), p).unwrap();
    (h + g).abs()
}

struct Check {
    pass: bool,
    detail: String,
}

struct Ctx {
    /// Strong-duality gaps of every converged run, with labels.
    gaps: Vec<(String, f64)>,
}

impl Ctx {
    fn record(&mut self, label: String, rep: &SolveReport, p: &DiscreteProblem) {
        if rep.status == Status::Converged {
            self.gaps.push((label, duality_gap(rep, p)));
        }
    }
}

fn newton_cfg() -> NewtonConfig {
    NewtonConfig {
        tol: 1e-12,
        ..NewtonConfig::default()
    }
}

fn oracle_agreement(ctx: &mut Ctx) -> Check {
    let mut worst_diff = 0.0f64;
    let mut worst_time = 0.0f64;
    let mut ok = true;
    for s in SCHEMES {
        for n_side in [10, 15] {
            let p = instance(s, 0.9, PI / 18.0, 0.0, n_side);
            let t0 = Instant::now();
            let rep = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            let orc = newton_oracle(&p, &newton_cfg()).unwrap();
            let diff = nats_to_bits((rep.lm_rate_nats - orc.lm_rate_nats).abs());
            ok &= rep.status == Status::Converged && orc.status == Status::Converged;
            ok &= diff <= 1e-5 && secs <= 10.0;
            worst_diff = worst_diff.max(diff);
            worst_time = worst_time.max(secs);
            ctx.record(format!("{} N={}", s.name(), p.n()), &rep, &p);
            ctx.record(format!("{} N={} newton", s.name(), p.n()), &orc, &p);
        }
    }
    Check {
        pass: ok,
        detail: format!("max |Δ| = {worst_diff:.3e} bits, slowest cell {worst_time:.3} s"),
    }
}

fn residual_convergence(ctx: &mut Ctx) -> Check {
    let p = instance(Scheme::Qpsk, 0.9, PI / 18.0, 0.0, 50);
    let t0 = Instant::now();
    let rep = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let first = rep
        .residual_trace
        .iter()
        .position(|r| r.r_phi.max(r.r_psi).max(r.r_lambda) <= 1e-10)
        .map(|k| k + 1);
    ctx.record("qpsk N=2500 0dB".into(), &rep, &p);
    Check {
        pass: matches!(first, Some(k) if k <= 200) && secs <= 5.0,
        detail: format!("first iteration with max residual ≤ 1e-10: {first:?}, {secs:.3} s"),
    }
}

fn inactive_constraint(ctx: &mut Ctx) -> Check {
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut lam = 0.0f64;
    for s in SCHEMES {
        let p = instance(s, 0.9, PI / 18.0, 0.0, 10);
        let t = 1.5 * p.max_metric();
        let p = p.with_threshold(t).unwrap();
        for strat in [LambdaStrategy::RootFind, LambdaStrategy::GradientProjection] {
            let rep = solve(&p, &SolverConfig::default().with_strategy(strat)).unwrap();
            ok &= rep.status == Status::Converged;
            worst = worst.max(rep.lm_rate_nats.abs());
            lam = lam.max(rep.lambda_final);
            ctx.record(format!("{} inflated T {strat:?}", s.name()), &rep, &p);
        }
    }
    Check {
        pass: ok && worst <= 1e-9 && lam == 0.0,
        detail: format!("max |LM| = {worst:.3e} nats, max λ = {lam:e}"),
    }
}

fn gmi_ordering(ctx: &mut Ctx) -> Check {
    let snrs = [-5.0, 0.0, 5.0, 10.0, 15.0];
    let mut lm = std::collections::HashMap::new();
    let mut ok = true;
    let mut min_gap = f64::INFINITY;
    let mut fallbacks = Vec::new();
    for s in SCHEMES {
        for (kp, &(eta, theta)) in PAIRS.iter().enumerate() {
            for (ks, &snr) in snrs.iter().enumerate() {
                let p = instance(s, eta, theta, snr, 50);
                let plain = SolverConfig {
                    max_iters: 5000,
                    ..SolverConfig::for_problem(&p)
                };
                let mut rep = solve(&p, &plain).unwrap();
                if rep.status != Status::Converged {
                    fallbacks.push(format!("{}/{eta}/{:.4}/{snr}dB", s.name(), theta));
                    let acc = SolverConfig {
                        acceleration: Acceleration::semidual(),
                        ..plain
                    };
                    rep = solve(&p, &acc).unwrap();
                }
                ok &= rep.status == Status::Converged;
                let g = gmi(&p).unwrap();
                let lm_bits = nats_to_bits(rep.lm_rate_nats);
                let gap = lm_bits - nats_to_bits(g.value_nats);
                ok &= gap >= -1e-8;
                min_gap = min_gap.min(gap);
                lm.insert((s, kp, ks), lm_bits);
                ctx.record(format!("{} η={eta} θ={theta:.4} {snr} dB", s.name()), &rep, &p);
            }
        }
    }
    // Pair indices: 0 = (0.9, π/18), 1 = (0.9, π/12), 2 = (0.8, π/18), 3 = (0.8, π/12).
    let mut trend_ok = true;
    for s in SCHEMES {
        for ks in 0..snrs.len() {
            let v = |kp: usize| lm[&(s, kp, ks)];
            trend_ok &= v(2) <= v(0) + 1e-6 && v(3) <= v(1) + 1e-6;
            trend_ok &= v(1) <= v(0) + 1e-6 && v(3) <= v(2) + 1e-6;
        }
    }
    Check {
        pass: ok && trend_ok,
        detail: format!(
            "40 cells, min LM-GMI = {min_gap:.3e} bits, trends {}, accelerated fallback on {} cells {:?}",
            if trend_ok { "hold" } else { "violated" },
            fallbacks.len(),
            fallbacks
        ),
    }
}

fn strong_duality(ctx: &Ctx) -> Check {
    let worst = ctx
        .gaps
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    Check {
        pass: worst.1 <= 1e-8,
        detail: format!("{} converged runs, worst gap {:.3e} ({})", ctx.gaps.len(), worst.1, worst.0),
    }
}

fn certificate_check() -> Check {
    let p = instance(Scheme::Qpsk, 0.9, PI / 18.0, 0.0, 10);
    let rep = solve(&p, &SolverConfig::default().with_strategy(LambdaStrategy::GradientProjection)).unwrap();
    let orc = newton_oracle(&p, &newton_cfg()).unwrap();
    let g_star = orc.residual_trace.last().unwrap().dual_objective;
    match certificate(&rep, &p, g_star, GStarSource::NewtonOracle) {
        Ok(c) => Check {
            pass: c.bound_satisfied,
            detail: format!(
                "{} iterations, S₀ = {:.3}, L_λ = {:.3}, worst margin {:.3e}, first violation {:?}",
                rep.iterations, c.s0, c.l_lambda, c.worst_margin, c.first_violation
            ),
        },
        Err(e) => Check {
            pass: false,
            detail: format!("certificate failed: {e}"),
        },
    }
}

fn scarlett_equivalence(ctx: &mut Ctx) -> Check {
    let mut worst = 0.0f64;
    let mut ok = true;
    for s in SCHEMES {
        for n_side in [10, 15, 20] {
            let p = instance(s, 0.9, PI / 18.0, 0.0, n_side);
            let rep = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
            ok &= rep.status == Status::Converged;
            let sp = ScarlettDualPoint::from_coupling(&rep.solution, &p);
            let v = scarlett_dual_value(&sp, &p).unwrap();
            worst = worst.max(nats_to_bits((v - rep.lm_rate_nats).abs()));
            ctx.record(format!("{} N={} scarlett", s.name(), p.n()), &rep, &p);
        }
    }
    Check {
        pass: ok && worst <= 1e-8,
        detail: format!("6 instances, max |Δ| = {worst:.3e} bits"),
    }
}

/// `k` centrally symmetric 2-D points: pairs `±v`, plus the origin if `k` is odd.
fn symmetric_points(rng: &mut ChaCha8Rng, k: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(k);
    for _ in 0..k / 2 {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        pts.push(v);
        pts.push([-v[0], -v[1]]);
    }
    if k % 2 == 1 {
        pts.push([0.0, 0.0]);
    }
    pts
}

fn kernel_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed());
    let mut bad = Vec::new();
    for trial in 0..50 {
        let m = rng.random_range(2..=6);
        let n = rng.random_range(2..=6);
        let xs = symmetric_points(&mut rng, m);
        let ys = symmetric_points(&mut rng, n);
        let h = [
            [rng.random_range(0.5..1.5), rng.random_range(-0.5..0.5)],
            [rng.random_range(-0.5..0.5), rng.random_range(0.5..1.5)],
        ];
        let d = Array2::from_shape_fn((m, n), |(i, j)| {
            let hx = [
                h[0][0] * xs[i][0] + h[0][1] * xs[i][1],
                h[1][0] * xs[i][0] + h[1][1] * xs[i][1],
            ];
            (ys[j][0] - hx[0]).powi(2) + (ys[j][1] - hx[1]).powi(2)
        });
        let r = kernel_report(d.view());
        if r.null_dim != 1 || !r.gauge_in_kernel || r.degenerate {
            bad.push((trial, m, n, r.null_dim));
        }
    }
    let constant = kernel_report(Array2::from_elem((3, 4), 2.5).view());
    let detected = constant.degenerate && constant.null_dim > 1;
    Check {
        pass: bad.is_empty() && detected,
        detail: format!(
            "seed {}, {} of 50 random metrics off, constant metric null dim {} (degenerate: {})",
            seed(),
            bad.len(),
            constant.null_dim,
            constant.degenerate
        ),
    }
}

fn root_behavior(ctx: &mut Ctx) -> Check {
    let mut ok = true;
    let mut min_f0 = f64::INFINITY;
    let mut worst = 0.0f64;
    let mut cells = 0;
    for s in SCHEMES {
        for &(eta, theta) in &PAIRS {
            for snr in [0.0, 5.0] {
                let p = instance(s, eta, theta, snr, 15);
                assert!(p.unique_lambda_root);
                cells += 1;
                // Same budget for both strategies; plain scaling needs a few thousand
                // iterations on QPSK at 5 dB.
                let root_cfg = SolverConfig {
                    max_iters: 5000,
                    ..SolverConfig::default().with_strategy(LambdaStrategy::RootFind)
                };
                let root = solve(&p, &root_cfg).unwrap();
                ok &= root.status == Status::Converged;
                for r in &root.residual_trace {
                    match r.f_at_zero {
                        Some(f) => min_f0 = min_f0.min(f),
                        None => ok = false,
                    }
                }
                let gp = SolverConfig {
                    tau: Some(moment_tau(&p)),
                    max_iters: 5000,
                    ..SolverConfig::default().with_strategy(LambdaStrategy::GradientProjection)
                };
                let proj = solve(&p, &gp).unwrap();
                ok &= proj.status == Status::Converged;
                worst = worst.max(nats_to_bits((root.lm_rate_nats - proj.lm_rate_nats).abs()));
                ctx.record(format!("{} η={eta} {snr} dB root", s.name()), &root, &p);
                ctx.record(format!("{} η={eta} {snr} dB projection", s.name()), &proj, &p);
            }
        }
    }
    Check {
        pass: ok && min_f0 > 0.0 && worst <= 1e-8,
        detail: format!("{cells} presets, min F(0) = {min_f0:.3e}, max |LM_root - LM_proj| = {worst:.3e} bits"),
    }
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed() ^ 0x9e37_79b9);
    let p = instance(Scheme::Qpsk, 0.9, PI / 18.0, 0.0, 3);
    assert_eq!((p.m(), p.n()), (4, 9));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut z: Vec<f64> = (0..p.m() + p.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        z.push(rng.random_range(0.0..2.0));
        let dp = DualPoint::from_slice(&z, p.m(), p.n());
        let g = dual_gradient(&dp, &p).unwrap().to_vec();
        let fd: Vec<f64> = (0..z.len())
            .map(|k| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let fp = dual_objective(&DualPoint::from_slice(&zp, p.m(), p.n()), &p).unwrap();
                let fm = dual_objective(&DualPoint::from_slice(&zm, p.m(), p.n()), &p).unwrap();
                (fp - fm) / (2.0 * h)
            })
            .collect();
        let num = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let den = g.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-12);
        worst = worst.max(num / den);
    }
    Check {
        pass: worst <= 1e-5,
        detail: format!("seed {}, 20 points on 4×9, max relative error {worst:.3e}", seed()),
    }
}

fn main() {
    let mut ctx = Ctx { gaps: Vec::new() };
    let mut results: Vec<(u32, &str, Check)> = vec![
        (1, "oracle agreement", oracle_agreement(&mut ctx)),
        (2, "residual convergence", residual_convergence(&mut ctx)),
        (3, "inactive constraint", inactive_constraint(&mut ctx)),
        (4, "GMI below LM", gmi_ordering(&mut ctx)),
    ];
    let cert = certificate_check();
    let scarlett = scarlett_equivalence(&mut ctx);
    let kernel = kernel_suite();
    let roots = root_behavior(&mut ctx);
    let grad = gradient_check();
    results.push((5, "strong duality", strong_duality(&ctx)));
    results.push((6, "convergence certificate", cert));
    results.push((7, "alternative dual equivalence", scarlett));
    results.push((8, "constraint kernel", kernel));
    results.push((9, "multiplier root", roots));
    results.push((10, "dual gradient", grad));

    let mut failed = 0;
    for (k, name, c) in &results {
        println!("{} {k:>2} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
        if !c.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
