//! Solves one instance with the scaling solver.

use std::f64::consts::PI;

use lmrate::{build_channel, discretize, nats_to_bits, solve, Constellation, GridOptions, Scheme, SolverConfig};

fn main() {
    let c = Constellation::build(Scheme::Qpsk);
    let ch = build_channel(1.0, 0.9, PI / 18.0, 0.0).unwrap();
    let (_, p) = discretize(&ch, &c, GridOptions::new(50)).unwrap();
    let cfg = SolverConfig::for_problem(&p);
    let rep = solve(&p, &cfg).unwrap();
    let r = rep.final_residuals();
    println!("strategy    {:?}", cfg.lambda_strategy);
    println!("status      {:?} after {} iterations", rep.status, rep.iterations);
    println!("LM rate     {:.10} bits", nats_to_bits(rep.lm_rate_nats));
    println!("lambda      {:.10}", rep.lambda_final);
    println!("residuals   r_phi {:.2e}  r_psi {:.2e}  r_lambda {:.2e}", r.r_phi, r.r_psi, r.r_lambda);
}
