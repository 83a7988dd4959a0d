//! A posteriori convergence certificate for a projected-gradient run.

use std::f64::consts::PI;

use lmrate::dual::{certificate, newton_oracle, GStarSource, NewtonConfig};
use lmrate::{build_channel, discretize, solve, Constellation, GridOptions, LambdaStrategy, Scheme, SolverConfig};

fn main() {
    let ch = build_channel(1.0, 0.9, PI / 18.0, 0.0).unwrap();
    let (_, p) = discretize(&ch, &Constellation::build(Scheme::Qpsk), GridOptions::new(10)).unwrap();
    let rep = solve(&p, &SolverConfig::default().with_strategy(LambdaStrategy::GradientProjection)).unwrap();
    let orc = newton_oracle(&p, &NewtonConfig::default()).unwrap();
    let g_star = orc.residual_trace.last().unwrap().dual_objective;
    let cert = certificate(&rep, &p, g_star, GStarSource::NewtonOracle).unwrap();
    println!("{}", cert.to_json().unwrap());
}
