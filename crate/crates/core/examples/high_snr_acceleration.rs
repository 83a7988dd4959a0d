//! At high SNR plain scaling has a very slow mode; the semi-dual Newton
//! polish removes it without changing the answer.

use std::f64::consts::PI;
use std::time::Instant;

use lmrate::dual::{newton_oracle, NewtonConfig};
use lmrate::{
    build_channel, discretize, nats_to_bits, solve, Acceleration, Constellation, GridOptions, Scheme, SolverConfig,
};

fn main() {
    let ch = build_channel(1.0, 0.9, PI / 18.0, 15.0).unwrap();
    let (_, p) = discretize(&ch, &Constellation::build(Scheme::Qpsk), GridOptions::new(20)).unwrap();
    let reference = newton_oracle(&p, &NewtonConfig::default()).unwrap();
    for acceleration in [Acceleration::Off, Acceleration::semidual()] {
        let cfg = SolverConfig {
            max_iters: 5000,
            acceleration,
            ..SolverConfig::for_problem(&p)
        };
        let t0 = Instant::now();
        let rep = solve(&p, &cfg).unwrap();
        println!(
            "{acceleration:?}: {:?} after {} iterations in {:.3} s, |LM - reference| = {:.2e} bits",
            rep.status,
            rep.iterations,
            t0.elapsed().as_secs_f64(),
            nats_to_bits((rep.lm_rate_nats - reference.lm_rate_nats).abs())
        );
    }
}
