//! GMI against the LM rate over SNR for both (η, θ) mismatch levels.

use std::f64::consts::PI;

use lmrate::{
    build_channel, discretize, gmi, nats_to_bits, solve, Acceleration, Constellation, GridOptions, Scheme,
    SolverConfig,
};

fn main() {
    for (eta, theta) in [(0.9, PI / 18.0), (0.8, PI / 12.0)] {
        println!("eta = {eta}, theta = {theta:.4}");
        for snr in [-5.0, 0.0, 5.0, 10.0, 15.0] {
            let ch = build_channel(1.0, eta, theta, snr).unwrap();
            let (_, p) = discretize(&ch, &Constellation::build(Scheme::Qam16), GridOptions::new(40)).unwrap();
            let cfg = SolverConfig {
                acceleration: Acceleration::semidual(),
                ..SolverConfig::for_problem(&p)
            };
            let lm = nats_to_bits(solve(&p, &cfg).unwrap().lm_rate_nats);
            let g = gmi(&p).unwrap();
            println!(
                "  {snr:>5} dB  LM {lm:.6}  GMI {:.6}  (s* = {:.4})",
                nats_to_bits(g.value_nats),
                g.s_star
            );
        }
    }
}
