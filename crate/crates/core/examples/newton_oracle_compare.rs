//! Scaling solver against the dense Newton reference on small grids.

use std::f64::consts::PI;
use std::time::Instant;

use lmrate::dual::{newton_oracle, NewtonConfig};
use lmrate::{build_channel, discretize, nats_to_bits, solve, Constellation, GridOptions, Scheme, SolverConfig};

fn main() {
    let ch = build_channel(1.0, 0.9, PI / 18.0, 0.0).unwrap();
    println!("{:>6} {:>5} {:>12} {:>12} {:>10} {:>12}", "scheme", "N", "sinkhorn_s", "newton_s", "speedup", "|diff| bits");
    for s in [Scheme::Qpsk, Scheme::Qam16] {
        for n_side in [10, 15, 20] {
            let (_, p) = discretize(&ch, &Constellation::build(s), GridOptions::new(n_side)).unwrap();
            let t0 = Instant::now();
            let a = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
            let ts = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let b = newton_oracle(&p, &NewtonConfig::default()).unwrap();
            let tn = t1.elapsed().as_secs_f64();
            println!(
                "{:>6} {:>5} {:>12.5} {:>12.5} {:>10.1} {:>12.2e}",
                s.name(),
                p.n(),
                ts,
                tn,
                tn / ts,
                nats_to_bits((a.lm_rate_nats - b.lm_rate_nats).abs())
            );
        }
    }
}
