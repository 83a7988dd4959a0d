//! The single-variable dual form of the rate, evaluated at the point mapped
//! from the solver's scalings, and at perturbed points (always lower).

use std::f64::consts::PI;

use lmrate::{
    build_channel, discretize, nats_to_bits, scarlett_dual_value, solve, Constellation, GridOptions, Scheme,
    ScarlettDualPoint, SolverConfig,
};

fn main() {
    let ch = build_channel(1.0, 0.8, PI / 12.0, 0.0).unwrap();
    let (_, p) = discretize(&ch, &Constellation::build(Scheme::Qam16), GridOptions::new(20)).unwrap();
    let rep = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
    let sp = ScarlettDualPoint::from_coupling(&rep.solution, &p);
    let v = scarlett_dual_value(&sp, &p).unwrap();
    println!("LM rate            {:.12} bits", nats_to_bits(rep.lm_rate_nats));
    println!("dual at mapped pt  {:.12} bits", nats_to_bits(v));
    for dz in [-0.2, 0.2] {
        let q = ScarlettDualPoint {
            zeta: sp.zeta + dz,
            a: sp.a.clone(),
        };
        println!("zeta {:+.1}          {:.12} bits", dz, nats_to_bits(scarlett_dual_value(&q, &p).unwrap()));
    }
}
