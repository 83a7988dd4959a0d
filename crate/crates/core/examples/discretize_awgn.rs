//! Builds the mismatched AWGN channel and discretizes the output plane.

use std::f64::consts::PI;

use lmrate::{analytic_threshold, build_channel, discretize, Constellation, GridOptions, Scheme};

fn main() {
    let c = Constellation::build(Scheme::Qam16);
    let ch = build_channel(1.0, 0.9, PI / 18.0, 5.0).unwrap();
    println!("H = {:?}", ch.h);
    println!("quadratic form positive definite: {}", ch.h_positive_definite());
    let exact = analytic_threshold(&ch, &c).unwrap();
    for n_side in [10, 20, 40, 80] {
        let (grid, p) = discretize(&ch, &c, GridOptions::new(n_side)).unwrap();
        println!(
            "n_side {n_side:3}: N = {:5}, T = {:.6} (closed form {exact:.6}), H(Y) = {:.4} nats, max d = {:.2}",
            grid.len(),
            p.t,
            p.entropy_y(),
            p.max_metric()
        );
    }
}
