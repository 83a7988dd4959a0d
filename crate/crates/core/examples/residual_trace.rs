//! Writes the per-iteration residual trace as CSV.
//!
//! `cargo run --example residual_trace -- trace.csv`; prints to stdout
//! without an argument.

use std::f64::consts::PI;

use lmrate::{build_channel, discretize, solve, Constellation, GridOptions, Scheme, SolverConfig};

fn main() {
    let c = Constellation::build(Scheme::Qpsk);
    let ch = build_channel(1.0, 0.9, PI / 18.0, 0.0).unwrap();
    let (_, p) = discretize(&ch, &c, GridOptions::new(50)).unwrap();
    let rep = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
    let csv = rep.trace_csv();
    match std::env::args().nth(1) {
        Some(path) => {
            std::fs::write(&path, csv).unwrap();
            eprintln!("wrote {} rows to {path}", rep.iterations);
        }
        None => print!("{csv}"),
    }
}
