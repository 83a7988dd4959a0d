//! Null space of the constraint matrix and of the dual Hessian.

use std::f64::consts::PI;

use lmrate::dual::{dual_hessian, hessian_null_dimension, kernel_report};
use lmrate::{build_channel, discretize, solve, Constellation, GridOptions, Scheme, SolverConfig};
use ndarray::Array2;

fn main() {
    let ch = build_channel(1.0, 0.9, PI / 18.0, 0.0).unwrap();
    let (_, p) = discretize(&ch, &Constellation::build(Scheme::Qpsk), GridOptions::new(4)).unwrap();
    println!("AWGN metric 4x16: {:?}", kernel_report(p.d.view()));

    let rep = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
    let h = dual_hessian(&rep.dual_point(), &p, 1024).unwrap();
    println!("Hessian null dimension at the solution: {}", hessian_null_dimension(&h));

    let constant = Array2::from_elem((3, 5), 1.0);
    println!("constant metric:  {:?}", kernel_report(constant.view()));
}
