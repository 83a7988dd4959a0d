#![allow(dead_code)]

use std::f64::consts::PI;

use lmrate::{build_channel, discretize, Constellation, DiscreteProblem, GridOptions, Scheme};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

pub const DEFAULT_SEED: u64 = 20_240_611;

/// `LMRATE_SEED` if set, else a fixed default.
pub fn seed() -> u64 {
    std::env::var("LMRATE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED)
}

pub fn proptest_config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed()),
        failure_persistence: None,
        ..Config::default()
    }
}

pub fn preset(s: Scheme, eta: f64, theta: f64, snr_db: f64, n_side: usize) -> DiscreteProblem {
    let ch = build_channel(1.0, eta, theta, snr_db).unwrap();
    discretize(&ch, &Constellation::build(s), GridOptions::new(n_side)).unwrap().1
}

pub fn qpsk(n_side: usize) -> DiscreteProblem {
    preset(Scheme::Qpsk, 0.9, PI / 18.0, 0.0, n_side)
}

fn normalize(v: Vec<f64>) -> Array1<f64> {
    let s: f64 = v.iter().sum();
    Array1::from_vec(v.into_iter().map(|x| x / s).collect())
}

/// Small random instance with a channel matrix: positive marginals, metric
/// entries in `[0, 4)`, threshold from the joint law.
pub fn small_problem() -> impl Strategy<Value = DiscreteProblem> {
    (2usize..=4, 2usize..=6).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec(0.0f64..4.0, m * n),
            prop::collection::vec(0.2f64..1.0, m),
            prop::collection::vec(0.05f64..1.0, m * n),
        )
            .prop_map(move |(d, px, w)| {
                let d = Array2::from_shape_vec((m, n), d).unwrap();
                let mut w = Array2::from_shape_vec((m, n), w).unwrap();
                for mut row in w.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
                DiscreteProblem::from_channel(d, normalize(px), w).unwrap()
            })
    })
}

/// A dual point for `p`, with `λ ≥ 0`.
pub fn dual_vector(m: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, m + n), 0.0f64..2.0).prop_map(|(mut v, lam)| {
        v.push(lam);
        v
    })
}
