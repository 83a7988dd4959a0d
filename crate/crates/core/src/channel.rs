//! Rotated-and-scaled AWGN channel `Y = HX + Z` on a truncated uniform output
//! grid.
//!
//! The grid, the kernel and the output marginal are built so that central
//! symmetry holds bit-for-bit: grid node `k` has its negation at `N - 1 - k`,
//! and every reduction that should be symmetric is accumulated with
//! [`mirrored_sum`] or over negation pairs.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::problem::{metric_expectation, mirrored_sum, DiscreteProblem};

pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub const DEFAULT_HALF_WIDTH: f64 = 8.0;
pub const DEFAULT_PROB_FLOOR: f64 = 1e-100;

#[inline]
fn apply(h: &Mat2, x: &[f64; 2]) -> [f64; 2] {
    [
        h[0][0] * x[0] + h[0][1] * x[1],
        h[1][0] * x[0] + h[1][1] * x[1],
    ]
}

#[inline]
fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub eta1: f64,
    pub eta2: f64,
    pub theta: f64,
    /// Per-component noise variance; `SNR = 1 / (2 σ²)`.
    pub sigma2: f64,
    /// `diag(η₁, η₂) · [[cos θ, sin θ], [-sin θ, cos θ]]`.
    pub h: Mat2,
    /// Decoder's estimate of `H` used by the metric `‖y - Ĥx‖²`.
    pub h_hat: Mat2,
}

impl ChannelSpec {
    pub fn snr_db(&self) -> f64 {
        10.0 * (1.0 / (2.0 * self.sigma2)).log10()
    }

    pub fn with_decoder(mut self, h_hat: Mat2) -> Self {
        self.h_hat = h_hat;
        self
    }

    /// `xᵀHx > 0` for every `x ≠ 0`.
    pub fn h_positive_definite(&self) -> bool {
        let a = self.h[0][0];
        let c = self.h[1][1];
        let b = 0.5 * (self.h[0][1] + self.h[1][0]);
        a > 0.0 && a * c - b * b > 0.0
    }
}

pub fn build_channel(eta1: f64, eta2: f64, theta: f64, snr_db: f64) -> Result<ChannelSpec> {
    for (field, v) in [("eta1", eta1), ("eta2", eta2)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidChannel {
                field,
                reason: format!("scaling must be positive, got {v}"),
            });
        }
    }
    if !theta.is_finite() {
        return Err(Error::InvalidChannel {
            field: "theta",
            reason: "rotation must be finite".into(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidChannel {
            field: "snr_db",
            reason: "SNR must be finite".into(),
        });
    }
    let (s, c) = theta.sin_cos();
    Ok(ChannelSpec {
        eta1,
        eta2,
        theta,
        sigma2: 10f64.powf(-snr_db / 10.0) / 2.0,
        h: [[eta1 * c, eta1 * s], [-eta2 * s, eta2 * c]],
        h_hat: IDENTITY,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Nodes per axis, `√N`.
    pub n_side: usize,
    pub half_width: f64,
    /// Output nodes whose probability falls below this are dropped together
    /// with their negation.
    pub prob_floor: f64,
}

impl GridOptions {
    pub fn new(n_side: usize) -> Self {
        Self {
            n_side,
            half_width: DEFAULT_HALF_WIDTH,
            prob_floor: DEFAULT_PROB_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OutputGrid {
    /// Surviving nodes, in row-major `(r, s)` order.
    pub points: Vec<[f64; 2]>,
    pub delta: f64,
    pub half_width: f64,
    pub n_side: usize,
    /// Indices into the full `n_side²` grid that were removed.
    pub pruned: Vec<usize>,
}

impl OutputGrid {
    /// The full `n_side × n_side` grid on `[-h, h]²`.
    pub fn uniform(n_side: usize, half_width: f64) -> Self {
        let denom = (n_side - 1) as f64;
        // (2r - (n-1)) is an integer, so coord(n-1-r) == -coord(r) exactly.
        let coord = |r: usize| half_width * (2 * r as i64 - (n_side as i64 - 1)) as f64 / denom;
        let mut points = Vec::with_capacity(n_side * n_side);
        for r in 0..n_side {
            for s in 0..n_side {
                points.push([coord(r), coord(s)]);
            }
        }
        Self {
            points,
            delta: 2.0 * half_width / denom,
            half_width,
            n_side,
            pruned: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Discretizes the channel on the output grid and assembles the instance.
///
/// `W(y_j|x_i)` is the Gaussian density evaluated at the nodes and
/// renormalized per row; the metric is `d_ij = ‖y_j - Ĥx_i‖²` and the
/// threshold is the expectation of `d` under the discrete joint law.
pub fn discretize(
    channel: &ChannelSpec,
    c: &Constellation,
    opts: GridOptions,
) -> Result<(OutputGrid, DiscreteProblem)> {
    if opts.n_side < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid needs at least 2 nodes per side, got {}",
            opts.n_side
        )));
    }
    if !(opts.prob_floor >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "probability floor must be nonnegative, got {}",
            opts.prob_floor
        )));
    }
    if !(opts.half_width > 0.0) {
        return Err(Error::InvalidConfig("half width must be positive".into()));
    }
    let violations = c.validate_with(crate::constellation::ValidationOptions {
        check_symmetry: false,
    });
    if !violations.is_empty() {
        return Err(Error::InvalidConstellation(violations));
    }

    let full = OutputGrid::uniform(opts.n_side, opts.half_width);
    let m = c.len();
    let n_full = full.len();
    let neg_x = c.negation_map();
    let symmetric = c.is_centrally_symmetric();
    let inv_two_var = 1.0 / (2.0 * channel.sigma2);

    let hx: Vec<[f64; 2]> = c.points.iter().map(|x| apply(&channel.h, x)).collect();
    let mut w = Array2::<f64>::zeros((m, n_full));
    for (i, hxi) in hx.iter().enumerate() {
        let expo: Vec<f64> = full.points.iter().map(|y| -dist2(y, hxi) * inv_two_var).collect();
        let top = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut row = w.row_mut(i);
        for (j, e) in expo.iter().enumerate() {
            row[j] = (e - top).exp();
        }
        let s = mirrored_sum(n_full, |j| row[j]);
        row.mapv_inplace(|v| v / s);
    }

    let p_x = Array1::from(c.probs.clone());
    let p_y = output_marginal(&w, &p_x, neg_x.as_deref().filter(|_| symmetric));

    let keep: Vec<bool> = p_y.iter().map(|&v| v >= opts.prob_floor && v > 0.0).collect();
    for j in 0..n_full {
        if keep[j] != keep[n_full - 1 - j] {
            return Err(Error::AsymmetricPrune { index: j });
        }
    }
    let kept: Vec<usize> = (0..n_full).filter(|&j| keep[j]).collect();
    if kept.is_empty() {
        return Err(Error::DegenerateGrid {
            floor: opts.prob_floor,
        });
    }
    let pruned: Vec<usize> = (0..n_full).filter(|&j| !keep[j]).collect();

    let (w, p_y) = if pruned.is_empty() {
        (w, p_y)
    } else {
        let k = kept.len();
        let mut wk = Array2::<f64>::zeros((m, k));
        for i in 0..m {
            let s = mirrored_sum(k, |a| w[[i, kept[a]]]);
            for (a, &j) in kept.iter().enumerate() {
                wk[[i, a]] = w[[i, j]] / s;
            }
        }
        let p_y = output_marginal(&wk, &p_x, neg_x.as_deref().filter(|_| symmetric));
        (wk, p_y)
    };

    let grid = OutputGrid {
        points: kept.iter().map(|&j| full.points[j]).collect(),
        delta: full.delta,
        half_width: full.half_width,
        n_side: full.n_side,
        pruned,
    };

    let hhx: Vec<[f64; 2]> = c.points.iter().map(|x| apply(&channel.h_hat, x)).collect();
    let d = Array2::from_shape_fn((m, grid.len()), |(i, j)| dist2(&grid.points[j], &hhx[i]));
    let t = metric_expectation(d.view(), |i, j| p_x[i] * w[[i, j]]);

    let problem = DiscreteProblem {
        d,
        p_x,
        p_y,
        w: Some(w),
        t,
        unique_lambda_root: symmetric && channel.h_hat == IDENTITY && channel.h_positive_definite(),
    };
    problem.validate()?;
    Ok((grid, problem))
}

/// `P_Y = P_Xᵀ W`, summed over negation pairs when a map is supplied so that
/// `P_Y(y_j) == P_Y(-y_j)` exactly.
fn output_marginal(w: &Array2<f64>, p_x: &Array1<f64>, neg_x: Option<&[usize]>) -> Array1<f64> {
    let (m, n) = w.dim();
    match neg_x {
        Some(neg) => Array1::from_shape_fn(n, |j| {
            let mut acc = 0.0;
            for i in 0..m {
                let k = neg[i];
                if i < k {
                    acc += p_x[i] * w[[i, j]] + p_x[k] * w[[k, j]];
                } else if i == k {
                    acc += p_x[i] * w[[i, j]];
                }
            }
            acc
        }),
        None => p_x.dot(w),
    }
}

/// Continuous-output expectation of the metric, `2σ² + Σ P_X ‖Hx - x‖²`.
pub fn analytic_threshold(channel: &ChannelSpec, c: &Constellation) -> Result<f64> {
    if channel.h_hat != IDENTITY {
        return Err(Error::Unsupported(
            "analytic threshold assumes the decoder matrix is the identity".into(),
        ));
    }
    let mismatch: f64 = c
        .points
        .iter()
        .zip(&c.probs)
        .map(|(x, p)| p * dist2(&apply(&channel.h, x), x))
        .sum();
    Ok(2.0 * channel.sigma2 + mismatch)
}
