//! Power-normalized modulation alphabets and their input distributions.
//!
//! Presets are generated on the odd-integer lattice `{±1, ±3, …}²` and divided
//! by the exact analytic normalizer, so `E‖X‖² = 1` holds to rounding and the
//! point set is closed under negation bit-for-bit. Point `i` of a preset has
//! its negation at index `M - 1 - i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;
const POWER_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Qpsk,
    Qam16,
    Qam64,
    Qam256,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Qpsk, Scheme::Qam16, Scheme::Qam64, Scheme::Qam256];

    /// Points per axis of the square lattice.
    pub fn side(self) -> usize {
        match self {
            Scheme::Qpsk => 2,
            Scheme::Qam16 => 4,
            Scheme::Qam64 => 8,
            Scheme::Qam256 => 16,
        }
    }

    pub fn order(self) -> usize {
        self.side() * self.side()
    }

    /// Mean lattice energy `2(K² - 1)/3` of the unnormalized `K × K` grid:
    /// 2, 10, 42, 170.
    pub fn energy(self) -> f64 {
        let k = self.side() as f64;
        2.0 * (k * k - 1.0) / 3.0
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Qpsk => "qpsk",
            Scheme::Qam16 => "qam16",
            Scheme::Qam64 => "qam64",
            Scheme::Qam256 => "qam256",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "qpsk" | "4qam" | "qam4" => Ok(Scheme::Qpsk),
            "qam16" | "16qam" => Ok(Scheme::Qam16),
            "qam64" | "64qam" => Ok(Scheme::Qam64),
            "qam256" | "256qam" => Ok(Scheme::Qam256),
            _ => Err(format!(
                "unknown modulation `{s}` (expected qpsk, qam16, qam64 or qam256)"
            )),
        }
    }
}

/// A broken constellation invariant together with the measured discrepancy.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    LengthMismatch { points: usize, probs: usize },
    NonFinite { index: usize },
    NonPositiveProbability { index: usize, prob: f64 },
    ProbabilitySum { sum: f64 },
    Power { power: f64 },
    DuplicatePoint { first: usize, second: usize },
    MissingNegation { index: usize },
    SymmetryProbability { index: usize, partner: usize, diff: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "constellation is empty"),
            Violation::LengthMismatch { points, probs } => {
                write!(f, "{points} points but {probs} probabilities")
            }
            Violation::NonFinite { index } => write!(f, "non-finite value at point {index}"),
            Violation::NonPositiveProbability { index, prob } => {
                write!(f, "probability of point {index} is {prob} (must be > 0)")
            }
            Violation::ProbabilitySum { sum } => write!(f, "probabilities sum to {sum} ≠ 1"),
            Violation::Power { power } => write!(f, "E‖X‖² = {power:.6} ≠ 1"),
            Violation::DuplicatePoint { first, second } => {
                write!(f, "points {first} and {second} coincide")
            }
            Violation::MissingNegation { index } => {
                write!(f, "central symmetry: negation of point {index} is not in the set")
            }
            Violation::SymmetryProbability {
                index,
                partner,
                diff,
            } => write!(
                f,
                "central-symmetry probability mismatch between points {index} and {partner} (|Δp| = {diff:e})"
            ),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidationOptions {
    /// When false the negation-closure checks are skipped. Problems built from
    /// such a constellation never claim a unique multiplier root, so the
    /// root-finding multiplier update is not selected by default.
    pub check_symmetry: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            check_symmetry: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub points: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
}

impl Constellation {
    /// Square-lattice preset with uniform probabilities.
    pub fn build(scheme: Scheme) -> Self {
        let k = scheme.side();
        let scale = scheme.energy().sqrt();
        let level = |a: usize| (2 * a as i64 - (k as i64 - 1)) as f64 / scale;
        let m = scheme.order();
        let mut points = Vec::with_capacity(m);
        for a in 0..k {
            for b in 0..k {
                points.push([level(a), level(b)]);
            }
        }
        Self {
            points,
            probs: vec![1.0 / m as f64; m],
        }
    }

    /// A user-supplied alphabet, accepted only if it passes validation.
    pub fn custom(points: Vec<[f64; 2]>, probs: Vec<f64>, opts: ValidationOptions) -> Result<Self> {
        let c = Self { points, probs };
        let violations = c.validate_with(opts);
        if violations.is_empty() {
            Ok(c)
        } else {
            Err(Error::InvalidConstellation(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Average power `Σ p‖x‖²`.
    pub fn power(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| p * (x[0] * x[0] + x[1] * x[1]))
            .sum()
    }

    /// Shannon entropy of the input distribution in nats.
    pub fn entropy(&self) -> f64 {
        crate::problem::entropy(&self.probs)
    }

    /// Index of `-x_i` for every `i`, using exact float comparison, or `None`
    /// if the set is not closed under negation.
    pub fn negation_map(&self) -> Option<Vec<usize>> {
        self.points
            .iter()
            .map(|x| {
                self.points
                    .iter()
                    .position(|y| y[0] == -x[0] && y[1] == -x[1])
            })
            .collect()
    }

    /// Negation-closed with matching probabilities.
    pub fn is_centrally_symmetric(&self) -> bool {
        match self.negation_map() {
            Some(map) => map
                .iter()
                .enumerate()
                .all(|(i, &j)| self.probs[i] == self.probs[j]),
            None => false,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(ValidationOptions::default())
    }

    /// Reports every broken invariant; never fails.
    pub fn validate_with(&self, opts: ValidationOptions) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.points.is_empty() {
            out.push(Violation::Empty);
            return out;
        }
        if self.points.len() != self.probs.len() {
            out.push(Violation::LengthMismatch {
                points: self.points.len(),
                probs: self.probs.len(),
            });
            return out;
        }
        for (i, (x, &p)) in self.points.iter().zip(&self.probs).enumerate() {
            if !(x[0].is_finite() && x[1].is_finite() && p.is_finite()) {
                out.push(Violation::NonFinite { index: i });
            } else if p <= 0.0 {
                out.push(Violation::NonPositiveProbability { index: i, prob: p });
            }
        }
        if !out.is_empty() {
            return out;
        }

        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            out.push(Violation::ProbabilitySum { sum });
        }
        let power = self.power();
        if (power - 1.0).abs() > POWER_TOL {
            out.push(Violation::Power { power });
        }
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.points[i] == self.points[j] {
                    out.push(Violation::DuplicatePoint {
                        first: i,
                        second: j,
                    });
                }
            }
        }

        if opts.check_symmetry {
            for (i, x) in self.points.iter().enumerate() {
                let partner = self
                    .points
                    .iter()
                    .position(|y| y[0] == -x[0] && y[1] == -x[1]);
                match partner {
                    None => out.push(Violation::MissingNegation { index: i }),
                    Some(j) if j > i => {
                        let diff = (self.probs[i] - self.probs[j]).abs();
                        if diff > PROB_TOL {
                            out.push(Violation::SymmetryProbability {
                                index: i,
                                partner: j,
                                diff,
                            });
                        }
                    }
                    Some(_) => {}
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
