//! Domain types shared by the whole crate: vehicle and joint states,
//! controls, hypothesis grids and beliefs.
//!
//! Beliefs are dense probability vectors over a finite hypothesis grid.
//! Every belief built through [`Belief::normalize`] is strictly positive:
//! entries that would fall below [`PROBABILITY_FLOOR`] are raised to the
//! floor and the vector is renormalized. The divergence bounds used by the
//! probing planner rely on this.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest probability an entry of a normalized belief may take (before
/// the final renormalization).
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Number of hypotheses used by both driving scenarios.
pub const SCENARIO_GRID_LEN: usize = 30;

/// Inner (left) lane index.
pub const INNER_LANE: u8 = 0;
/// Outer (right) lane index.
pub const OUTER_LANE: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("every weight is zero; likelihoods underflowed")]
    AllZeroWeights,

    #[error("weight {index} is negative or not finite: {value}")]
    InvalidWeight { index: usize, value: f64 },

    #[error("hypothesis index {index} outside 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid hypothesis grid: {0}")]
    InvalidGrid(String),

    #[error("belief has {belief} entries but the grid has {grid}")]
    LengthMismatch { belief: usize, grid: usize },
}

/// Longitudinal state of one mass-point vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal position in meters.
    pub x: f64,
    /// Velocity in m/s, never negative.
    pub v: f64,
    pub lane: u8,
}

impl VehicleState {
    pub fn new(x: f64, v: f64, lane: u8) -> Self {
        Self { x, v, lane }
    }
}

/// State of every vehicle in the episode at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub robot: VehicleState,
    pub human: VehicleState,
    /// Background traffic; the order is fixed for a whole episode.
    pub background: Vec<VehicleState>,
    /// Seconds since the start of the episode.
    pub time: f64,
}

/// A longitudinal acceleration plus an optional instantaneous lane change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    /// m/s².
    pub accel: f64,
    pub lane_change: Option<u8>,
}

impl Control {
    pub const ZERO: Control = Control { accel: 0.0, lane_change: None };

    pub fn accel(accel: f64) -> Self {
        Self { accel, lane_change: None }
    }
}

/// Physical meaning of the hidden parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Values in m/s.
    DesiredVelocity,
    /// Values in meters.
    DesiredHeadway,
}

/// Ordered, uniformly spaced set of candidate parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGrid {
    kind: GridKind,
    values: Vec<f64>,
}

impl HypothesisGrid {
    pub fn new(kind: GridKind, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::InvalidGrid("no values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidGrid("non-finite value".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::InvalidGrid("values must be strictly increasing".into()));
        }
        if values.len() > 2 {
            let step = values[1] - values[0];
            let scale = values.iter().fold(step.abs(), |m, v| m.max(v.abs()));
            let uneven = values
                .windows(2)
                .any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * scale);
            if uneven {
                return Err(ModelError::InvalidGrid("values must be uniformly spaced".into()));
            }
        }
        Ok(Self { kind, values })
    }

    /// Uniform grid of `len` values that passes through `anchor_value` at the
    /// 1-based position `anchor_index`.
    pub fn anchored(
        kind: GridKind,
        len: usize,
        anchor_index: usize,
        anchor_value: f64,
        step: f64,
    ) -> Result<Self, ModelError> {
        let values = (1..=len)
            .map(|k| anchor_value + (k as f64 - anchor_index as f64) * step)
            .collect();
        Self::new(kind, values)
    }

    /// Desired-velocity grid for the lane-advise scenario: 30 values, step
    /// 3.7/3 m/s, with index 16 at 19.86 m/s and index 19 at 23.56 m/s.
    pub fn lane_advise_velocity() -> Self {
        Self::anchored(GridKind::DesiredVelocity, SCENARIO_GRID_LEN, 16, 19.86, 3.7 / 3.0)
            .expect("static grid")
    }

    /// Desired-headway grid for the gap-create scenario: 30 values, step
    /// 12.07 m, with index 4 at 48.27 m and index 9 at 108.62 m.
    pub fn gap_create_headway() -> Self {
        Self::anchored(GridKind::DesiredHeadway, SCENARIO_GRID_LEN, 4, 48.27, 12.07)
            .expect("static grid")
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    /// Values in ascending order, indexed from zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Physical value of the hypothesis with 1-based `index`.
    pub fn grid_value(&self, index: usize) -> Result<f64, ModelError> {
        if index == 0 || index > self.values.len() {
            return Err(ModelError::IndexOutOfRange { index, len: self.values.len() });
        }
        Ok(self.values[index - 1])
    }

    pub fn step(&self) -> f64 {
        if self.values.len() < 2 {
            0.0
        } else {
            self.values[1] - self.values[0]
        }
    }
}

/// Normalized, strictly positive probability vector over a hypothesis grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    probabilities: Vec<f64>,
}

impl Belief {
    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "belief over an empty grid");
        Self { probabilities: vec![1.0 / len as f64; len] }
    }

    /// Normalizes nonnegative weights into a belief, flooring tiny entries.
    pub fn normalize(weights: &[f64]) -> Result<Self, ModelError> {
        let mut probabilities = weights.to_vec();
        normalize_in_place(&mut probabilities)?;
        Ok(Self { probabilities })
    }

    /// Wraps an already normalized vector without touching it. Used by code
    /// that normalized through [`normalize_in_place`].
    pub(crate) fn from_normalized(probabilities: Vec<f64>) -> Self {
        Self { probabilities }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Zero-based index of the most likely hypothesis; ties go to the lower
    /// index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate().skip(1) {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    pub fn min(&self) -> f64 {
        self.probabilities.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Normalization with the positivity floor, done in place. Summation runs in
/// ascending index order.
pub fn normalize_in_place(weights: &mut [f64]) -> Result<(), ModelError> {
    let mut total = 0.0;
    for (index, &value) in weights.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(ModelError::InvalidWeight { index, value });
        }
        total += value;
    }
    if total <= 0.0 || weights.is_empty() {
        return Err(ModelError::AllZeroWeights);
    }
    let mut floored = false;
    for w in weights.iter_mut() {
        *w /= total;
        if *w < PROBABILITY_FLOOR {
            *w = PROBABILITY_FLOOR;
            floored = true;
        }
    }
    if floored {
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
    Ok(())
}
