use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Observations `(t_i, x(t_i))` with strictly increasing times and finite
/// states. States are stored row-major, one row of length `dim` per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<f64>,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("trajectory needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("state buffer has {got} values, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("times must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("non-finite value at point {0}")]
    NonFinite(usize),
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<f64>, dim: usize) -> Result<Self, TrajectoryError> {
        if dim == 0 {
            return Err(TrajectoryError::ZeroDim);
        }
        if times.len() < 2 {
            return Err(TrajectoryError::TooShort(times.len()));
        }
        if states.len() != times.len() * dim {
            return Err(TrajectoryError::Shape {
                expected: times.len() * dim,
                got: states.len(),
            });
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(TrajectoryError::NotIncreasing(i + 1));
            }
        }
        for (i, t) in times.iter().enumerate() {
            let row = &states[i * dim..(i + 1) * dim];
            if !t.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(TrajectoryError::NonFinite(i));
            }
        }
        Ok(Self { times, states, dim })
    }

    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self, TrajectoryError> {
        let dim = rows.first().map_or(0, Vec::len);
        let states = rows.iter().flatten().copied().collect();
        Self::new(times, states, dim)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Row-major N×D state matrix.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn max_abs(&self) -> f64 {
        self.states.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Keeps the given (sorted, unique) point indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self, TrajectoryError> {
        let times = indices.iter().map(|&i| self.times[i]).collect();
        let mut states = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            states.extend_from_slice(self.state(i));
        }
        Self::new(times, states, self.dim)
    }

    /// Same times with new states (used by noise and rescaling).
    pub(crate) fn with_states(&self, states: Vec<f64>) -> Self {
        debug_assert_eq!(states.len(), self.states.len());
        Self {
            times: self.times.clone(),
            states,
            dim: self.dim,
        }
    }

    pub(crate) fn from_parts_unchecked(times: Vec<f64>, states: Vec<f64>, dim: usize) -> Self {
        Self { times, states, dim }
    }
}

/// `n` evenly spaced points from `start` to `end`, with both endpoints exact.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (end - start) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
            v[n - 1] = end;
            v
        }
    }
}
