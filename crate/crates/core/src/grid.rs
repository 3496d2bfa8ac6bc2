use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform knots `t_k = 1 - k/T`, `k = 0..=T`, walked from noise (`t = 1`) to data (`t = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Knot `k`; `t(0) = 1`, `t(T) = 0` exactly.
    pub fn t(&self, k: usize) -> f64 {
        assert!(k <= self.steps, "knot {k} out of range");
        (self.steps - k) as f64 / self.steps as f64
    }

    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.t(k))
    }
}
