use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth motion of one object, in continuous pixel coordinates.
/// `x` grows along columns, `y` along rows; pixel `(row, col)` covers
/// `[col, col + 1) × [row, row + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Linear {
        start: [f64; 2],
        velocity: [f64; 2],
    },
    Circular {
        center: [f64; 2],
        radius: f64,
        angular_rate: f64,
        phase: f64,
    },
    /// `start + drift·k + amplitude·sin(angular_rate·k + phase)`.
    Sinusoidal {
        start: [f64; 2],
        drift: [f64; 2],
        amplitude: [f64; 2],
        angular_rate: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, frame: usize) -> [f64; 2] {
        let k = frame as f64;
        match *self {
            Trajectory::Linear { start, velocity } => {
                [start[0] + velocity[0] * k, start[1] + velocity[1] * k]
            }
            Trajectory::Circular { center, radius, angular_rate, phase } => {
                let a = angular_rate * k + phase;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
            Trajectory::Sinusoidal { start, drift, amplitude, angular_rate, phase } => {
                let s = (angular_rate * k + phase).sin();
                [
                    start[0] + drift[0] * k + amplitude[0] * s,
                    start[1] + drift[1] * k + amplitude[1] * s,
                ]
            }
        }
    }

    pub fn positions(&self, frames: usize) -> Vec<[f64; 2]> {
        (0..frames).map(|k| self.position(k)).collect()
    }

    /// Checks that a shape of the given extent stays inside a `height × width`
    /// canvas with `margin` pixels to spare at every frame.
    pub fn validate(&self, frames: usize, height: usize, width: usize, extent: f64, margin: f64) -> Result<()> {
        for (k, [x, y]) in self.positions(frames).into_iter().enumerate() {
            let lo = extent + margin;
            if !(x.is_finite() && y.is_finite())
                || x - lo < 0.0
                || y - lo < 0.0
                || x + lo > width as f64
                || y + lo > height as f64
            {
                return Err(Error::Geometry(format!(
                    "frame {k}: position ({x:.2}, {y:.2}) leaves the {height}x{width} canvas for extent {extent}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_positions() {
        let t = Trajectory::Linear { start: [4.0, 5.0], velocity: [1.0, -0.5] };
        assert_eq!(t.position(0), [4.0, 5.0]);
        assert_eq!(t.position(2), [6.0, 4.0]);
    }

    #[test]
    fn circular_returns_to_start_after_full_turn() {
        let t = Trajectory::Circular {
            center: [16.0, 16.0],
            radius: 5.0,
            angular_rate: std::f64::consts::PI / 4.0,
            phase: 0.0,
        };
        let a = t.position(0);
        let b = t.position(8);
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn validation_catches_escape() {
        let t = Trajectory::Linear { start: [4.0, 16.0], velocity: [5.0, 0.0] };
        assert!(t.validate(8, 32, 32, 3.0, 0.0).is_err());
        assert!(t.validate(2, 32, 32, 3.0, 0.0).is_ok());
    }

    #[test]
    fn serde_tagged_by_kind() {
        let t = Trajectory::Linear { start: [1.0, 2.0], velocity: [0.5, 0.0] };
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"kind\":\"linear\""));
        assert_eq!(serde_json::from_str::<Trajectory>(&s).unwrap(), t);
    }
}
