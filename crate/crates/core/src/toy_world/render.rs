//! Rasterizer with exact area coverage.

use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    /// Axis-aligned square with half side `radius`.
    Square,
    /// Annulus between `radius / 2` and `radius`.
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceClass {
    pub id: u32,
    pub shape: ShapeKind,
    pub radius: f64,
    pub intensity: f64,
}

impl AppearanceClass {
    pub fn new(id: u32, shape: ShapeKind, radius: f64, intensity: f64) -> Result<Self> {
        if !(radius >= 1.0) {
            return Err(Error::Geometry(format!("radius {radius} below 1 px")));
        }
        if !(intensity > 0.0 && intensity <= 1.0) {
            return Err(Error::Domain(format!("intensity {intensity} outside (0, 1]")));
        }
        Ok(Self { id, shape, radius, intensity })
    }

    /// Half-extent of the bounding box.
    pub fn extent(&self) -> f64 {
        self.radius
    }

    /// Area-weighted intensity covering pixel `[x0, x0+1) × [y0, y0+1)` with the
    /// shape centred at `center`.
    pub fn coverage(&self, center: [f64; 2], x0: f64, y0: f64) -> f64 {
        let (cx, cy) = (center[0], center[1]);
        let area = match self.shape {
            ShapeKind::Disk => disk_rect_area(self.radius, x0 - cx, x0 + 1.0 - cx, y0 - cy, y0 + 1.0 - cy),
            ShapeKind::Square => {
                let a = self.radius;
                interval_overlap(x0, x0 + 1.0, cx - a, cx + a) * interval_overlap(y0, y0 + 1.0, cy - a, cy + a)
            }
            ShapeKind::Ring => {
                let (x0, x1, y0, y1) = (x0 - cx, x0 + 1.0 - cx, y0 - cy, y0 + 1.0 - cy);
                disk_rect_area(self.radius, x0, x1, y0, y1) - disk_rect_area(0.5 * self.radius, x0, x1, y0, y1)
            }
        };
        self.intensity * area.clamp(0.0, 1.0)
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Antiderivative of `sqrt(r² - x²)`.
fn half_chord_integral(r: f64, x: f64) -> f64 {
    let x = x.clamp(-r, r);
    0.5 * (x * (r * r - x * x).max(0.0).sqrt() + r * r * (x / r).asin())
}

/// Exact area of the origin-centred disk of radius `r` intersected with
/// `[x0, x1] × [y0, y1]`, by piecewise closed-form integration of the
/// vertical chord overlap.
pub(crate) fn disk_rect_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let lo = x0.max(-r);
    let hi = x1.min(r);
    if lo >= hi || y0 >= r || y1 <= -r {
        return 0.0;
    }
    let mut cuts = vec![lo, hi];
    for y in [y0, y1] {
        if y.abs() < r {
            let x = (r * r - y * y).sqrt();
            cuts.extend([-x, x].into_iter().filter(|&c| c > lo && c < hi));
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let h = (r * r - mid * mid).max(0.0).sqrt();
        let upper_is_chord = h < y1;
        let lower_is_chord = -h > y0;
        let up = if upper_is_chord { h } else { y1 };
        let low = if lower_is_chord { -h } else { y0 };
        if up <= low {
            continue;
        }
        let g = half_chord_integral(r, b) - half_chord_integral(r, a);
        let width = b - a;
        area += if upper_is_chord { g } else { y1 * width };
        area -= if lower_is_chord { -g } else { y0 * width };
    }
    area
}

/// Grayscale clip with values in `[0, 1]`, stored frame-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVideo {
    frames: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// Rendered intensities are snapped to this grid so the identity codec
/// round-trips bit-exactly in `f32`.
const QUANTUM: f64 = 65536.0;

impl ToyVideo {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if frames < 2 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "video needs >= 2 frames and a non-empty canvas, got {frames}x{height}x{width}"
            )));
        }
        if pixels.len() != frames * height * width {
            return Err(Error::InvalidShape("pixel count does not match video dimensions".into()));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("ToyVideo::new".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self { frames, height, width, pixels })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[k * n..(k + 1) * n]
    }

    pub fn pixel(&self, k: usize, row: usize, col: usize) -> f32 {
        self.pixels[(k * self.height + row) * self.width + col]
    }

    /// Frames in reverse order.
    pub fn reversed(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for k in (0..self.frames).rev() {
            pixels.extend_from_slice(self.frame(k));
        }
        Self { pixels, ..*self }
    }
}

/// Renders one object following `trajectory`.
pub fn render_video(
    appearance: &AppearanceClass,
    trajectory: &Trajectory,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<ToyVideo> {
    render_scene(&[(appearance.clone(), trajectory.clone())], frames, height, width)
}

/// Renders several objects additively; overlapping mass is clamped to 1.
pub fn render_scene(
    objects: &[(AppearanceClass, Trajectory)],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<ToyVideo> {
    if frames < 2 {
        return Err(Error::InvalidShape(format!("video needs >= 2 frames, got {frames}")));
    }
    let mut acc = vec![0.0f64; frames * height * width];
    for (appearance, trajectory) in objects {
        let extent = appearance.extent();
        if 2.0 * extent > height.min(width) as f64 {
            return Err(Error::Geometry(format!(
                "shape of extent {extent} does not fit a {height}x{width} canvas"
            )));
        }
        trajectory.validate(frames, height, width, extent, 0.0)?;
        for k in 0..frames {
            let center = trajectory.position(k);
            let r0 = ((center[1] - extent).floor().max(0.0)) as usize;
            let r1 = ((center[1] + extent).ceil() as usize).min(height);
            let c0 = ((center[0] - extent).floor().max(0.0)) as usize;
            let c1 = ((center[0] + extent).ceil() as usize).min(width);
            for row in r0..r1 {
                for col in c0..c1 {
                    acc[(k * height + row) * width + col] += appearance.coverage(center, col as f64, row as f64);
                }
            }
        }
    }
    let pixels = acc
        .into_iter()
        .map(|p| ((p.clamp(0.0, 1.0) * QUANTUM).round() / QUANTUM) as f32)
        .collect();
    ToyVideo::new(frames, height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(radius: f64) -> AppearanceClass {
        AppearanceClass::new(0, ShapeKind::Disk, radius, 1.0).unwrap()
    }

    #[test]
    fn disk_area_matches_pi_r_squared() {
        for r in [1.0, 2.5, 4.0, 7.3] {
            let a = disk_rect_area(r, -10.0, 10.0, -10.0, 10.0);
            assert!((a - std::f64::consts::PI * r * r).abs() < 1e-9, "r {r}: {a}");
        }
    }

    #[test]
    fn disk_quadrant_and_half() {
        let r = 3.0;
        let full = std::f64::consts::PI * r * r;
        assert!((disk_rect_area(r, 0.0, 5.0, 0.0, 5.0) - full / 4.0).abs() < 1e-9);
        assert!((disk_rect_area(r, -5.0, 5.0, 0.0, 5.0) - full / 2.0).abs() < 1e-9);
        // strip through the middle
        let strip = disk_rect_area(r, -0.5, 0.5, -5.0, 5.0);
        assert!(strip > 5.9 && strip < 6.0);
    }

    #[test]
    fn disk_area_matches_supersampling() {
        // independent check: 400x400 point sampling of a few awkward pixels
        let r = 2.7;
        for &(x0, y0) in &[(-3.1, -0.4), (1.9, 1.2), (-0.5, 2.1), (2.2, -2.6)] {
            let exact = disk_rect_area(r, x0, x0 + 1.0, y0, y0 + 1.0);
            let n = 400;
            let mut hits = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let x = x0 + (j as f64 + 0.5) / n as f64;
                    let y = y0 + (i as f64 + 0.5) / n as f64;
                    if x * x + y * y <= r * r {
                        hits += 1;
                    }
                }
            }
            let approx = hits as f64 / (n * n) as f64;
            assert!((exact - approx).abs() < 2e-3, "({x0},{y0}): {exact} vs {approx}");
        }
    }

    #[test]
    fn static_trajectory_gives_identical_frames() {
        let t = Trajectory::Linear { start: [16.0, 16.0], velocity: [0.0, 0.0] };
        let v = render_video(&disk(4.0), &t, 4, 32, 32).unwrap();
        for k in 1..4 {
            assert_eq!(v.frame(k), v.frame(0));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = Trajectory::Circular { center: [16.0, 16.0], radius: 6.0, angular_rate: 0.7, phase: 0.3 };
        let a = render_video(&disk(3.5), &t, 8, 32, 32).unwrap();
        let b = render_video(&disk(3.5), &t, 8, 32, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_shape_is_geometry_error() {
        let t = Trajectory::Linear { start: [4.0, 4.0], velocity: [0.0, 0.0] };
        let err = render_video(&disk(5.0), &t, 2, 8, 8).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn ring_has_hole() {
        let ring = AppearanceClass::new(2, ShapeKind::Ring, 4.0, 1.0).unwrap();
        let t = Trajectory::Linear { start: [8.0, 8.0], velocity: [0.0, 0.0] };
        let v = render_video(&ring, &t, 2, 16, 16).unwrap();
        assert_eq!(v.pixel(0, 7, 7), 0.0);
        assert!(v.pixel(0, 8, 4) > 0.5);
    }

    #[test]
    fn invalid_classes_rejected() {
        assert!(AppearanceClass::new(0, ShapeKind::Disk, 0.5, 1.0).is_err());
        assert!(AppearanceClass::new(0, ShapeKind::Disk, 2.0, 0.0).is_err());
        assert!(AppearanceClass::new(0, ShapeKind::Disk, 2.0, 1.5).is_err());
    }
}
