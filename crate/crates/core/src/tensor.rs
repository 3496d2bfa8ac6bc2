//! Rank-4 latent container `(frames, height, width, channels)`.
//!
//! Values are stored as `f32`, row-major with channels fastest. Every
//! arithmetic helper evaluates in `f64` and rounds once on store; reductions
//! accumulate in `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        let shape = Shape { frames, height, width, channels };
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!("every dimension must be >= 1, got {shape}")));
        }
        Ok(shape)
    }

    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    /// Number of values in one frame slab `(H, W, C)`.
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.frames, self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        Self::from_vec(shape, vec![value; shape.numel()])
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {shape} ({} values)",
                data.len(),
                shape.numel()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LatentTensor::from_vec".into()));
        }
        Ok(Self { shape, data })
    }

    /// Build from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Shape, data: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::from_vec(shape, data.into_iter().map(|v| v as f32).collect())
    }

    /// A `(1, 1, 1, n)` tensor; handy for scalar and vector examples.
    pub fn from_slice(values: &[f32]) -> Result<Self> {
        Self::from_vec(Shape::new(1, 1, 1, values.len())?, values.to_vec())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape, found: other.shape });
        }
        Ok(())
    }

    /// Elementwise map evaluated in `f64`.
    pub fn map(&self, what: &str, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::checked(self.shape, self.data.iter().map(|&a| f(a as f64)), what)
    }

    /// Elementwise binary map evaluated in `f64`.
    pub fn zip_map(&self, other: &LatentTensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Self::checked(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a as f64, b as f64)),
            what,
        )
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &LatentTensor, b: f64) -> Result<Self> {
        self.zip_map(other, "lin_comb", |x, y| a * x + b * y)
    }

    pub fn add(&self, other: &LatentTensor) -> Result<Self> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &LatentTensor) -> Result<Self> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map("scale", |x| s * x)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&a| (a as f64) * (a as f64)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// Copy of frames `start..end` as a new tensor.
    pub fn frames_range(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.frames {
            return Err(Error::InvalidShape(format!(
                "frame range {start}..{end} invalid for {} frames",
                self.shape.frames
            )));
        }
        let n = self.shape.frame_len();
        let shape = Shape { frames: end - start, ..self.shape };
        Ok(Self { shape, data: self.data[start * n..end * n].to_vec() })
    }

    /// Reorder the frame axis: output frame `k` is input frame `perm[k]`.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.shape.frames {
            return Err(Error::InvalidShape("permutation length must equal frame count".into()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidShape("not a permutation".into()));
            }
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.frame(p));
        }
        Ok(Self { shape: self.shape, data })
    }

    pub(crate) fn checked(shape: Shape, values: impl Iterator<Item = f64>, what: &str) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        for v in values {
            let v = v as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite(what.to_string()));
            }
            data.push(v);
        }
        debug_assert_eq!(data.len(), shape.numel());
        Ok(Self { shape, data })
    }
}

/// Flattened inner product over all `F·H·W·C` entries.
pub fn inner_product(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum())
}

/// Linear interpolation path `(1 - t) z0 + t z1`.
pub fn lerp_path(z0: &LatentTensor, z1: &LatentTensor, t: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    z0.zip_map(z1, "lerp_path", |a, b| (1.0 - t) * a + t * b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f32]) -> LatentTensor {
        LatentTensor::from_slice(values).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        let ones = LatentTensor::filled(Shape::new(1, 2, 2, 1).unwrap(), 1.0).unwrap();
        assert_eq!(inner_product(&ones, &ones).unwrap(), 4.0);
        assert_eq!(inner_product(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(inner_product(&t(&[1.0, 2.0, 3.0]), &t(&[4.0, 5.0, 6.0])).unwrap(), 32.0);
    }

    #[test]
    fn inner_product_rejects_shape_mismatch() {
        let err = inner_product(&t(&[1.0, 2.0]), &t(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn lerp_endpoints_and_midpoint() {
        let z0 = t(&[0.0, 3.0]);
        let z1 = t(&[2.0, -1.0]);
        assert_eq!(lerp_path(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(lerp_path(&z0, &z1, 1.0).unwrap(), z1);
        assert_eq!(lerp_path(&t(&[0.0]), &t(&[2.0]), 0.25).unwrap().data(), &[0.5]);
    }

    #[test]
    fn lerp_rejects_out_of_range_t() {
        assert!(matches!(lerp_path(&t(&[0.0]), &t(&[1.0]), 1.5), Err(Error::Domain(_))));
        assert!(matches!(lerp_path(&t(&[0.0]), &t(&[1.0]), -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn construction_validates() {
        let shape = Shape::new(1, 1, 1, 2).unwrap();
        assert!(LatentTensor::from_vec(shape, vec![1.0]).is_err());
        assert!(LatentTensor::from_vec(shape, vec![1.0, f32::NAN]).is_err());
        assert!(Shape::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let big = t(&[f32::MAX]);
        assert!(matches!(big.scale(10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn permute_frames_moves_slabs() {
        let shape = Shape::new(3, 1, 1, 2).unwrap();
        let z = LatentTensor::from_vec(shape, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let p = z.permute_frames(&[2, 0, 1]).unwrap();
        assert_eq!(p.data(), &[4., 5., 0., 1., 2., 3.]);
        assert!(z.permute_frames(&[0, 0, 1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
            (1usize..24).prop_flat_map(|n| {
                (
                    prop::collection::vec(-10.0f32..10.0, n),
                    prop::collection::vec(-10.0f32..10.0, n),
                    prop::collection::vec(-10.0f32..10.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn inner_product_symmetric_and_bilinear((a, b, c) in pair(), s in -3.0f64..3.0) {
                let (a, b, c) = (t(&a), t(&b), t(&c));
                let ab = inner_product(&a, &b).unwrap();
                prop_assert_eq!(ab, inner_product(&b, &a).unwrap());
                let lhs = inner_product(&a.lin_comb(s, &c, 1.0).unwrap(), &b).unwrap();
                let rhs = s * ab + inner_product(&c, &b).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()));
            }

            #[test]
            fn lerp_minus_endpoint_identity((a, b, _c) in pair(), tt in 0.0f64..=1.0) {
                let (z0, z1) = (t(&a), t(&b));
                let zt = lerp_path(&z0, &z1, tt).unwrap();
                for i in 0..z0.len() {
                    let lhs = zt.data()[i] as f64 - z1.data()[i] as f64;
                    let rhs = (1.0 - tt) * (z0.data()[i] as f64 - z1.data()[i] as f64);
                    prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
                }
            }
        }
    }
}
