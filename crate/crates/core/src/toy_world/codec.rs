//! Exact-inverse stand-in for the autoencoder: pixel `p` maps to latent `2p - 1`.

use serde::{Deserialize, Serialize};

use super::render::ToyVideo;
use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    #[default]
    Identity,
    /// Averages 2×2 pixel blocks; decoding replicates each latent over its block.
    Pooled2x2,
}

impl Codec {
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<Shape> {
        match self {
            Codec::Identity => Shape::new(frames, height, width, 1),
            Codec::Pooled2x2 => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::InvalidShape(format!(
                        "pooled codec needs even canvas sides, got {height}x{width}"
                    )));
                }
                Shape::new(frames, height / 2, width / 2, 1)
            }
        }
    }

    pub fn encode(&self, video: &ToyVideo) -> Result<LatentTensor> {
        let (f, h, w) = (video.frames(), video.height(), video.width());
        let shape = self.latent_shape(f, h, w)?;
        match self {
            Codec::Identity => LatentTensor::from_f64(shape, video.pixels().iter().map(|&p| 2.0 * p as f64 - 1.0)),
            Codec::Pooled2x2 => {
                let (hh, ww) = (shape.height, shape.width);
                let mut out = Vec::with_capacity(shape.numel());
                for k in 0..f {
                    for r in 0..hh {
                        for c in 0..ww {
                            let sum: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                .iter()
                                .map(|&(dr, dc)| video.pixel(k, 2 * r + dr, 2 * c + dc) as f64)
                                .sum();
                            out.push(2.0 * (sum / 4.0) - 1.0);
                        }
                    }
                }
                LatentTensor::from_f64(shape, out)
            }
        }
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ToyVideo> {
        let s = z.shape();
        let to_pixel = |v: f32| (((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0)) as f32;
        // only the first channel carries intensity
        let at = |k: usize, r: usize, c: usize| z.data()[((k * s.height + r) * s.width + c) * s.channels];
        match self {
            Codec::Identity => {
                let mut px = Vec::with_capacity(s.frames * s.height * s.width);
                for k in 0..s.frames {
                    for r in 0..s.height {
                        for c in 0..s.width {
                            px.push(to_pixel(at(k, r, c)));
                        }
                    }
                }
                ToyVideo::new(s.frames, s.height, s.width, px)
            }
            Codec::Pooled2x2 => {
                let (h, w) = (2 * s.height, 2 * s.width);
                let mut px = Vec::with_capacity(s.frames * h * w);
                for k in 0..s.frames {
                    for r in 0..h {
                        for c in 0..w {
                            px.push(to_pixel(at(k, r / 2, c / 2)));
                        }
                    }
                }
                ToyVideo::new(s.frames, h, w, px)
            }
        }
    }
}
