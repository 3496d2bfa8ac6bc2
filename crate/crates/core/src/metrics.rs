//! Motion, appearance and smoothness scores for toy videos.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;
use crate::toy_world::{AppearanceClass, ToyVideo};

/// Intensity-weighted centroid per frame. Pixel `(row, col)` covers
/// `[col, col+1) × [row, row+1)`, so its centre is `(col + ½, row + ½)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidTrack {
    pub points: Vec<[f64; 2]>,
    pub mass: Vec<f64>,
}

impl CentroidTrack {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn centered(&self) -> Vec<[f64; 2]> {
        let n = self.points.len() as f64;
        let mx = self.points.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = self.points.iter().map(|p| p[1]).sum::<f64>() / n;
        self.points.iter().map(|p| [p[0] - mx, p[1] - my]).collect()
    }
}

pub fn centroid_track(video: &ToyVideo) -> Result<CentroidTrack> {
    let (h, w) = (video.height(), video.width());
    let mut points = Vec::with_capacity(video.frames());
    let mut mass = Vec::with_capacity(video.frames());
    for k in 0..video.frames() {
        let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let p = video.pixel(k, r, c) as f64;
                m += p;
                sx += p * (c as f64 + 0.5);
                sy += p * (r as f64 + 0.5);
            }
        }
        if !(m > 0.0) {
            return Err(Error::ZeroMass { frame: k });
        }
        points.push([sx / m, sy / m]);
        mass.push(m);
    }
    Ok(CentroidTrack { points, mass })
}

/// RMS distance between mean-centred tracks.
pub fn trajectory_rmse(a: &CentroidTrack, b: &CentroidTrack) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidShape(format!("track lengths {} and {} differ", a.len(), b.len())));
    }
    let (ca, cb) = (a.centered(), b.centered());
    let ms = ca.iter().zip(&cb).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum::<f64>()
        / a.len() as f64;
    Ok(ms.sqrt())
}

/// `1 / (1 + RMSE)` of the mean-centred tracks.
pub fn motion_fidelity(src: &CentroidTrack, generated: &CentroidTrack) -> Result<f64> {
    Ok(1.0 / (1.0 + trajectory_rmse(src, generated)?))
}

fn cosine(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
    }
}

fn same_dims(a: &ToyVideo, b: &ToyVideo) -> Result<()> {
    if (a.frames(), a.height(), a.width()) != (b.frames(), b.height(), b.width()) {
        return Err(Error::InvalidShape(format!(
            "videos {}x{}x{} and {}x{}x{} differ",
            a.frames(),
            a.height(),
            a.width(),
            b.frames(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean cosine between consecutive-frame differences; zero-norm differences
/// contribute 0.
pub fn diff_field_similarity(src: &ToyVideo, generated: &ToyVideo) -> Result<f64> {
    same_dims(src, generated)?;
    let f = src.frames();
    let mut total = 0.0;
    for k in 0..f - 1 {
        let ds = src.frame(k + 1).iter().zip(src.frame(k)).map(|(&a, &b)| a as f64 - b as f64);
        let dg = generated.frame(k + 1).iter().zip(generated.frame(k)).map(|(&a, &b)| a as f64 - b as f64);
        total += cosine(ds, dg).unwrap_or(0.0);
    }
    Ok(total / (f - 1) as f64)
}

/// Subpixel phases per axis used for the appearance templates.
const PHASES: usize = 4;
/// Added to the NCC denominator so blank patches score 0.
const NCC_EPS: f64 = 1e-9;

struct Template {
    size: usize,
    /// Zero-mean template values.
    values: Vec<f64>,
    norm: f64,
}

fn templates(class: &AppearanceClass) -> Vec<Template> {
    let size = 2 * class.extent().ceil() as usize + 2;
    let mut out = Vec::with_capacity(PHASES * PHASES);
    for py in 0..PHASES {
        for px in 0..PHASES {
            let center = [size as f64 / 2.0 + px as f64 / PHASES as f64, size as f64 / 2.0 + py as f64 / PHASES as f64];
            let raw: Vec<f64> = (0..size * size)
                .map(|i| class.coverage(center, (i % size) as f64, (i / size) as f64))
                .collect();
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let values: Vec<f64> = raw.iter().map(|v| v - mean).collect();
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.push(Template { size, values, norm });
        }
    }
    out
}

/// Mean over frames of the best normalized cross-correlation between a frame
/// patch and the class template (over positions and subpixel phases),
/// clamped to `[0, 1]`.
pub fn appearance_score(video: &ToyVideo, class: &AppearanceClass) -> f64 {
    let tpls = templates(class);
    let size = tpls[0].size;
    let (h, w) = (video.height(), video.width());
    if size > h || size > w {
        return 0.0;
    }
    let n = (size * size) as f64;
    let mut total = 0.0;
    let mut patch = vec![0.0f64; size * size];
    for k in 0..video.frames() {
        let frame = video.frame(k);
        let mut best = 0.0f64;
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                for r in 0..size {
                    for c in 0..size {
                        patch[r * size + c] = frame[(y0 + r) * w + x0 + c] as f64;
                    }
                }
                let mean = patch.iter().sum::<f64>() / n;
                let pn = patch.iter().map(|p| (p - mean).powi(2)).sum::<f64>().sqrt();
                if pn == 0.0 {
                    continue;
                }
                for t in &tpls {
                    // template is zero-mean, so the patch mean drops out
                    let dot: f64 = patch.iter().zip(&t.values).map(|(p, v)| p * v).sum();
                    best = best.max(dot / (pn * t.norm + NCC_EPS));
                }
            }
        }
        total += best.clamp(0.0, 1.0);
    }
    total / video.frames() as f64
}

/// Mean cosine between consecutive flattened frames. Two all-zero frames
/// count as identical; one all-zero frame counts as 0.
pub fn temporal_consistency(video: &ToyVideo) -> f64 {
    consecutive_cosine((0..video.frames()).map(|k| video.frame(k)).collect())
}

/// Latent-space variant of [`temporal_consistency`].
pub fn temporal_consistency_latent(z: &LatentTensor) -> f64 {
    consecutive_cosine((0..z.shape().frames).map(|k| z.frame(k)).collect())
}

fn consecutive_cosine(frames: Vec<&[f32]>) -> f64 {
    if frames.len() < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for pair in frames.windows(2) {
        let a = pair[0].iter().map(|&x| x as f64);
        let b = pair[1].iter().map(|&x| x as f64);
        total += match cosine(a.clone(), b.clone()) {
            Some(c) => c,
            None if a.chain(b).all(|x| x == 0.0) => 1.0,
            None => 0.0,
        };
    }
    total / (frames.len() - 1) as f64
}

/// One-sided sign test of "first beats second" over paired samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, ½)`; ties are dropped.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// Counts pairs with `better(a) > better(b)` as wins.
pub fn sign_test(pairs: &[(f64, f64)]) -> SignTest {
    let wins = pairs.iter().filter(|(a, b)| a > b).count();
    let losses = pairs.iter().filter(|(a, b)| a < b).count();
    let ties = pairs.len() - wins - losses;
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        Binomial::new(0.5, n as u64).map(|b| b.sf(wins as u64 - 1)).unwrap_or(1.0)
    };
    SignTest { wins, losses, ties, p_value }
}
