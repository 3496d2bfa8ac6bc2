//! Small fully connected velocity network trained with the flow-matching loss.
//!
//! Input is `flatten(z_t) ⊕ t ⊕ one_hot(condition)`, two SiLU hidden layers,
//! linear output of the latent size. Gradients are written out by hand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CallCounter, VelocityField};
use crate::error::{Error, Result};
use crate::fmlt::{self, RawTensor};
use crate::optim::Adam;
use crate::rng::{sample_gaussian, streams, SeededRng};
use crate::tensor::{lerp_path, LatentTensor, Shape};
use crate::toy_world::{Condition, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHeader {
    pub layer_sizes: [usize; 4],
    pub nonlinearity: String,
    pub seed: u64,
    pub latent_shape: Shape,
    pub class_ids: Vec<u32>,
    pub t_min: f64,
    pub cond_dropout: f64,
}

#[derive(Clone, Debug)]
struct Layer {
    /// Row-major `[input][output]`.
    w: Vec<f32>,
    b: Vec<f32>,
    inputs: usize,
    outputs: usize,
}

impl Layer {
    fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| (rng.normal() * scale) as f32).collect();
        Self { w, b: vec![0.0; outputs], inputs, outputs }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.b.iter().map(|&b| b as f64).collect();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
            for (yo, &w) in y.iter_mut().zip(row) {
                *yo += xi * w as f64;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (g, &d) in gb.iter_mut().zip(dy) {
            *g += d;
        }
        for i in 0..self.inputs {
            let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
            let grow = &mut gw[i * self.outputs..(i + 1) * self.outputs];
            let mut acc = 0.0;
            for o in 0..self.outputs {
                grow[o] += x[i] * dy[o];
                acc += row[o] as f64 * dy[o];
            }
            dx[i] = acc;
        }
        dx
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub struct MlpField {
    header: MlpHeader,
    layers: [Layer; 3],
    adam: Adam,
    evals: CallCounter,
}

struct Activations {
    input: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl MlpField {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new(latent_shape: Shape, class_ids: Vec<u32>, hidden: usize, seed: u64) -> Self {
        let d = latent_shape.numel();
        let d_in = d + 1 + class_ids.len() + 1;
        let mut rng = SeededRng::new(seed, streams::PARAMS);
        let layers = [
            Layer::init(d_in, hidden, &mut rng),
            Layer::init(hidden, hidden, &mut rng),
            Layer::init(hidden, d, &mut rng),
        ];
        let header = MlpHeader {
            layer_sizes: [d_in, hidden, hidden, d],
            nonlinearity: "silu".into(),
            seed,
            latent_shape,
            class_ids,
            t_min: 1e-3,
            cond_dropout: 0.1,
        };
        let field = Self::from_parts(header, layers);
        log::info!("mlp field with {} parameters", field.parameter_count());
        field
    }

    pub fn for_dataset(dataset: &Dataset, hidden: usize, seed: u64) -> Self {
        Self::new(dataset.shape(), dataset.classes().iter().map(|c| c.id).collect(), hidden, seed)
    }

    fn from_parts(header: MlpHeader, layers: [Layer; 3]) -> Self {
        let n = layers.iter().map(|l| l.w.len() + l.b.len()).sum();
        Self { header, layers, adam: Adam::new(n), evals: CallCounter::default() }
    }

    pub fn header(&self) -> &MlpHeader {
        &self.header
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters flattened in layer order (`w`, then `b`).
    pub fn parameters(&self) -> Vec<f32> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    fn set_parameters(&mut self, flat: &[f32]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    fn slot(&self, condition: Condition) -> Result<usize> {
        match condition {
            Condition::Empty => Ok(self.header.class_ids.len()),
            Condition::Class(c) => self
                .header
                .class_ids
                .iter()
                .position(|&k| k == c)
                .ok_or_else(|| Error::Condition(format!("unknown class {c}"))),
        }
    }

    fn forward(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<Activations> {
        if z.shape() != self.header.latent_shape {
            return Err(Error::ShapeMismatch { expected: self.header.latent_shape, found: z.shape() });
        }
        let mut input: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        input.push(t);
        let mut onehot = vec![0.0; self.header.class_ids.len() + 1];
        onehot[self.slot(condition)?] = 1.0;
        input.extend(onehot);
        let pre1 = self.layers[0].forward(&input);
        let h1: Vec<f64> = pre1.iter().map(|&x| silu(x)).collect();
        let pre2 = self.layers[1].forward(&h1);
        let h2: Vec<f64> = pre2.iter().map(|&x| silu(x)).collect();
        let out = self.layers[2].forward(&h2);
        Ok(Activations { input, pre1, h1, pre2, h2, out })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("header.json"), serde_json::to_vec_pretty(&self.header)?)?;
        for (k, l) in self.layers.iter().enumerate() {
            fmlt::write_to(
                fs::File::create(dir.join(format!("w{}.fmlt", k + 1)))?,
                &RawTensor::new(vec![l.inputs, l.outputs], l.w.clone())?,
            )?;
            fmlt::write_to(
                fs::File::create(dir.join(format!("b{}.fmlt", k + 1)))?,
                &RawTensor::new(vec![l.outputs], l.b.clone())?,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: MlpHeader = serde_json::from_slice(&fs::read(dir.join("header.json"))?)?;
        if header.nonlinearity != "silu" {
            return Err(Error::Format(format!("unsupported nonlinearity {}", header.nonlinearity)));
        }
        let s = header.layer_sizes;
        let dims = [(s[0], s[1]), (s[1], s[2]), (s[2], s[3])];
        let mut layers = Vec::with_capacity(3);
        for (k, &(i, o)) in dims.iter().enumerate() {
            let w = fmlt::read_from(fs::File::open(dir.join(format!("w{}.fmlt", k + 1)))?)?;
            let b = fmlt::read_from(fs::File::open(dir.join(format!("b{}.fmlt", k + 1)))?)?;
            if w.dims != [i, o] || b.dims != [o] {
                return Err(Error::Format(format!("layer {} dims disagree with header", k + 1)));
            }
            layers.push(Layer { w: w.data, b: b.data, inputs: i, outputs: o });
        }
        let layers: [Layer; 3] = layers.try_into().map_err(|_| Error::Format("expected three layers".into()))?;
        Ok(Self::from_parts(header, layers))
    }
}

impl VelocityField for MlpField {
    fn eval(&self, z: &LatentTensor, t: f64, condition: Condition) -> Result<LatentTensor> {
        self.evals.bump();
        let act = self.forward(z, t, condition)?;
        LatentTensor::from_f64(z.shape(), act.out)
    }

    fn eval_count(&self) -> u64 {
        self.evals.get()
    }

    fn name(&self) -> &str {
        "mlp"
    }
}

/// Parameter gradient, flattened in `parameters()` order, given `∂loss/∂out`.
fn backprop(field: &MlpField, act: &Activations, d_out: &[f64]) -> Vec<f64> {
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
        field.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
    let [g0, g1, g2] = &mut grads[..] else { unreachable!("three layers") };
    let dh2 = field.layers[2].backward(&act.h2, d_out, &mut g2.0, &mut g2.1);
    let dpre2: Vec<f64> = dh2.iter().zip(&act.pre2).map(|(g, &x)| g * silu_grad(x)).collect();
    let dh1 = field.layers[1].backward(&act.h1, &dpre2, &mut g1.0, &mut g1.1);
    let dpre1: Vec<f64> = dh1.iter().zip(&act.pre1).map(|(g, &x)| g * silu_grad(x)).collect();
    field.layers[0].backward(&act.input, &dpre1, &mut g0.0, &mut g0.1);
    grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect()
}

/// One flow-matching step on a single `(x, z₁, t)` draw: forms
/// `z_t = (1 − t)x + t z₁`, regresses onto `z₁ − x` with squared error, and
/// applies one Adam update. Returns the loss before the update.
pub fn fm_train_step(field: &mut MlpField, dataset: &Dataset, rng: &mut SeededRng, lr_train: f64) -> Result<f64> {
    let item = &dataset.items()[rng.index(dataset.len())];
    let noise = sample_gaussian(dataset.shape(), rng);
    let t = rng.uniform(field.header.t_min, 1.0);
    let condition = if rng.uniform(0.0, 1.0) < field.header.cond_dropout {
        Condition::Empty
    } else {
        Condition::Class(item.class_id)
    };
    let zt = lerp_path(&item.latent, &noise, t)?;
    let target: Vec<f64> =
        noise.data().iter().zip(item.latent.data()).map(|(&e, &x)| e as f64 - x as f64).collect();

    let act = field.forward(&zt, t, condition)?;
    let diff: Vec<f64> = act.out.iter().zip(&target).map(|(o, y)| o - y).collect();
    let loss: f64 = diff.iter().map(|d| d * d).sum();
    if !loss.is_finite() {
        return Err(Error::NonFinite("fm_train_step loss".into()));
    }

    let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    let flat_grad: Vec<f32> = backprop(field, &act, &d_out).into_iter().map(|g| g as f32).collect();
    let mut params = field.parameters();
    field.adam.update(&mut params, &flat_grad, lr_train);
    field.set_parameters(&params);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::{AppearanceClass, Codec, DatasetItem, ShapeKind, Trajectory};

    fn tiny_dataset() -> Dataset {
        let class = AppearanceClass::new(0, ShapeKind::Disk, 1.0, 1.0).unwrap();
        let shape = Shape::new(2, 2, 2, 1).unwrap();
        let latent = LatentTensor::from_vec(shape, vec![0.5, -0.5, 1.0, -1.0, 0.25, 0.0, -0.75, 0.8]).unwrap();
        let item = DatasetItem {
            latent,
            class_id: 0,
            trajectory: Trajectory::Linear { start: [0.0, 0.0], velocity: [0.0, 0.0] },
        };
        Dataset::from_items(vec![class], vec![item], Codec::Identity).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let ds = tiny_dataset();
        let mut f = MlpField::for_dataset(&ds, 8, 1);
        let before = f.parameters();
        let mut rng = SeededRng::new(5, streams::TRAINING);
        fm_train_step(&mut f, &ds, &mut rng, 0.0).unwrap();
        assert_eq!(f.parameters(), before);
    }

    /// Backprop gradient against central differences of the loss on one draw.
    #[test]
    fn manual_gradient_matches_finite_differences() {
        let ds = tiny_dataset();
        let f = MlpField::for_dataset(&ds, 5, 3);
        let z = LatentTensor::from_vec(ds.shape(), vec![0.3, -0.2, 0.9, 0.1, -0.4, 0.6, 0.0, -0.8]).unwrap();
        let target: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = 0.6;
        let loss = |f: &MlpField| -> f64 {
            let a = f.forward(&z, t, Condition::Class(0)).unwrap();
            a.out.iter().zip(&target).map(|(o, y)| (o - y).powi(2)).sum()
        };
        let act = f.forward(&z, t, Condition::Class(0)).unwrap();
        let d_out: Vec<f64> = act.out.iter().zip(&target).map(|(o, y)| 2.0 * (o - y)).collect();
        let analytic = backprop(&f, &act, &d_out);

        let base = f.parameters();
        let mut probe = MlpField::from_parts(f.header.clone(), f.layers.clone());
        for idx in (0..base.len()).step_by(7) {
            let h = 1e-2f32;
            let mut p = base.clone();
            p[idx] = base[idx] + h;
            probe.set_parameters(&p);
            let up = loss(&probe);
            p[idx] = base[idx] - h;
            probe.set_parameters(&p);
            let down = loss(&probe);
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - analytic[idx]).abs() < 2e-3 * (1.0 + analytic[idx].abs()), "param {idx}: {fd} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = tiny_dataset();
        let f = MlpField::for_dataset(&ds, 6, 11);
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        let g = MlpField::load(dir.path()).unwrap();
        assert_eq!(g.header(), f.header());
        assert_eq!(g.parameters(), f.parameters());
        let z = LatentTensor::zeros(ds.shape());
        assert_eq!(f.eval(&z, 0.5, Condition::Empty).unwrap(), g.eval(&z, 0.5, Condition::Empty).unwrap());
    }
}
