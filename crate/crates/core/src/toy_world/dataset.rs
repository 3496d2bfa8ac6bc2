use serde::{Deserialize, Serialize};

use super::codec::Codec;
use super::render::{render_video, AppearanceClass};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

/// Conditioning signal: a class label, or the empty prompt meaning "all items".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Empty,
    Class(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub latent: LatentTensor,
    pub class_id: u32,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    classes: Vec<AppearanceClass>,
    items: Vec<DatasetItem>,
    shape: Shape,
    codec: Codec,
}

impl Dataset {
    pub fn from_items(classes: Vec<AppearanceClass>, items: Vec<DatasetItem>, codec: Codec) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Config("dataset must not be empty".into()))?;
        let shape = first.latent.shape();
        for (i, item) in items.iter().enumerate() {
            if item.latent.shape() != shape {
                return Err(Error::ShapeMismatch { expected: shape, found: item.latent.shape() });
            }
            if !classes.iter().any(|c| c.id == item.class_id) {
                return Err(Error::Condition(format!("item {i} has unknown class {}", item.class_id)));
            }
        }
        Ok(Self { classes, items, shape, codec })
    }

    pub fn classes(&self) -> &[AppearanceClass] {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Option<&AppearanceClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    /// Item indices selected by `condition`.
    pub fn subset(&self, condition: Condition) -> Result<Vec<usize>> {
        let idx: Vec<usize> = match condition {
            Condition::Empty => (0..self.items.len()).collect(),
            Condition::Class(c) => {
                (0..self.items.len()).filter(|&i| self.items[i].class_id == c).collect()
            }
        };
        if idx.is_empty() {
            return Err(Error::Condition(format!("no dataset items for {condition:?}")));
        }
        Ok(idx)
    }

    /// One-hot slot for a condition: classes in table order, then the empty prompt.
    pub fn condition_slot(&self, condition: Condition) -> Result<usize> {
        match condition {
            Condition::Empty => Ok(self.classes.len()),
            Condition::Class(c) => self
                .classes
                .iter()
                .position(|k| k.id == c)
                .ok_or_else(|| Error::Condition(format!("unknown class {c}"))),
        }
    }
}

/// Renders and encodes one item per `(class, trajectory)` spec, in order.
pub fn build_dataset(
    specs: &[(AppearanceClass, Trajectory)],
    frames: usize,
    height: usize,
    width: usize,
    codec: Codec,
) -> Result<Dataset> {
    let mut classes: Vec<AppearanceClass> = Vec::new();
    let mut items = Vec::with_capacity(specs.len());
    for (i, (class, trajectory)) in specs.iter().enumerate() {
        match classes.iter().find(|c| c.id == class.id) {
            Some(existing) if existing != class => {
                return Err(Error::Config(format!("class id {} used with two different appearances", class.id)));
            }
            Some(_) => {}
            None => classes.push(class.clone()),
        }
        if specs[..i].iter().any(|(c, t)| c == class && t == trajectory) {
            log::warn!("dataset spec {i} duplicates an earlier item; keeping it");
        }
        let video = render_video(class, trajectory, frames, height, width)?;
        items.push(DatasetItem {
            latent: codec.encode(&video)?,
            class_id: class.id,
            trajectory: trajectory.clone(),
        });
    }
    Dataset::from_items(classes, items, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::ShapeKind;

    fn lin(x: f64, vx: f64) -> Trajectory {
        Trajectory::Linear { start: [x, 16.0], velocity: [vx, 0.0] }
    }

    #[test]
    fn single_item_dataset() {
        let disk = AppearanceClass::new(0, ShapeKind::Disk, 4.0, 1.0).unwrap();
        let ds = build_dataset(&[(disk, lin(10.0, 1.0))], 4, 32, 32, Codec::Identity).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn two_classes_by_four_trajectories() {
        let disk = AppearanceClass::new(0, ShapeKind::Disk, 4.0, 1.0).unwrap();
        let square = AppearanceClass::new(1, ShapeKind::Square, 4.0, 1.0).unwrap();
        let trajs = [lin(6.0, 2.0), lin(26.0, -2.0), lin(10.0, 1.0), lin(20.0, -1.0)];
        let specs: Vec<_> = [disk, square]
            .iter()
            .flat_map(|c| trajs.iter().map(move |t| (c.clone(), t.clone())))
            .collect();
        let ds = build_dataset(&specs, 8, 32, 32, Codec::Identity).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.subset(Condition::Class(0)).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(ds.subset(Condition::Class(1)).unwrap(), vec![4, 5, 6, 7]);
        assert_eq!(ds.subset(Condition::Empty).unwrap().len(), 8);
        for item in ds.items() {
            assert_eq!(item.latent.shape(), Shape::new(8, 32, 32, 1).unwrap());
        }
        assert!(matches!(ds.subset(Condition::Class(9)), Err(Error::Condition(_))));
    }

    #[test]
    fn duplicates_are_kept() {
        let disk = AppearanceClass::new(0, ShapeKind::Disk, 4.0, 1.0).unwrap();
        let specs = vec![(disk.clone(), lin(10.0, 1.0)), (disk, lin(10.0, 1.0))];
        assert_eq!(build_dataset(&specs, 4, 32, 32, Codec::Identity).unwrap().len(), 2);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(build_dataset(&[], 4, 32, 32, Codec::Identity).is_err());
    }
}
