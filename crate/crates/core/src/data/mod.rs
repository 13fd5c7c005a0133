//! Datasets, augmentation, and the small convolutional feature extractor.

mod augment;
mod backbone;
mod cifar;
mod synth;

pub use augment::{augment_pair, AugmentPolicy};
pub use backbone::{BackboneConfig, TinyBackbone};
pub use cifar::load_cifar10_bin;
pub use synth::{synth_dataset, SynthConfig};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::seeding;
use rand::seq::SliceRandom;

/// An in-memory labeled image dataset: square RGB images in `[0,1]`.
#[derive(Clone)]
pub struct Dataset {
    pub size: usize,
    pub channels: usize,
    images: Vec<Vec<f32>>,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(size: usize, images: Vec<Vec<f32>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let plane = 3 * size * size;
        if images.iter().any(|img| img.len() != plane) {
            return Err(Error::Data("image buffer does not match size".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::Data("label count does not match image count".into()));
            }
        }
        Ok(Self {
            size,
            channels: 3,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
            .unwrap_or(0)
    }

    /// Keeps the first `n` items (after a seeded shuffle) — used to carve
    /// desk-scale subsets out of full datasets.
    pub fn take_subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeding::rng(seed, "subset", 0));
        idx.truncate(n);
        Dataset {
            size: self.size,
            channels: self.channels,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Disjoint, covering split with a seeded shuffle; the train side gets
/// `ceil(ratio * N)` items.
pub fn split_train_val(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} not in (0,1)")));
    }
    let n = dataset.len();
    let take = (ratio * n as f64).ceil() as usize;
    if take == 0 || take == n {
        return Err(Error::Data(format!(
            "split of {n} items at ratio {ratio} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(seed, "split", 0));
    let pick = |ids: &[usize]| Dataset {
        size: dataset.size,
        channels: dataset.channels,
        images: ids.iter().map(|&i| dataset.images[i].clone()).collect(),
        labels: dataset
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i]).collect()),
    };
    Ok((pick(&idx[..take]), pick(&idx[take..])))
}

/// Deterministic epoch iteration order: a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(seed, "epoch", epoch as u64));
    idx
}

/// Stacks per-image flat buffers into a `[B,C,H,W]` tensor.
pub fn batch_tensor(views: &[Vec<f32>], size: usize) -> Result<Tensor> {
    let b = views.len();
    let plane = 3 * size * size;
    let mut flat = Vec::with_capacity(b * plane);
    for v in views {
        if v.len() != plane {
            return Err(Error::Data("inconsistent view length in batch".into()));
        }
        flat.extend_from_slice(v);
    }
    Tensor::constant(&[b, 3, size, size], flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let images = (0..n).map(|i| vec![i as f32 / n as f32; 3 * 8 * 8]).collect();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(8, images, Some(labels)).unwrap()
    }

    #[test]
    fn split_is_covering_and_disjoint() {
        let ds = tiny(100);
        let (a, b) = split_train_val(&ds, 0.5, 9).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(b.len(), 50);

        let mut seen: Vec<f32> = a
            .images
            .iter()
            .chain(&b.images)
            .map(|img| img[0])
            .collect();
        seen.sort_by(f32::total_cmp);
        let mut want: Vec<f32> = ds.images.iter().map(|img| img[0]).collect();
        want.sort_by(f32::total_cmp);
        assert_eq!(seen, want);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = tiny(30);
        let (a1, _) = split_train_val(&ds, 0.4, 7).unwrap();
        let (a2, _) = split_train_val(&ds, 0.4, 7).unwrap();
        assert_eq!(a1.images, a2.images);
        assert_eq!(a1.len(), 12);
    }

    #[test]
    fn split_rejects_empty_side() {
        let ds = tiny(3);
        assert!(split_train_val(&ds, 0.9, 0).is_err());
        assert!(split_train_val(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn epoch_order_is_pure() {
        assert_eq!(epoch_order(10, 1, 4), epoch_order(10, 1, 4));
        assert_ne!(epoch_order(10, 1, 4), epoch_order(10, 1, 5));
    }
}
