//! Image datasets, loaders, synthetic generators and corruptions.
//!
//! Images are channels-last `[n, h, w, c]` with pixels in `[0, 1]`.

mod batches;
mod corrupt;
mod loaders;
mod synth;

pub use batches::{augment, batches, Batch, Batches};
pub use corrupt::{corrupt, corrupt_with, CorruptionKind, CorruptionLadders, CorruptionSpec};
pub use loaders::{load_cifar_binary, load_idx, parse_cifar, write_idx, CifarKind, CifarSplit};
pub use synth::synth_shapes;

use crate::error::{bail, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub num_classes: usize,
}

impl Dataset {
    /// Builds a dataset, checking the pixel range and label bounds.
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>, num_classes: usize) -> Result<Self> {
        let ds = Self { images, labels, name: name.into(), num_classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 {
            bail!(Dimension, "images must be [n, h, w, c], got {:?}", self.images.shape());
        }
        if self.images.shape()[0] != self.labels.len() {
            bail!(Dimension, "{} images but {} labels", self.images.shape()[0], self.labels.len());
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Contract, "pixel value {} outside [0, 1]", v);
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            bail!(Index, "label {} outside 0..{}", l, self.num_classes);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
            num_classes: self.num_classes,
        })
    }

    /// First `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Items `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
