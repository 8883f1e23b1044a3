//! Dataset ingestion, synthetic corpora and augmentation.

mod augment;
mod cifar;
mod toy;

pub use augment::{
    finetune_augment, finetune_augment_with, make_views, sample_crop_offset, AugmentationPipeline,
    PipelineMode,
};
pub use cifar::{load_cifar10_binary, load_records, write_records, RECORD_BYTES};
pub use toy::{synth_toy_dataset, synth_toy_dataset_with, ToyParams};

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{arg_err, Result};

/// A batch of images laid out as (N, C, H, W), pixels in [0, 1].
pub type Images = Array4<f64>;
/// A single image laid out as (C, H, W).
pub type Image = Array3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Images,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Images, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let set = Self {
            images,
            labels,
            num_classes,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len_of(Axis(0)) != self.labels.len() {
            return arg_err(format!(
                "{} images but {} labels",
                self.images.len_of(Axis(0)),
                self.labels.len()
            ));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return arg_err(format!("label {l} >= num_classes {}", self.num_classes));
        }
        if self.images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return arg_err("pixel outside [0,1]");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Gathers the listed rows into a new batch.
    pub fn gather(&self, idx: &[usize]) -> (Images, Vec<usize>) {
        (
            self.images.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` records (or all if fewer).
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx);
        LabeledImageSet {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}
