//! Labeled image sets, the test/reservoir split, and perturbed-dataset
//! emission.

mod idx;
mod manifest;
mod shapes;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use manifest::{emit_patched_dataset, replay_entry, verify_manifest, Manifest, ManifestEntry, MANIFEST_VERSION};
pub use shapes::{gen_shapes_dataset, Arrangement, ShapesSpec, DEFAULT_CONTRAST, TEMPLATE_COUNT};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{numel, Tensor};

/// Images `[N, ...]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub digest: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() < 2 {
            return Err(Error::Shape(format!("images must be [N, ...], got {:?}", images.shape())));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::invalid(format!("label {bad} >= class count {class_count}")));
        }
        let digest = digest_of(&images, &labels);
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// `(height, width)` of `[N, C, H, W]` images.
    pub fn canvas(&self) -> Result<(usize, usize)> {
        match *self.images.shape() {
            [_, _, h, w] => Ok((h, w)),
            ref s => Err(Error::Shape(format!("expected [N, C, H, W] images, got {s:?}"))),
        }
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_raw(self.image_shape(), self.images.outer_slice(i).to_vec())
    }

    /// Batch tensor and labels for the given indices, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let item = numel(&self.images.shape()[1..]);
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(self.images.outer_slice(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.images.shape()[1..]);
        (
            Tensor::from_raw(shape, data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (images, labels) = self.gather(indices);
        let digest = digest_of(&images, &labels);
        LabeledDataset {
            images,
            labels,
            class_count: self.class_count,
            digest,
        }
    }
}

fn digest_of(images: &Tensor, labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for &d in images.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in images.data() {
        h.update(v.to_le_bytes());
    }
    for &y in labels {
        h.update((y as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Clone, Debug)]
pub struct Split {
    pub test: LabeledDataset,
    pub reservoir: LabeledDataset,
    /// Indices into the source dataset, ascending.
    pub test_indices: Vec<usize>,
    pub reservoir_indices: Vec<usize>,
}

/// Draws a test set of `test_n` images; everything else is the reservoir
/// that crafting corpora are sampled from.
pub fn select_splits(dataset: &LabeledDataset, test_n: usize, seed: u64) -> Result<Split> {
    if test_n > dataset.len() {
        return Err(Error::invalid(format!(
            "test_n {test_n} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("split")]));
    let mut test_indices = order[..test_n].to_vec();
    let mut reservoir_indices = order[test_n..].to_vec();
    test_indices.sort_unstable();
    reservoir_indices.sort_unstable();
    Ok(Split {
        test: dataset.subset(&test_indices),
        reservoir: dataset.subset(&reservoir_indices),
        test_indices,
        reservoir_indices,
    })
}
