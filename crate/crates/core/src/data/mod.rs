//! Datasets, file ingestion, synthetic corpora and non-IID partitioners.

mod batches;
mod idx;
mod partition;
mod synth;

pub use batches::epoch_batches;
pub use idx::{load_idx, parse_idx, write_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use partition::{dirichlet_partition, paired_partition, sort_and_partition, Partition};
pub use synth::synth_gaussian_mixture;

use crate::error::{invalid, Error, Result};
use crate::models::Batch;
use crate::scalar::Scalar;

/// Labelled examples, features stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    features: Vec<T>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Vec<T>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if dim == 0 {
            return Err(invalid("dim", "feature dimension must be >= 1"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                left: features.len(),
                right: labels.len() * dim,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(
                "labels",
                format!("label {bad} outside [0, {num_classes})"),
            ));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid("indices", format!("{i} out of range {}", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.dim)
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch<T> {
        Batch::new(self.features.clone(), self.labels.clone(), self.dim)
            .expect("dataset invariants imply a valid batch")
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
