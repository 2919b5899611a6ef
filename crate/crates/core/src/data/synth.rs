use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::seeding::{self, tag};

const CENTER_SEED: u64 = 0x00c3_47e5;

/// Unit-norm class directions that depend only on the shape, never on the
/// sampling seed, so train and test draws share centers.
fn class_directions(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    if dim >= num_classes {
        return (0..num_classes)
            .map(|k| (0..dim).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    let mut rng = seeding::stream(CENTER_SEED, &[num_classes as u64, dim as u64]);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Isotropic unit-variance Gaussian classes centered at `separation * u_k`.
/// Examples are emitted class by class.
pub fn synth_gaussian_mixture<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if num_classes < 1 || per_class < 1 || dim < 1 {
        return Err(invalid("synthetic", "class count, per-class count and dim must be >= 1"));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(invalid("separation", "must be finite and > 0"));
    }
    let centers = class_directions(num_classes, dim);
    let mut rng = seeding::stream(seed, &[tag::SYNTHETIC]);
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (k, u) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &uj in u {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(T::of(separation * uj + noise));
            }
            labels.push(k);
        }
    }
    Dataset::new(features, labels, dim, num_classes)
}
