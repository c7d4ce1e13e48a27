use rand::Rng;
use rand_distr::StandardNormal;

use super::LabeledDataset;
use crate::error::{domain, Result};

/// Gaussian class clusters: class `c` has mean `margin * u_c` for a random
/// unit vector `u_c`, and unit isotropic spread.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    dim: usize,
    classes: usize,
    margin: f64,
    means: Vec<f64>,
}

impl SyntheticTask {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, margin: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(domain("synthetic task needs positive dimension and class count"));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(domain(format!("margin must be finite and nonnegative, got {margin}")));
        }
        let mut means = Vec::with_capacity(dim * classes);
        for _ in 0..classes {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            means.extend(dir.iter().map(|x| margin * x / norm));
        }
        Ok(Self {
            dim,
            classes,
            margin,
            means,
        })
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// `n` samples with labels cycling through the classes.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> LabeledDataset {
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.classes;
            let mean = self.class_mean(y);
            features.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(y);
        }
        LabeledDataset::new(features, labels, self.dim, self.classes)
            .expect("synthetic rows are well formed")
    }
}

/// One-shot synthetic dataset of `n` samples.
pub fn synth_classification<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    classes: usize,
    margin: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(domain("synthetic dataset needs n > 0"));
    }
    Ok(SyntheticTask::new(dim, classes, margin, rng)?.sample(n, rng))
}
