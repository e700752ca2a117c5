//! Synthetic classification data: a class-conditional Gaussian mixture.
//!
//! Each class owns a few randomly placed cluster centres; samples are a
//! centre plus isotropic noise. Features are standardized with training
//! statistics. The whole dataset is a pure function of its spec.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub input_dim: usize,
    pub components_per_class: usize,
    /// Standard deviation of the cluster centres.
    pub center_scale: f64,
    /// Per-feature noise standard deviation around a centre.
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 10,
            input_dim: 32,
            components_per_class: 2,
            center_scale: 1.0,
            noise: 1.3,
            train_size: 8000,
            test_size: 2000,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("dataset needs at least two classes".into()));
        }
        if self.input_dim == 0 || self.components_per_class == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !(self.center_scale > 0.0) || !(self.noise > 0.0) {
            return Err(Error::Config("dataset scales must be positive".into()));
        }
        Ok(())
    }
}

/// Feature matrix `[n × d]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Split {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (x, y) = self.batch(&idx);
        Split { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
    /// Training-set feature means and standard deviations used for standardization.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SyntheticDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let (k, d, m) = (spec.num_classes, spec.input_dim, spec.components_per_class);
        let mut centers_rng = Rng::seeded(derive_seed(spec.seed, 0));
        let centers: Vec<f64> = (0..k * m * d).map(|_| centers_rng.normal() * spec.center_scale).collect();

        let sample = |n: usize, stream: u64| {
            let mut rng = Rng::seeded(derive_seed(spec.seed, stream));
            let mut y: Vec<usize> = (0..n).map(|i| i % k).collect();
            let perm = rng.permutation(n);
            y = perm.iter().map(|&p| y[p]).collect();
            let mut x = Vec::with_capacity(n * d);
            for &label in &y {
                let comp = rng.below(m);
                let c = &centers[(label * m + comp) * d..][..d];
                x.extend(c.iter().map(|&v| v + spec.noise * rng.normal()));
            }
            (x, y)
        };
        let (mut xtr, ytr) = sample(spec.train_size, 1);
        let (mut xte, yte) = sample(spec.test_size, 2);

        let n = spec.train_size as f64;
        let mut mean = vec![0.0; d];
        for row in xtr.chunks(d) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut std = vec![0.0; d];
        for row in xtr.chunks(d) {
            for ((a, v), mu) in std.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        std.iter_mut().for_each(|a| *a = math::sqrt(*a / n).max(1e-12));
        for buf in [&mut xtr, &mut xte] {
            for row in buf.chunks_mut(d) {
                for ((v, mu), s) in row.iter_mut().zip(&mean).zip(&std) {
                    *v = (*v - mu) / s;
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            train: Split {
                x: Tensor::new(&[spec.train_size, d], xtr)?,
                y: ytr,
            },
            test: Split {
                x: Tensor::new(&[spec.test_size, d], xte)?,
                y: yte,
            },
            mean,
            std,
        })
    }
}

/// Contiguous mini-batches over a seeded permutation of `0..n`.
pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
