//! Gaussian-cluster stand-in for a class-specific image distribution.
//!
//! Class means live in a random `latent_dim`-dimensional subspace of the
//! image space and are pairwise at least `sep` apart; samples add isotropic
//! noise of scale `noise` in every pixel. The shared subspace is what a
//! learned embedding can discover from the training classes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{DatasetSplit, SplitName};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub sep: f64,
    pub latent_dim: usize,
    pub images_per_class: usize,
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(classes: usize, dim: usize, sep: f64) -> Self {
        Self {
            classes,
            dim,
            sep,
            latent_dim: (dim / 4).max(2).min(dim),
            images_per_class: 20,
            noise: 1.0,
        }
    }

    /// Square single-channel layout when `dim` is a perfect square,
    /// otherwise a `1×1×dim` strip.
    pub fn image_shape(&self) -> [usize; 3] {
        let side = (self.dim as f64).sqrt().round() as usize;
        if side * side == self.dim {
            [1, side, side]
        } else {
            [1, 1, self.dim]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Precondition(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.sep.is_nan() || self.sep <= 0.0 {
            return Err(Error::Precondition(format!("separation must be positive, got {}", self.sep)));
        }
        if self.latent_dim == 0 || self.latent_dim > self.dim {
            return Err(Error::Precondition(format!(
                "latent dimension {} outside 1..={}",
                self.latent_dim, self.dim
            )));
        }
        if self.images_per_class == 0 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Precondition("images per class and noise scale must be positive".into()));
        }
        Ok(())
    }
}

/// Generator parameters of one synthetic class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl ClassDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.scale * z
            })
            .collect()
    }
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal `k` vectors of length `dim` by Gram-Schmidt.
fn random_basis(dim: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = normal_vec(dim, rng);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Draws per-class generators with pairwise mean distance at least `sep`.
pub fn class_distributions(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<ClassDistribution>> {
    spec.validate()?;
    let basis = random_basis(spec.dim, spec.latent_dim, rng);
    // Latent coordinates start at the scale where typical pairwise distance
    // is `sep` and widen until every pair clears it.
    let mut sigma = spec.sep / (2.0 * spec.latent_dim as f64).sqrt();
    let latent = loop {
        let pts: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| normal_vec(spec.latent_dim, rng).into_iter().map(|z| z * sigma).collect())
            .collect();
        if min_pairwise_distance(&pts) >= spec.sep {
            break pts;
        }
        sigma *= 1.05;
    };
    Ok(latent
        .into_iter()
        .map(|z| {
            let mut mean = vec![0.0; spec.dim];
            for (coef, b) in z.iter().zip(&basis) {
                mean.iter_mut().zip(b).for_each(|(m, v)| *m += coef * v);
            }
            ClassDistribution { mean, scale: spec.noise }
        })
        .collect())
}

/// A split holding `spec.classes` Gaussian classes.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut impl Rng) -> Result<DatasetSplit> {
    let dists = class_distributions(spec, rng)?;
    Ok(materialize(spec, &dists, SplitName::Train, 0, rng))
}

fn materialize(
    spec: &SynthSpec,
    dists: &[ClassDistribution],
    name: SplitName,
    first_id: usize,
    rng: &mut impl Rng,
) -> DatasetSplit {
    let mut split = DatasetSplit::new(name, spec.image_shape());
    for (k, dist) in dists.iter().enumerate() {
        let pixels = (0..spec.images_per_class)
            .flat_map(|_| dist.sample(rng))
            .map(|v| v as f32)
            .collect();
        split
            .push_class(format!("synth{:04}", first_id + k), pixels)
            .expect("synthetic blobs are whole images");
    }
    split
}

/// Train/val/test splits drawn from one generator so they share the latent
/// subspace while keeping class sets disjoint.
pub fn synth_splits(
    spec: &SynthSpec,
    train: usize,
    val: usize,
    test: usize,
    rng: &mut impl Rng,
) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    let total = SynthSpec { classes: train + val + test, ..spec.clone() };
    let dists = class_distributions(&total, rng)?;
    let tr = materialize(spec, &dists[..train], SplitName::Train, 0, rng);
    let va = materialize(spec, &dists[train..train + val], SplitName::Val, train, rng);
    let te = materialize(spec, &dists[train + val..], SplitName::Test, train + val, rng);
    Ok((tr, va, te))
}
