//! Planted-prototype benchmark generator.
//!
//! Every class owns a disjoint set of unit "ground-truth" prototype
//! directions. A bag of class `k` mixes witness instances (a class-`k`
//! prototype plus isotropic Gaussian noise) with background instances drawn
//! uniformly from the unit sphere. The instance priors are the ground-truth
//! prototypes themselves, optionally perturbed, and the bag priors are the
//! normalized class-mean directions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::numkernel::{dot, l2_norm, Matrix};
use crate::prototype::random_unit_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub bags_per_class: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    pub prototypes_per_class: usize,
    /// Standard deviation of the per-coordinate witness noise.
    pub noise: f64,
    /// Fraction of each bag made of witnesses; at least one witness per bag.
    pub witness_rate: f64,
    /// Noise added to the instance priors before renormalizing. `0` is the perfect-text condition.
    pub prior_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            bags_per_class: 40,
            min_instances: 16,
            max_instances: 48,
            dim: 32,
            prototypes_per_class: 2,
            noise: 0.1,
            witness_rate: 0.3,
            prior_noise: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth spec: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.bags_per_class == 0 {
            return bad("bags_per_class must be positive");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("need 1 <= min_instances <= max_instances");
        }
        if self.dim == 0 || self.prototypes_per_class == 0 {
            return bad("dim and prototypes_per_class must be positive");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.witness_rate) {
            return bad("witness_rate must lie in [0, 1]");
        }
        if !(self.prior_noise >= 0.0) || !self.prior_noise.is_finite() {
            return bad("prior_noise must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn num_prototypes(&self) -> usize {
        self.classes * self.prototypes_per_class
    }
}

/// Ground truth kept alongside a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// `(classes * prototypes_per_class) x dim`, grouped by class.
    pub prototypes: Matrix,
    pub prototype_class: Vec<usize>,
}

/// Orthonormal rows when they fit in the space, independent random unit rows otherwise.
fn planted_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = random_unit_rows(count, dim, rng);
    if count > dim {
        return m;
    }
    for r in 0..count {
        let mut row = m.row(r).to_vec();
        for prev in 0..r {
            let p = m.row(prev).to_vec();
            let proj = dot(&row, &p);
            row.iter_mut().zip(&p).for_each(|(x, q)| *x -= proj * q);
        }
        let n = l2_norm(&row);
        m.row_mut(r)
            .iter_mut()
            .zip(&row)
            .for_each(|(o, x)| *o = x / n);
    }
    m
}

pub fn synth_generate_with_truth(spec: &SynthSpec, seed: u64) -> Result<(Dataset, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    let k_total = spec.num_prototypes();
    let prototypes = planted_directions(k_total, d, &mut rng);
    let prototype_class: Vec<usize> = (0..k_total)
        .map(|i| i / spec.prototypes_per_class)
        .collect();

    let mut bags = Vec::with_capacity(spec.classes * spec.bags_per_class);
    for class in 0..spec.classes {
        let own: Vec<usize> = (0..k_total)
            .filter(|&i| prototype_class[i] == class)
            .collect();
        for b in 0..spec.bags_per_class {
            let n = rng.random_range(spec.min_instances..=spec.max_instances);
            let witnesses = ((spec.witness_rate * n as f64).round() as usize).clamp(1, n);
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
            for _ in 0..witnesses {
                let p = prototypes.row(own[rng.random_range(0..own.len())]);
                rows.push(
                    p.iter()
                        .map(|&x| {
                            let z: f64 = rng.sample(StandardNormal);
                            x + spec.noise * z
                        })
                        .collect(),
                );
            }
            let background = random_unit_rows(n - witnesses, d, &mut rng);
            rows.extend(background.iter_rows().map(<[f64]>::to_vec));
            rows.shuffle(&mut rng);
            bags.push(Bag {
                id: format!("c{class}_b{b:03}"),
                label: class,
                features: Matrix::from_rows(&rows)?,
            });
        }
    }

    let instance_priors = if spec.prior_noise > 0.0 {
        let noisy = Matrix::from_fn(k_total, d, |r, c| {
            let z: f64 = rng.sample(StandardNormal);
            prototypes[(r, c)] + spec.prior_noise * z
        });
        noisy.normalize_rows()
    } else {
        prototypes.clone()
    };

    let mut bag_priors = Matrix::zeros(spec.classes, d);
    for (i, &class) in prototype_class.iter().enumerate() {
        bag_priors
            .row_mut(class)
            .iter_mut()
            .zip(prototypes.row(i))
            .for_each(|(o, x)| *o += x);
    }
    let bag_priors = bag_priors.normalize_rows();

    let ds = Dataset {
        bags,
        class_names: (0..spec.classes).map(|c| format!("class_{c}")).collect(),
        dim: d,
        instance_priors,
        bag_priors,
    };
    ds.validate()?;
    Ok((
        ds,
        SynthTruth {
            prototypes,
            prototype_class,
        },
    ))
}

/// Generates a planted-prototype dataset; deterministic under `seed`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synth_generate_with_truth(spec, seed).map(|(ds, _)| ds)
}
