//! Visual and textual prototype banks, instance-to-prototype similarity maps,
//! the cross-modal cost matrix and the marginals fed to the transport solver.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::numkernel::{cosine_matrix, l2_norm, softmax_slice, Matrix, Vector, NORM_FLOOR};
use crate::sinkhorn::Marginals;

/// Lloyd iterations used by the k-means initializer.
pub const KMEANS_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    #[default]
    Kmeans,
    Random,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "random" => Ok(Self::Random),
            other => Err(Error::invalid(format!("unknown init strategy {other:?}"))),
        }
    }
}

/// Trainable prototype matrices for both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub visual: Matrix,
    pub textual: Matrix,
    pub freeze_textual: bool,
}

fn check_rows(m: &Matrix, what: &str) -> Result<()> {
    if m.rows() == 0 {
        return Err(Error::invalid(format!("{what} prototype bank has no rows")));
    }
    m.ensure_finite(what)
        .map_err(|e| Error::invalid(e.to_string()))?;
    if let Some(r) = m.iter_rows().position(|row| l2_norm(row) < NORM_FLOOR) {
        return Err(Error::invalid(format!(
            "{what} prototype {r} is an all-zero row"
        )));
    }
    Ok(())
}

impl PrototypeBank {
    pub fn new(visual: Matrix, textual: Matrix) -> Result<Self> {
        check_rows(&visual, "visual")?;
        check_rows(&textual, "textual")?;
        if visual.cols() != textual.cols() {
            return Err(Error::invalid(format!(
                "visual prototypes have width {}, textual {}",
                visual.cols(),
                textual.cols()
            )));
        }
        Ok(Self {
            visual,
            textual,
            freeze_textual: false,
        })
    }

    pub fn k_visual(&self) -> usize {
        self.visual.rows()
    }

    pub fn k_textual(&self) -> usize {
        self.textual.rows()
    }

    pub fn dim(&self) -> usize {
        self.visual.cols()
    }

    /// Replaces the textual prototypes with ingested instance-prior embeddings.
    /// The prior row count becomes `K_t`.
    pub fn load_textual_prototypes(&mut self, priors: &Matrix) -> Result<()> {
        if priors.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "instance priors have width {}, bank has {}",
                priors.cols(),
                self.dim()
            )));
        }
        check_rows(priors, "textual")?;
        self.textual = priors.clone();
        Ok(())
    }
}

/// Result of visual prototype initialization.
#[derive(Clone, Debug)]
pub struct InitOutcome {
    pub prototypes: Matrix,
    pub strategy: InitStrategy,
    pub warning: Option<String>,
}

/// Unit-norm Gaussian rows.
pub fn random_unit_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = l2_norm(&row);
            if n >= NORM_FLOOR {
                m.row_mut(r)
                    .iter_mut()
                    .zip(&row)
                    .for_each(|(o, x)| *o = x / n);
                break;
            }
        }
    }
    m
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters keep their centroid.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!(
            "kmeans needs at least {k} points, got {n}"
        )));
    }
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter_rows().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter_rows().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            counts[assign[i]] += 1;
            sums.row_mut(assign[i])
                .iter_mut()
                .zip(p)
                .for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let cnt = counts[c] as f64;
                centroids
                    .row_mut(c)
                    .iter_mut()
                    .zip(sums.row(c))
                    .for_each(|(o, s)| *o = s / cnt);
            }
        }
    }
    Ok(centroids)
}

/// Initial visual prototypes: normalized k-means centroids of the pooled support
/// instances, or seeded random unit rows when there is no (or too little) support data.
pub fn init_visual_prototypes(
    support: Option<&[Bag]>,
    k_v: usize,
    dim: usize,
    strategy: InitStrategy,
    seed: u64,
) -> Result<InitOutcome> {
    if k_v == 0 {
        return Err(Error::invalid("k_v must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding width must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = |rng: &mut ChaCha8Rng, warning: Option<String>| InitOutcome {
        prototypes: random_unit_rows(k_v, dim, rng),
        strategy: InitStrategy::Random,
        warning,
    };

    let bags = match (strategy, support) {
        (InitStrategy::Random, _) | (InitStrategy::Kmeans, None) => {
            return Ok(random(&mut rng, None))
        }
        (InitStrategy::Kmeans, Some(bags)) => bags,
    };
    if let Some(b) = bags.iter().find(|b| b.features.cols() != dim) {
        return Err(Error::invalid(format!(
            "support bag {} has width {}, expected {dim}",
            b.id,
            b.features.cols()
        )));
    }
    let pooled: Vec<&[f64]> = bags.iter().flat_map(|b| b.features.iter_rows()).collect();
    if pooled.len() < k_v {
        let msg = format!(
            "only {} support instances for {k_v} visual prototypes; using random init",
            pooled.len()
        );
        warn!("{msg}");
        return Ok(random(&mut rng, Some(msg)));
    }
    let points = Matrix::from_rows(&pooled)?;
    let centroids = kmeans(&points, k_v, KMEANS_ITERS, &mut rng)?;
    let mut normalized = centroids.normalize_rows();
    // A centroid at the origin cannot act as a cosine anchor; replace it.
    for r in 0..k_v {
        if l2_norm(normalized.row(r)) < 0.5 {
            let fresh = random_unit_rows(1, dim, &mut rng);
            normalized.row_mut(r).copy_from_slice(fresh.row(0));
        }
    }
    Ok(InitOutcome {
        prototypes: normalized,
        strategy: InitStrategy::Kmeans,
        warning: None,
    })
}

/// Cosine similarity of every instance against both prototype banks.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPair {
    /// `n x K_v`
    pub s_visual: Matrix,
    /// `n x K_t`
    pub s_textual: Matrix,
}

pub fn similarity_pair(x: &Matrix, bank: &PrototypeBank) -> Result<SimilarityPair> {
    if x.cols() != bank.dim() {
        return Err(Error::invalid(format!(
            "instances have width {}, prototypes {}",
            x.cols(),
            bank.dim()
        )));
    }
    Ok(SimilarityPair {
        s_visual: cosine_matrix(x, &bank.visual)?,
        s_textual: cosine_matrix(x, &bank.textual)?,
    })
}

/// `C(a, b) = 1 - cos(visual_a, textual_b)`, entries in `[0, 2]`.
pub fn cost_matrix(bank: &PrototypeBank) -> Result<Matrix> {
    Ok(cosine_matrix(&bank.visual, &bank.textual)?.map(|c| 1.0 - c))
}

/// `mu = softmax(mean_j S_v(j,:))`, `nu = softmax(mean_j S_t(j,:))`.
pub fn estimate_marginals(sp: &SimilarityPair) -> Result<Marginals> {
    if sp.s_visual.rows() == 0 || sp.s_textual.rows() == 0 {
        return Err(Error::invalid("cannot estimate marginals for an empty bag"));
    }
    let mu = softmax_slice(&sp.s_visual.col_means()?)?;
    let nu = softmax_slice(&sp.s_textual.col_means()?)?;
    Marginals::new(Vector::new(mu), Vector::new(nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::cosine_slice;

    fn bag(id: &str, rows: &[Vec<f64>]) -> Bag {
        Bag {
            id: id.into(),
            label: 0,
            features: Matrix::from_rows(rows).unwrap(),
        }
    }

    fn rng_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let support = vec![bag(
            "a",
            &(0..12)
                .map(|i| vec![i as f64, 1.0, -(i as f64) * 0.5])
                .collect::<Vec<_>>(),
        )];
        let a = init_visual_prototypes(Some(&support), 3, 3, InitStrategy::Kmeans, 42).unwrap();
        let b = init_visual_prototypes(Some(&support), 3, 3, InitStrategy::Kmeans, 42).unwrap();
        assert_eq!(a.prototypes, b.prototypes);
        let r1 = init_visual_prototypes(None, 4, 8, InitStrategy::Random, 7).unwrap();
        let r2 = init_visual_prototypes(None, 4, 8, InitStrategy::Random, 7).unwrap();
        assert_eq!(r1.prototypes, r2.prototypes);
    }

    #[test]
    fn random_rows_are_unit_norm() {
        let out = init_visual_prototypes(None, 10, 16, InitStrategy::Random, 1).unwrap();
        for row in out.prototypes.iter_rows() {
            assert!((l2_norm(row) - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn kmeans_recovers_orthogonal_support_points() {
        let dim = 5;
        let k = 4;
        let basis: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..dim).map(|j| if i == j { 2.0 } else { 0.0 }).collect())
            .collect();
        let mut rows = Vec::new();
        for rep in 0..6 {
            for b in &basis {
                rows.push(
                    b.iter()
                        .map(|x| x * (1.0 + rep as f64 * 0.0))
                        .collect::<Vec<_>>(),
                );
            }
        }
        let support = vec![bag("s", &rows[..12]), bag("t", &rows[12..])];
        for seed in 0..10 {
            let out =
                init_visual_prototypes(Some(&support), k, dim, InitStrategy::Kmeans, seed).unwrap();
            assert_eq!(out.strategy, InitStrategy::Kmeans);
            // Each centroid matches exactly one normalized support point, and all are hit.
            let mut hit = vec![false; k];
            for c in out.prototypes.iter_rows() {
                let matches: Vec<usize> = (0..k)
                    .filter(|&i| {
                        sq_dist(c, &basis[i].iter().map(|x| x / 2.0).collect::<Vec<_>>()) < 1e-20
                    })
                    .collect();
                assert_eq!(matches.len(), 1, "seed {seed}: centroid {c:?}");
                hit[matches[0]] = true;
            }
            assert!(hit.iter().all(|&h| h), "seed {seed}");
        }
    }

    #[test]
    fn too_few_instances_fall_back_to_random() {
        let support = vec![bag("a", &[vec![1.0, 0.0]])];
        let out = init_visual_prototypes(Some(&support), 3, 2, InitStrategy::Kmeans, 0).unwrap();
        assert_eq!(out.strategy, InitStrategy::Random);
        assert!(out.warning.is_some());
        assert_eq!(out.prototypes.shape(), (3, 2));
    }

    #[test]
    fn load_textual_copies_and_validates() {
        let mut bank = PrototypeBank::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let priors =
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
        bank.load_textual_prototypes(&priors).unwrap();
        assert_eq!(bank.textual, priors);

        let mut zero_row = priors.clone();
        zero_row.row_mut(1).iter_mut().for_each(|x| *x = 0.0);
        assert!(bank.load_textual_prototypes(&zero_row).is_err());
        assert!(bank.load_textual_prototypes(&Matrix::identity(4)).is_err());
    }

    #[test]
    fn textual_count_follows_prior_rows() {
        let d = 16;
        let mut bank = PrototypeBank::new(rng_matrix(1, 6, d), rng_matrix(2, 2, d)).unwrap();
        bank.load_textual_prototypes(&rng_matrix(3, 33, d)).unwrap();
        assert_eq!(bank.k_textual(), 33);
        assert_eq!(bank.k_visual(), 6);
    }

    #[test]
    fn similarity_examples() {
        let visual = Matrix::identity(3);
        let bank = PrototypeBank::new(visual.clone(), Matrix::identity(3)).unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0, 5.0]]).unwrap();
        let sp = similarity_pair(&x, &bank).unwrap();
        assert_eq!(sp.s_visual.row(0), &[0.0, 0.0, 1.0]);

        let sp = similarity_pair(&visual, &bank).unwrap();
        for k in 0..3 {
            assert_eq!(sp.s_visual[(k, k)], 1.0);
        }

        let bank = PrototypeBank::new(rng_matrix(10, 3, 8), rng_matrix(11, 2, 8)).unwrap();
        let x = rng_matrix(12, 4, 8);
        let sp = similarity_pair(&x, &bank).unwrap();
        for j in 0..4 {
            for k in 0..3 {
                let o = cosine_slice(x.row(j), bank.visual.row(k)).unwrap();
                assert!((sp.s_visual[(j, k)] - o).abs() <= 1e-12);
            }
            for k in 0..2 {
                let o = cosine_slice(x.row(j), bank.textual.row(k)).unwrap();
                assert!((sp.s_textual[(j, k)] - o).abs() <= 1e-12);
            }
        }
        assert!(similarity_pair(&Matrix::zeros(2, 7), &bank).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let p = rng_matrix(4, 3, 5);
        let bank = PrototypeBank::new(p.clone(), p.clone()).unwrap();
        let c = cost_matrix(&bank).unwrap();
        for k in 0..3 {
            assert!(c[(k, k)].abs() < 1e-15);
        }
        let bank = PrototypeBank::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.5, -2.0]]).unwrap(),
            Matrix::from_rows(&[[0.0, 1.0], [-0.5, 2.0]]).unwrap(),
        )
        .unwrap();
        let c = cost_matrix(&bank).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 1)], 2.0);
    }

    #[test]
    fn marginal_examples() {
        let sp = SimilarityPair {
            s_visual: Matrix::filled(4, 3, 0.2),
            s_textual: Matrix::filled(4, 2, -0.1),
        };
        let m = estimate_marginals(&sp).unwrap();
        for &x in m.mu().as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let row = [0.3, -0.2, 0.9];
        let sp = SimilarityPair {
            s_visual: Matrix::row_vector(&row),
            s_textual: Matrix::row_vector(&[0.1, 0.4]),
        };
        let m = estimate_marginals(&sp).unwrap();
        assert_eq!(m.mu().as_slice(), softmax_slice(&row).unwrap().as_slice());

        // Mean-then-softmax recomputed by hand.
        let sv = rng_matrix(21, 5, 3);
        let sp = SimilarityPair {
            s_visual: sv.clone(),
            s_textual: rng_matrix(22, 5, 2),
        };
        let m = estimate_marginals(&sp).unwrap();
        let means: Vec<f64> = (0..3)
            .map(|k| (0..5).map(|j| sv[(j, k)]).sum::<f64>() / 5.0)
            .collect();
        let z: f64 = means.iter().map(|x| x.exp()).sum();
        for k in 0..3 {
            assert!((m.mu()[k] - means[k].exp() / z).abs() <= 1e-12);
        }

        let empty = SimilarityPair {
            s_visual: Matrix::zeros(0, 3),
            s_textual: Matrix::zeros(0, 2),
        };
        assert!(estimate_marginals(&empty).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-2.0f64..2.0, rows * cols)
                .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn marginals_ignore_instance_order(x in mat(6, 4), seed in 0u64..1000) {
                let bank = PrototypeBank::new(rng_matrix(seed, 3, 4), rng_matrix(seed + 1, 2, 4)).unwrap();
                let mut idx: Vec<usize> = (0..6).collect();
                idx.reverse();
                idx.swap(0, 3);
                let a = estimate_marginals(&similarity_pair(&x, &bank).unwrap()).unwrap();
                let b = estimate_marginals(&similarity_pair(&x.select_rows(&idx), &bank).unwrap()).unwrap();
                for k in 0..3 {
                    prop_assert!((a.mu()[k] - b.mu()[k]).abs() < 1e-14);
                }
                for k in 0..2 {
                    prop_assert!((a.nu()[k] - b.nu()[k]).abs() < 1e-14);
                }
            }

            #[test]
            fn rescaling_an_instance_keeps_its_similarities(x in mat(3, 4), c in 0.01f64..50.0) {
                let bank = PrototypeBank::new(rng_matrix(5, 3, 4), rng_matrix(6, 2, 4)).unwrap();
                let mut scaled = x.clone();
                scaled.row_mut(1).iter_mut().for_each(|v| *v *= c);
                let a = similarity_pair(&x, &bank).unwrap();
                let b = similarity_pair(&scaled, &bank).unwrap();
                for k in 0..3 {
                    prop_assert!((a.s_visual[(1, k)] - b.s_visual[(1, k)]).abs() < 1e-12);
                }
            }

            #[test]
            fn cost_entries_in_range(v in mat(4, 5), t in mat(3, 5)) {
                prop_assume!(v.iter_rows().all(|r| l2_norm(r) > 1e-6));
                prop_assume!(t.iter_rows().all(|r| l2_norm(r) > 1e-6));
                let c = cost_matrix(&PrototypeBank::new(v, t).unwrap()).unwrap();
                prop_assert!(c.as_slice().iter().all(|x| (0.0..=2.0).contains(x)));
            }
        }
    }
}
