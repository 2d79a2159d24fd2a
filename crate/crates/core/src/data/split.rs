//! Stratified five-fold partition with k-shot training subsets.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;

/// Bag indices for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k_shot: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Each class is shuffled and dealt round-robin into the five test folds.
/// Within a fold, `k` bags per class are drawn from the remainder for
/// training and everything else left over becomes validation.
pub fn kshot_split(ds: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k == 0 {
        return Err(Error::invalid("k_shot must be at least 1"));
    }
    let by_class = ds.indices_by_class();
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < k + 2 {
            return Err(Error::invalid(format!(
                "class {} ({}) has {} bags; {k}-shot needs at least {}",
                c,
                ds.class_names[c],
                idx.len(),
                k + 2
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_of: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); by_class.len()]; NUM_FOLDS];
    for (c, idx) in by_class.iter().enumerate() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for (i, bag) in shuffled.into_iter().enumerate() {
            test_of[i % NUM_FOLDS][c].push(bag);
        }
    }

    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut warnings = Vec::new();
    for (f, per_class_test) in test_of.iter().enumerate() {
        let mut fold = Fold {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (c, idx) in by_class.iter().enumerate() {
            let test = &per_class_test[c];
            let mut rest: Vec<usize> = idx.iter().copied().filter(|i| !test.contains(i)).collect();
            rest.shuffle(&mut rng);
            // Keep at least one validation bag per class.
            let take = k.min(rest.len().saturating_sub(1));
            if take < k {
                let msg = format!(
                    "fold {f}: class {} has only {take} training bags available for {k}-shot",
                    ds.class_names[c]
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            fold.train.extend_from_slice(&rest[..take]);
            fold.val.extend_from_slice(&rest[take..]);
            fold.test.extend_from_slice(test);
        }
        fold.train.sort_unstable();
        fold.val.sort_unstable();
        fold.test.sort_unstable();
        folds.push(fold);
    }
    Ok(SplitPlan {
        k_shot: k,
        seed,
        folds,
        warnings,
    })
}
