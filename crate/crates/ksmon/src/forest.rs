//! Bagged random forests over the CART trees in [`crate::tree`].
//!
//! Each member tree is fitted on a bootstrap resample of the batch (when
//! enabled) with `forest_mtry` candidate features sampled per split; the
//! forest predicts the arithmetic mean of its member trees. Every tree's
//! randomness comes from its own recorded seed, derived from the fit seed,
//! so fits are reproducible and members could be fitted in any order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ObservationBatch;
use crate::error::{Error, Result};
use crate::seed::{mix, tag};
use crate::tree::{fit_tree_raw, FitConfig, RegressionTree};

/// A fitted random forest.
#[derive(Debug, Clone)]
pub struct RandomForest {
    p: usize,
    trees: Vec<RegressionTree>,
    tree_seeds: Vec<u64>,
}

impl RandomForest {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    /// The per-tree seeds the fit consumed, in tree order.
    pub fn tree_seeds(&self) -> &[u64] {
        &self.tree_seeds
    }

    /// Assemble a forest from already-fitted trees and the seeds that
    /// produced them. Used by deserialization; validates agreement of
    /// dimensions and lengths.
    pub(crate) fn from_parts(trees: Vec<RegressionTree>, tree_seeds: Vec<u64>) -> Result<Self> {
        let first = trees.first().ok_or_else(|| Error::malformed("forest has no trees"))?;
        let p = first.p();
        if trees.iter().any(|t| t.p() != p) {
            return Err(Error::malformed("forest trees disagree on the number of predictors"));
        }
        if tree_seeds.len() != trees.len() {
            return Err(Error::malformed(format!(
                "forest has {} trees but {} tree seeds",
                trees.len(),
                tree_seeds.len()
            )));
        }
        Ok(RandomForest { p, trees, tree_seeds })
    }

    /// Predict the response at one point: the mean of member-tree
    /// predictions.
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("prediction point contains non-finite values"));
        }
        let mut sum = 0.0;
        for tree in &self.trees {
            sum += tree.predict_one(x)?;
        }
        Ok(sum / self.trees.len() as f64)
    }

    /// Add `scale * prediction` into `out[i]` for every row of `xs`.
    /// Member trees accumulate into a scratch sum first so the arithmetic
    /// (sum over trees, then one division) matches [`Self::predict_one`]
    /// exactly.
    pub(crate) fn accumulate_predictions(&self, xs: &[f64], out: &mut [f64], scale: f64) {
        let mut scratch = vec![0.0; out.len()];
        for tree in &self.trees {
            tree.accumulate_predictions(xs, &mut scratch, 1.0);
        }
        let count = self.trees.len() as f64;
        for (o, s) in out.iter_mut().zip(&scratch) {
            *o += scale * (s / count);
        }
    }
}

/// Fit a random forest to a batch.
pub fn forest_fit(batch: &ObservationBatch, config: &FitConfig) -> Result<RandomForest> {
    let p = batch.p();
    config.validate(p)?;
    if config.forest_num_trees == 0 {
        return Err(Error::invalid_input("forest_num_trees must be at least 1"));
    }
    let n = batch.n();
    let xs = batch.predictors();
    let ys = batch.responses();
    // With mtry == p the per-split sampling is the full feature set, so the
    // split search runs deterministically without touching the RNG; this
    // also makes a 1-tree, no-bootstrap forest reproduce tree_fit exactly.
    let use_mtry = config.mtry_for(p) < p;

    let mut trees = Vec::with_capacity(config.forest_num_trees);
    let mut tree_seeds = Vec::with_capacity(config.forest_num_trees);
    let mut resampled_xs = Vec::new();
    let mut resampled_ys = Vec::new();
    for b in 0..config.forest_num_trees {
        let tree_seed = mix(config.rng_seed, &[tag::FOREST_TREE, b as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
        let tree = if config.forest_bootstrap {
            resampled_xs.clear();
            resampled_ys.clear();
            for _ in 0..n {
                let i = rng.random_range(0..n);
                resampled_xs.extend_from_slice(&xs[i * p..(i + 1) * p]);
                resampled_ys.push(ys[i]);
            }
            fit_tree_raw(&resampled_xs, &resampled_ys, p, config, use_mtry.then_some(&mut rng))?
        } else {
            fit_tree_raw(xs, ys, p, config, use_mtry.then_some(&mut rng))?
        };
        trees.push(tree);
        tree_seeds.push(tree_seed);
    }
    Ok(RandomForest { p, trees, tree_seeds })
}
