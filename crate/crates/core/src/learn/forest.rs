//! Bagged regression forest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Dataset, SplitConfig, Task, TreeHyper, TreeModel};
use super::LearnError;

/// Lower clamp for efficiency predictions; keeps divided times finite.
pub const EFFICIENCY_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestHyper {
    pub n_trees: usize,
    pub tree: TreeHyper,
    pub bootstrap: bool,
    /// Features considered per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestHyper {
    fn default() -> Self {
        ForestHyper {
            n_trees: 100,
            tree: TreeHyper {
                max_depth: None,
                min_samples_leaf: 2,
            },
            bootstrap: true,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub hyper: ForestHyper,
    pub trees: Vec<TreeModel>,
    /// Range of the training targets, kept for validation on load.
    pub target_min: f64,
    pub target_max: f64,
}

impl ForestModel {
    pub fn fit(data: Dataset<'_>, hyper: ForestHyper) -> Result<Self, LearnError> {
        if hyper.n_trees == 0 {
            return Err(LearnError::Shape("n_trees must be >= 1".into()));
        }
        let d = data.n_features();
        let max_features = hyper
            .max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d);
        let n = data.len();
        let trees = (0..hyper.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
                rng.set_stream(t as u64);
                let rows: Vec<usize> = if hyper.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let split = SplitConfig {
                    max_features: Some(max_features),
                    rng: Some(&mut rng),
                };
                TreeModel::fit_rows(data, &rows, hyper.tree, Task::Regression, split)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (target_min, target_max) = data
            .y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(ForestModel {
            hyper,
            trees,
            target_min,
            target_max,
        })
    }

    /// Mean of the tree outputs.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Prediction clamped to `[EFFICIENCY_FLOOR, 1]`.
    pub fn predict_efficiency(&self, x: &[f64]) -> f64 {
        self.predict(x).clamp(EFFICIENCY_FLOOR, 1.0)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.trees.is_empty() {
            return Err(LearnError::Schema("forest has no trees".into()));
        }
        self.trees.iter().try_for_each(TreeModel::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (1..=60)
            .map(|i| vec![i as f64, (i % 4) as f64, (i * 3 % 11) as f64])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| 0.2 + 0.6 * (r[0] / 60.0) + 0.01 * r[1]).collect();
        (x, y)
    }

    #[test]
    fn degenerate_forest_equals_tree() {
        let (x, y) = toy();
        let data = Dataset::new(&x, &y).unwrap();
        let hyper = ForestHyper {
            n_trees: 1,
            bootstrap: false,
            max_features: Some(3),
            tree: TreeHyper::default(),
            seed: 7,
        };
        let forest = ForestModel::fit(data, hyper).unwrap();
        let tree = TreeModel::fit(data, TreeHyper::default(), Task::Regression).unwrap();
        assert_eq!(forest.trees[0], tree);
        for r in &x {
            assert_eq!(forest.predict(r), tree.predict(r));
        }
    }

    #[test]
    fn extrapolation_stays_in_target_range() {
        let (x, y) = toy();
        let f = ForestModel::fit(Dataset::new(&x, &y).unwrap(), ForestHyper::default()).unwrap();
        for probe in [[1e9, 1e9, 1e9], [-1e9, 0.0, 0.0], [30.0, 1e6, -5.0]] {
            let p = f.predict(&probe);
            assert!(p >= f.target_min && p <= f.target_max, "{p}");
            let e = f.predict_efficiency(&probe);
            assert!(e > 0.0 && e <= 1.0);
        }
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (x, y) = toy();
        let a = ForestModel::fit(Dataset::new(&x, &y).unwrap(), ForestHyper::default()).unwrap();
        let b = ForestModel::fit(Dataset::new(&x, &y).unwrap(), ForestHyper::default()).unwrap();
        assert_eq!(a, b);
        let mut rev = a.clone();
        rev.trees.reverse();
        for r in &x {
            assert!((a.predict(r) - rev.predict(r)).abs() < 1e-12);
        }
    }
}
