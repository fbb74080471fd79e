//! Greedy CART trees for regression (variance reduction) and classification
//! (Gini impurity).
//!
//! Nodes live in a flat list; each node stores its parent index so the
//! serialized form is a plain node table.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeHyper {
    /// `None` grows until purity or `min_samples_leaf` stops it.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

impl Default for TreeHyper {
    fn default() -> Self {
        TreeHyper {
            max_depth: None,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NodeKind {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        class_counts: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<usize>,
    #[serde(flatten)]
    pub kind: NodeKind,
}

/// A fitted decision tree. Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub task: Task,
    pub hyper: TreeHyper,
    pub n_features: usize,
    pub n_classes: usize,
    pub nodes: Vec<Node>,
}

/// Training rows: features plus target. Class labels are stored as
/// non-negative integral targets.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [f64],
}

impl<'a> Dataset<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [f64]) -> Result<Self, LearnError> {
        if x.is_empty() {
            return Err(LearnError::EmptyData);
        }
        if x.len() != y.len() {
            return Err(LearnError::Shape(format!(
                "{} feature rows but {} targets",
                x.len(),
                y.len()
            )));
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|r| r.len() != d) {
            return Err(LearnError::Shape("ragged or empty feature rows".into()));
        }
        if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite);
        }
        Ok(Dataset { x, y })
    }

    pub fn n_features(&self) -> usize {
        self.x[0].len()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Per-split feature sampling; `None` considers every feature.
pub(crate) struct SplitConfig<'r, R: Rng> {
    pub max_features: Option<usize>,
    pub rng: Option<&'r mut R>,
}

struct Builder<'a, 'r, R: Rng> {
    data: Dataset<'a>,
    task: Task,
    hyper: TreeHyper,
    n_classes: usize,
    split: SplitConfig<'r, R>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeModel {
    pub fn fit(data: Dataset<'_>, hyper: TreeHyper, task: Task) -> Result<Self, LearnError> {
        let split: SplitConfig<'_, rand_chacha::ChaCha8Rng> = SplitConfig {
            max_features: None,
            rng: None,
        };
        let rows: Vec<usize> = (0..data.len()).collect();
        Self::fit_rows(data, &rows, hyper, task, split)
    }

    pub(crate) fn fit_rows<R: Rng>(
        data: Dataset<'_>,
        rows: &[usize],
        hyper: TreeHyper,
        task: Task,
        split: SplitConfig<'_, R>,
    ) -> Result<Self, LearnError> {
        if rows.is_empty() {
            return Err(LearnError::EmptyData);
        }
        let msl = hyper.min_samples_leaf.max(1);
        if rows.len() < 2 * msl {
            return Err(LearnError::InsufficientData {
                rows: rows.len(),
                needed: 2 * msl,
            });
        }
        let n_classes = match task {
            Task::Regression => 0,
            Task::Classification => {
                let mut max = 0usize;
                for &v in data.y {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(LearnError::Shape(format!("class label {v} is not a non-negative integer")));
                    }
                    max = max.max(v as usize);
                }
                max + 1
            }
        };
        let mut b = Builder {
            data,
            task,
            hyper: TreeHyper {
                min_samples_leaf: msl,
                ..hyper
            },
            n_classes,
            split,
            nodes: Vec::new(),
        };
        let mut rows = rows.to_vec();
        b.grow(&mut rows, None, 0);
        Ok(TreeModel {
            task,
            hyper: b.hyper,
            n_features: data.n_features(),
            n_classes,
            nodes: b.nodes,
        })
    }

    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i].kind {
                NodeKind::Leaf { .. } => return i,
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Regression value or predicted class label.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(x)].kind {
            NodeKind::Leaf { value, .. } => *value,
            NodeKind::Split { .. } => unreachable!(),
        }
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        self.predict(x) as usize
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &TreeModel, i: usize) -> usize {
            match &t.nodes[i].kind {
                NodeKind::Leaf { .. } => 0,
                NodeKind::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .count()
    }

    /// Checks the structural invariants of a (possibly deserialized) tree.
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::Schema(m));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        if self.nodes[0].parent.is_some() {
            return bad("root node has a parent".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        seen[0] = true;
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.kind {
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= self.n_features || !threshold.is_finite() {
                        return bad(format!("node {i}: invalid split"));
                    }
                    for &c in [left, right] {
                        if c >= self.nodes.len() || c <= i || seen[c] {
                            return bad(format!("node {i}: invalid child {c}"));
                        }
                        if self.nodes[c].parent != Some(i) {
                            return bad(format!("node {c}: parent mismatch"));
                        }
                        seen[c] = true;
                    }
                }
                NodeKind::Leaf { value, .. } => {
                    if !value.is_finite() {
                        return bad(format!("node {i}: non-finite leaf"));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("unreachable nodes".into());
        }
        Ok(())
    }
}

impl<R: Rng> Builder<'_, '_, R> {
    fn push(&mut self, parent: Option<usize>, kind: NodeKind) -> usize {
        self.nodes.push(Node { parent, kind });
        self.nodes.len() - 1
    }

    fn leaf(&self, rows: &[usize]) -> NodeKind {
        match self.task {
            Task::Regression => {
                let mean = rows.iter().map(|&r| self.data.y[r]).sum::<f64>() / rows.len() as f64;
                // keep the leaf inside the target range despite rounding
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    (lo.min(self.data.y[r]), hi.max(self.data.y[r]))
                });
                NodeKind::Leaf {
                    value: mean.clamp(lo, hi),
                    class_counts: Vec::new(),
                }
            }
            Task::Classification => {
                let mut counts = vec![0usize; self.n_classes];
                for &r in rows {
                    counts[self.data.y[r] as usize] += 1;
                }
                let best = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                NodeKind::Leaf {
                    value: best as f64,
                    class_counts: counts,
                }
            }
        }
    }

    fn is_pure(&self, rows: &[usize]) -> bool {
        let first = self.data.y[rows[0]];
        rows.iter().all(|&r| self.data.y[r] == first)
    }

    fn grow(&mut self, rows: &mut [usize], parent: Option<usize>, depth: usize) -> usize {
        let stop = self.hyper.max_depth.is_some_and(|d| depth >= d)
            || rows.len() < 2 * self.hyper.min_samples_leaf
            || self.is_pure(rows);
        let best = if stop { None } else { self.best_split(rows) };
        let Some(best) = best else {
            let leaf = self.leaf(rows);
            return self.push(parent, leaf);
        };
        let placeholder = NodeKind::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: 0,
            right: 0,
        };
        let me = self.push(parent, placeholder);
        let x = self.data.x;
        // stable partition keeps row order deterministic
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| x[r][best.feature] <= best.threshold);
        let l = self.grow(&mut left, Some(me), depth + 1);
        let r = self.grow(&mut right, Some(me), depth + 1);
        self.nodes[me].kind = NodeKind::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        me
    }

    fn features_for_split(&mut self) -> Vec<usize> {
        let d = self.data.n_features();
        match (self.split.max_features, self.split.rng.as_deref_mut()) {
            (Some(m), Some(rng)) if m < d => {
                let mut f = sample(rng, d, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        }
    }

    /// Lowest weighted child impurity; ties keep the lowest feature index,
    /// then the lowest threshold.
    fn best_split(&mut self, rows: &[usize]) -> Option<Candidate> {
        let features = self.features_for_split();
        let n = rows.len();
        let msl = self.hyper.min_samples_leaf;
        let parent_score = self.impurity_sum(rows);
        let tol = 1e-12 * parent_score.abs().max(1e-300);
        let mut best: Option<Candidate> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for &feat in &features {
            let x = self.data.x;
            order.sort_by(|&a, &b| x[a][feat].total_cmp(&x[b][feat]));
            let mut acc = Accumulator::new(self.task, self.n_classes);
            let mut total = Accumulator::new(self.task, self.n_classes);
            for &r in &order {
                total.add(self.data.y[r]);
            }
            for i in 0..n - 1 {
                let r = order[i];
                acc.add(self.data.y[r]);
                total.remove(self.data.y[r]);
                let here = x[r][feat];
                let next = x[order[i + 1]][feat];
                if here == next || i + 1 < msl || n - i - 1 < msl {
                    continue;
                }
                let score = acc.impurity_sum() + total.impurity_sum();
                let better = match best {
                    None => true,
                    Some(b) => score < b.score - tol,
                };
                if better {
                    let mid = here + (next - here) / 2.0;
                    // guard against the midpoint rounding onto `next`
                    let threshold = if mid < next { mid } else { here };
                    best = Some(Candidate {
                        feature: feat,
                        threshold,
                        score,
                    });
                }
            }
        }
        // splits that do not reduce impurity are not taken
        best.filter(|b| b.score < parent_score - tol)
    }

    fn impurity_sum(&self, rows: &[usize]) -> f64 {
        let mut acc = Accumulator::new(self.task, self.n_classes);
        for &r in rows {
            acc.add(self.data.y[r]);
        }
        acc.impurity_sum()
    }
}

/// Running sufficient statistics for one side of a split.
struct Accumulator {
    task: Task,
    n: f64,
    sum: f64,
    sum_sq: f64,
    counts: Vec<f64>,
}

impl Accumulator {
    fn new(task: Task, n_classes: usize) -> Self {
        Accumulator {
            task,
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
            counts: vec![0.0; n_classes],
        }
    }

    fn add(&mut self, y: f64) {
        self.n += 1.0;
        match self.task {
            Task::Regression => {
                self.sum += y;
                self.sum_sq += y * y;
            }
            Task::Classification => self.counts[y as usize] += 1.0,
        }
    }

    fn remove(&mut self, y: f64) {
        self.n -= 1.0;
        match self.task {
            Task::Regression => {
                self.sum -= y;
                self.sum_sq -= y * y;
            }
            Task::Classification => self.counts[y as usize] -= 1.0,
        }
    }

    /// Impurity weighted by sample count (SSE or n * Gini).
    fn impurity_sum(&self) -> f64 {
        if self.n <= 0.0 {
            return 0.0;
        }
        match self.task {
            Task::Regression => (self.sum_sq - self.sum * self.sum / self.n).max(0.0),
            Task::Classification => {
                let sq: f64 = self.counts.iter().map(|c| c * c).sum();
                self.n - sq / self.n
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_channels_threshold_gives_depth_one() {
        // label = channels > 52
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in (8..=128).step_by(4) {
            for f in [16.0, 64.0, 256.0] {
                x.push(vec![32.0, c as f64, f]);
                y.push(if c > 52 { 1.0 } else { 0.0 });
            }
        }
        let t = TreeModel::fit(Dataset::new(&x, &y).unwrap(), TreeHyper::default(), Task::Classification)
            .unwrap();
        assert_eq!(t.depth(), 1);
        match &t.nodes[0].kind {
            NodeKind::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 1);
                assert!(*threshold > 52.0 && *threshold < 56.0);
            }
            _ => panic!("expected split"),
        }
        t.validate().unwrap();
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y = vec![0.25; 10];
        let t = TreeModel::fit(Dataset::new(&x, &y).unwrap(), TreeHyper::default(), Task::Regression).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict(&[100.0, -3.0]), 0.25);
    }

    #[test]
    fn constant_features_with_varying_target_is_leaf() {
        let x = vec![vec![1.0]; 6];
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let t = TreeModel::fit(Dataset::new(&x, &y).unwrap(), TreeHyper::default(), Task::Regression).unwrap();
        assert_eq!(t.n_leaves(), 1);
        assert_eq!(t.predict(&[1.0]), 2.5);
    }

    #[test]
    fn empty_and_short_data_rejected() {
        let x: Vec<Vec<f64>> = vec![];
        assert!(matches!(Dataset::new(&x, &[]), Err(LearnError::EmptyData)));
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![1.0, 2.0, 3.0];
        let hyper = TreeHyper { max_depth: None, min_samples_leaf: 2 };
        assert!(matches!(
            TreeModel::fit(Dataset::new(&x, &y).unwrap(), hyper, Task::Regression),
            Err(LearnError::InsufficientData { rows: 3, needed: 4 })
        ));
    }

    #[test]
    fn max_depth_limits_growth() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..64).map(|i| (i % 7) as f64).collect();
        let hyper = TreeHyper { max_depth: Some(2), min_samples_leaf: 1 };
        let t = TreeModel::fit(Dataset::new(&x, &y).unwrap(), hyper, Task::Regression).unwrap();
        assert!(t.depth() <= 2);
    }

    #[test]
    fn serde_round_trip_keeps_predictions() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 5) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 0.1 + r[1]).collect();
        let t = TreeModel::fit(Dataset::new(&x, &y).unwrap(), TreeHyper::default(), Task::Regression).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: TreeModel = serde_json::from_str(&s).unwrap();
        back.validate().unwrap();
        for r in &x {
            assert_eq!(t.predict(r), back.predict(r));
        }
    }
}
