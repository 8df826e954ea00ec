//! Regression forest of CART trees on bootstrap samples, with out-of-bag
//! bookkeeping and impurity-based variable importance.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ImputationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per split; `None` means `⌈cols/3⌉`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 500,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn resolved_mtry(&self, n_cols: usize) -> Result<usize, ImputationError> {
        match self.mtry {
            Some(0) => Err(ImputationError::Config("mtry must be at least 1".into())),
            Some(m) if m > n_cols.max(1) => Err(ImputationError::Config(format!(
                "mtry {m} exceeds the {n_cols} available columns"
            ))),
            Some(m) => Ok(m),
            None => Ok(n_cols.div_ceil(3).max(1)),
        }
    }

    fn validate(&self) -> Result<(), ImputationError> {
        if self.n_trees == 0 {
            return Err(ImputationError::Config("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(ImputationError::Config("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[(row, feature)] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    /// `in_bag[t][i]` is how often training row i was drawn for tree t.
    in_bag: Vec<Vec<u32>>,
    /// Total impurity decrease per column, unnormalized.
    pub raw_importance: Vec<f64>,
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
    cut: usize,
}

impl Builder<'_> {
    fn build(&mut self, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = rows.len() as f64;
        let sum: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let mean = sum / n;
        let sse: f64 = rows.iter().map(|&r| (self.y[r] - mean).powi(2)).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));

        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if depth_capped || rows.len() < 2 * self.min_leaf || sse <= 0.0 || self.x.ncols() == 0 {
            return id;
        }
        let Some(best) = self.best_split(rows, sum, sse, rng) else {
            return id;
        };
        let feature = best.feature;
        rows.sort_by(|&a, &b| {
            self.x[(a, feature)]
                .partial_cmp(&self.x[(b, feature)])
                .unwrap()
                .then(a.cmp(&b))
        });
        self.importance[feature] += best.gain;
        let (left_rows, right_rows) = rows.split_at_mut(best.cut);
        let left = self.build(left_rows, depth + 1, rng);
        let right = self.build(right_rows, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&self, rows: &[usize], sum: f64, sse: f64, rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let mut features = sample(rng, self.x.ncols(), self.mtry).into_vec();
        features.sort_unstable();
        let n = rows.len();
        let total_sq: f64 = rows.iter().map(|&r| self.y[r] * self.y[r]).sum();
        let mut best: Option<BestSplit> = None;
        let min_gain = 1e-12 * sse;
        let mut sorted = rows.to_vec();
        for &f in &features {
            sorted.sort_by(|&a, &b| self.x[(a, f)].partial_cmp(&self.x[(b, f)]).unwrap().then(a.cmp(&b)));
            let (mut left_sum, mut left_sq) = (0.0, 0.0);
            for cut in 1..n {
                let r = sorted[cut - 1];
                left_sum += self.y[r];
                left_sq += self.y[r] * self.y[r];
                if cut < self.min_leaf || n - cut < self.min_leaf {
                    continue;
                }
                let lo = self.x[(r, f)];
                let hi = self.x[(sorted[cut], f)];
                if lo == hi {
                    continue;
                }
                let right_sum = sum - left_sum;
                let right_sq = total_sq - left_sq;
                let left_sse = left_sq - left_sum * left_sum / cut as f64;
                let right_sse = right_sq - right_sum * right_sum / (n - cut) as f64;
                let gain = sse - left_sse - right_sse;
                // strict comparison keeps the lowest feature, then lowest threshold
                if gain > min_gain && best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: lo + (hi - lo) / 2.0,
                        gain,
                        cut,
                    });
                }
            }
        }
        best
    }
}

impl Forest {
    /// Fits `config.n_trees` trees. Tree t draws its bootstrap sample and
    /// feature subsets from a generator seeded with `seed_base + t`, so the
    /// result does not depend on thread scheduling.
    pub fn fit(x: &DMatrix<f64>, y: &[f64], config: &ForestConfig, seed_base: u64) -> Result<Forest, ImputationError> {
        config.validate()?;
        let n = y.len();
        if n == 0 {
            return Err(ImputationError::ArmTooSmall(0));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(ImputationError::NonFinite);
        }
        let mtry = config.resolved_mtry(x.ncols())?.min(x.ncols());
        let fitted: Vec<(Tree, Vec<u32>, Vec<f64>)> = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_base.wrapping_add(t as u64));
                let mut counts = vec![0u32; n];
                let mut rows: Vec<usize> = (0..n)
                    .map(|_| {
                        let r = rng.gen_range(0..n);
                        counts[r] += 1;
                        r
                    })
                    .collect();
                rows.sort_unstable();
                let mut builder = Builder {
                    x,
                    y,
                    mtry,
                    min_leaf: config.min_leaf,
                    max_depth: config.max_depth,
                    nodes: Vec::new(),
                    importance: vec![0.0; x.ncols()],
                };
                builder.build(&mut rows, 0, &mut rng);
                (Tree { nodes: builder.nodes }, counts, builder.importance)
            })
            .collect();
        let mut raw_importance = vec![0.0; x.ncols()];
        let mut trees = Vec::with_capacity(fitted.len());
        let mut in_bag = Vec::with_capacity(fitted.len());
        for (tree, counts, imp) in fitted {
            for (acc, v) in raw_importance.iter_mut().zip(imp) {
                *acc += v;
            }
            trees.push(tree);
            in_bag.push(counts);
        }
        Ok(Forest {
            trees,
            in_bag,
            raw_importance,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Mean over all trees, for rows not used in training.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| t.predict_row(x, i)).sum::<f64>() / self.trees.len() as f64)
            .collect()
    }

    /// Out-of-bag prediction for each training row; `None` if the row was
    /// in-bag for every tree.
    pub fn oob_predictions(&self, x: &DMatrix<f64>) -> Vec<Option<f64>> {
        (0..x.nrows())
            .map(|i| {
                let (mut total, mut count) = (0.0, 0usize);
                for (tree, counts) in self.trees.iter().zip(&self.in_bag) {
                    if counts[i] == 0 {
                        total += tree.predict_row(x, i);
                        count += 1;
                    }
                }
                (count > 0).then(|| total / count as f64)
            })
            .collect()
    }
}

/// Importance normalized to sum to 1 (all zeros when no split was made).
pub fn normalize_importance(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; raw.len()]
    }
}
