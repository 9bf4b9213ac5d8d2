//! CART regression trees and bootstrap random forests.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features tried per split; `None` means ⌈√F⌉.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 17,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 || self.features_per_split == Some(0) || self.max_depth == Some(0) {
            return Err(Error::Config("forest sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in an arena; index 0 is the root. Rows with `x[feature] <= threshold`
/// go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Best variance-reducing split of `rows` on one feature: (reduction, threshold).
/// Candidate thresholds are midpoints between consecutive distinct values.
fn best_split_on(x: &[Vec<f64>], y: &[f64], rows: &[usize], feature: usize, min_leaf: usize) -> Option<(f64, f64)> {
    let mut order: Vec<(f64, f64)> = rows.iter().map(|&r| (x[r][feature], y[r])).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = order.len();
    let total: f64 = order.iter().map(|p| p.1).sum();
    let parent = total * total / n as f64;
    let mut left_sum = 0.0;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        left_sum += order[i].1;
        let nl = i + 1;
        let nr = n - nl;
        if order[i].0 == order[i + 1].0 || nl < min_leaf || nr < min_leaf {
            continue;
        }
        let right_sum = total - left_sum;
        let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - parent;
        if best.is_none_or(|(g, _)| gain > g) {
            best = Some((gain, 0.5 * (order[i].0 + order[i + 1].0)));
        }
    }
    best
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    config: &'a ForestConfig,
    n_try: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf(mean));
        let pure = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        let depth_done = self.config.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_done || rows.len() < 2 * self.config.min_samples_leaf {
            return id;
        }
        let n_features = self.x[0].len();
        let mut candidates: Vec<usize> = if self.n_try >= n_features {
            (0..n_features).collect()
        } else {
            sample(&mut self.rng, n_features, self.n_try).into_vec()
        };
        candidates.sort_unstable();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in candidates {
            if let Some((gain, thr)) = best_split_on(self.x, self.y, rows, f, self.config.min_samples_leaf) {
                // the same partition reached through another feature can differ
                // in rounding only; keep the lower feature index then
                if best.is_none_or(|(g, _, _)| gain > g + 1e-12 * g.abs().max(1.0)) {
                    best = Some((gain, f, thr));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            return id;
        };
        if gain <= 0.0 {
            return id;
        }
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn check_data(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!("forest needs matching non-empty data ({} rows, {} targets)", x.len(), y.len())));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(Error::shape("design matrix must be rectangular with at least one column"));
    }
    Ok(())
}

/// Grows one CART tree on the given rows (duplicates allowed).
pub fn fit_tree(x: &[Vec<f64>], y: &[f64], rows: &[usize], config: &ForestConfig, seed: u64) -> Result<Tree> {
    check_data(x, y)?;
    if rows.is_empty() {
        return Err(Error::invalid("tree needs at least one row"));
    }
    let p = x[0].len();
    let n_try = config.features_per_split.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).min(p);
    let mut g = Grower {
        x,
        y,
        config,
        n_try,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    Ok(Tree { nodes: g.nodes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

fn tree_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trees are grown in parallel; each has its own seed, so the result does
/// not depend on scheduling.
pub fn forest_fit(x: &[Vec<f64>], y: &[f64], config: &ForestConfig) -> Result<Forest> {
    config.validate()?;
    check_data(x, y)?;
    let n = x.len();
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let seed = tree_seed(config.seed, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree(x, y, &rows, config, rng.random())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest { trees })
}
