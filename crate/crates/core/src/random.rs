//! Seeded generators for random scenario trees and instances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tree::{NodeSpec, ScenarioTree};

pub type InstanceRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InstanceRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeShape {
    pub horizon: usize,
    /// Children per node are drawn uniformly from `1..=max_branching`.
    pub max_branching: usize,
    pub dim: usize,
    /// Values are drawn uniformly from `[-scale, scale]`.
    pub scale: f64,
}

impl TreeShape {
    pub fn new(horizon: usize, max_branching: usize) -> Self {
        TreeShape {
            horizon,
            max_branching,
            dim: 1,
            scale: 2.0,
        }
    }
}

/// Positive weights summing to one, each at least `0.05 / n`.
pub fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|r| r / s).collect();
    // put the rounding residue on the largest weight
    let drift = 1.0 - w.iter().sum::<f64>();
    let k = (0..n).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
    w[k] += drift;
    w
}

pub fn random_tree(rng: &mut impl Rng, shape: &TreeShape) -> ScenarioTree {
    let mut levels: Vec<Vec<NodeSpec>> = Vec::with_capacity(shape.horizon);
    let value = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..shape.dim).map(|_| rng.gen_range(-shape.scale..=shape.scale)).collect()
    };
    for l in 0..shape.horizon {
        let parents: Vec<Option<String>> = if l == 0 {
            vec![None]
        } else {
            levels[l - 1].iter().map(|n| Some(n.id.clone())).collect()
        };
        let mut level = Vec::new();
        for parent in parents {
            let b = rng.gen_range(1..=shape.max_branching.max(1));
            for p in random_simplex(rng, b) {
                let id = format!("n{}_{}", l + 1, level.len());
                let v = value(rng);
                level.push(NodeSpec::new(id, parent.as_deref(), p, v));
            }
        }
        levels.push(level);
    }
    ScenarioTree::from_specs(levels).expect("generated trees are valid")
}

/// `n` trees whose joint leaf-tuple count stays within `max_tuples`.
pub fn random_trees(
    rng: &mut impl Rng,
    n: usize,
    shape: &TreeShape,
    max_tuples: usize,
) -> Vec<ScenarioTree> {
    loop {
        let trees: Vec<ScenarioTree> = (0..n).map(|_| random_tree(rng, shape)).collect();
        let count: usize = trees.iter().map(ScenarioTree::leaf_count).product();
        if count <= max_tuples {
            return trees;
        }
    }
}

/// Task tree with every path through the given per-time grids.
pub fn grid_tree(grids: &[Vec<f64>]) -> ScenarioTree {
    let mut levels: Vec<Vec<NodeSpec>> = Vec::with_capacity(grids.len());
    for (l, grid) in grids.iter().enumerate() {
        let parents: Vec<Option<String>> = if l == 0 {
            vec![None]
        } else {
            levels[l - 1].iter().map(|n| Some(n.id.clone())).collect()
        };
        let mut level = Vec::new();
        let p = 1.0 / grid.len() as f64;
        for parent in &parents {
            for (k, &g) in grid.iter().enumerate() {
                let id = match parent {
                    None => format!("g{k}"),
                    Some(pid) => format!("{pid}.{k}"),
                };
                level.push(NodeSpec::new(id, parent.as_deref(), p, vec![g]));
            }
        }
        levels.push(level);
    }
    ScenarioTree::from_specs(levels).expect("grid trees are valid")
}
