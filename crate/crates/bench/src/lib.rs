//! Criterion benchmarks for the solvers live in `benches/`.

use cot_core::random::{random_trees, rng, TreeShape};
use cot_core::ScenarioTree;

/// Deterministic benchmark instance: `n` trees of the given shape.
pub fn instance(seed: u64, n: usize, horizon: usize, branching: usize) -> Vec<ScenarioTree> {
    random_trees(&mut rng(seed), n, &TreeShape::new(horizon, branching), usize::MAX)
}
