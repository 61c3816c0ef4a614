//! Finite filtered processes represented as scenario trees.
//!
//! A tree of horizon `T` has `T` levels; level `l` (0-based) holds the nodes
//! at time `t = l + 1`. Every node below the first level has exactly one
//! parent in the previous level, and the transition probabilities of the
//! children of a node form the conditional kernel of the process given the
//! path leading to that node.

use std::collections::HashMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the children of one node summing to one.
pub const LOCAL_TOL: f64 = 1e-12;
/// Tolerance for the leaf path probabilities summing to one.
pub const GLOBAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    /// Index of the parent in the previous level; `None` on the first level.
    pub parent: Option<usize>,
    pub prob: f64,
    /// Exact transition probability when the tree was loaded in rational mode.
    pub exact: Option<Ratio<i64>>,
    pub value: Vec<f64>,
    children: Vec<usize>,
}

impl Node {
    pub fn children(&self) -> &[usize] {
        &self.children
    }
}

/// Input record for [`ScenarioTree::from_specs`].
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub id: String,
    pub parent: Option<String>,
    pub prob: ProbSpec,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProbSpec {
    Float(f64),
    Exact(Ratio<i64>),
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, parent: Option<&str>, prob: f64, value: Vec<f64>) -> Self {
        NodeSpec {
            id: id.into(),
            parent: parent.map(str::to_owned),
            prob: ProbSpec::Float(prob),
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree {
    levels: Vec<Vec<Node>>,
    path_probs: Vec<Vec<f64>>,
    exact: bool,
}

/// A path `ω_{1:t}` given by one node index per level.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodePath {
    nodes: Vec<usize>,
}

/// Discrete law over a list of indices (node indices, grid points, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

/// One node per process, all at the same time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProductNodeTuple {
    /// Time `t` in `0..=T`; `t = 0` is the empty tuple before the first step.
    pub time: usize,
    pub nodes: Vec<usize>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "support has {} atoms but {} weights were given",
                support.len(),
                weights.len()
            )));
        }
        if support.is_empty() {
            return Err(Error::validation("empty distribution"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::validation(format!("invalid weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > LOCAL_TOL * weights.len().max(1) as f64 {
            return Err(Error::validation(format!("weights sum to {total}")));
        }
        let mut seen = support.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("support indices are not distinct"));
        }
        Ok(DiscreteDistribution { support, weights })
    }

    /// Weights over `0..n`.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        DiscreteDistribution::new((0..weights.len()).collect(), weights)
    }

    pub fn dirac(index: usize) -> Self {
        DiscreteDistribution {
            support: vec![index],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support.iter().copied().zip(self.weights.iter().copied())
    }
}

impl NodePath {
    /// Checks that consecutive entries satisfy the parent relation.
    pub fn new(tree: &ScenarioTree, nodes: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() > tree.horizon() {
            return Err(Error::invalid(format!(
                "path length {} outside 1..={}",
                nodes.len(),
                tree.horizon()
            )));
        }
        for (level, &k) in nodes.iter().enumerate() {
            let node = tree
                .levels
                .get(level)
                .and_then(|l| l.get(k))
                .ok_or_else(|| Error::invalid(format!("no node {k} at time {}", level + 1)))?;
            if level > 0 && node.parent != Some(nodes[level - 1]) {
                return Err(Error::invalid(format!(
                    "node '{}' is not a child of the previous path entry",
                    node.id
                )));
            }
        }
        Ok(NodePath { nodes })
    }

    /// The unique path from the first level to node `index` at `level`.
    pub fn to_node(tree: &ScenarioTree, level: usize, index: usize) -> Self {
        let mut nodes = vec![0; level + 1];
        let mut k = index;
        for l in (0..=level).rev() {
            nodes[l] = k;
            if let Some(p) = tree.levels[l][k].parent {
                k = p;
            }
        }
        NodePath { nodes }
    }

    pub fn depth(&self) -> usize {
        self.nodes.len()
    }

    pub fn terminal(&self) -> usize {
        *self.nodes.last().expect("paths are nonempty")
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }
}

impl ScenarioTree {
    /// Builds and validates a tree from per-level node records.
    pub fn from_specs(levels: Vec<Vec<NodeSpec>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("horizon must be at least 1"));
        }
        let exact_count = levels
            .iter()
            .flatten()
            .filter(|n| matches!(n.prob, ProbSpec::Exact(_)))
            .count();
        let total: usize = levels.iter().map(Vec::len).sum();
        if exact_count != 0 && exact_count != total {
            return Err(Error::validation(
                "mixed exact and floating-point probabilities",
            ));
        }
        let exact = exact_count == total;

        let mut ids: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut out: Vec<Vec<Node>> = Vec::with_capacity(levels.len());
        for (l, level) in levels.iter().enumerate() {
            let t = l + 1;
            if level.is_empty() {
                return Err(Error::validation(format!("time {t} has no nodes")));
            }
            let dim = level[0].value.len();
            let mut nodes = Vec::with_capacity(level.len());
            for (k, spec) in level.iter().enumerate() {
                if ids.insert(spec.id.as_str(), (l, k)).is_some() {
                    return Err(Error::validation(format!("duplicate node id '{}'", spec.id)));
                }
                let (prob, exact_p) = match &spec.prob {
                    ProbSpec::Float(p) => (*p, None),
                    ProbSpec::Exact(r) => (*r.numer() as f64 / *r.denom() as f64, Some(*r)),
                };
                if !(prob.is_finite() && prob > 0.0 && prob <= 1.0) {
                    return Err(Error::validation(format!(
                        "node '{}' at time {t}: probability {prob} outside (0, 1]",
                        spec.id
                    )));
                }
                if spec.value.len() != dim {
                    return Err(Error::validation(format!(
                        "node '{}' at time {t}: value has dimension {} but the level uses {dim}",
                        spec.id,
                        spec.value.len()
                    )));
                }
                if spec.value.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "node '{}' at time {t}: non-finite value",
                        spec.id
                    )));
                }
                let parent = match (&spec.parent, l) {
                    (None, 0) => None,
                    (Some(p), 0) => {
                        return Err(Error::validation(format!(
                            "node '{}' at time 1 has parent '{p}'",
                            spec.id
                        )))
                    }
                    (None, _) => {
                        return Err(Error::validation(format!(
                            "orphan node '{}' at time {t}",
                            spec.id
                        )))
                    }
                    (Some(p), _) => match ids.get(p.as_str()) {
                        Some(&(pl, pk)) if pl + 1 == l => Some(pk),
                        _ => {
                            return Err(Error::validation(format!(
                                "node '{}' at time {t}: parent '{p}' is not a node at time {}",
                                spec.id, l
                            )))
                        }
                    },
                };
                nodes.push(Node {
                    id: spec.id.clone(),
                    parent,
                    prob,
                    exact: exact_p,
                    value: spec.value.clone(),
                    children: Vec::new(),
                });
            }
            if let Some(prev) = out.last_mut() {
                for (k, n) in nodes.iter().enumerate() {
                    prev[n.parent.expect("checked above")].children.push(k);
                }
            }
            out.push(nodes);
        }

        let tree = ScenarioTree::assemble(out, exact);
        tree.validate_sums(&levels)?;
        Ok(tree)
    }

    fn assemble(levels: Vec<Vec<Node>>, exact: bool) -> Self {
        let mut path_probs: Vec<Vec<f64>> = Vec::with_capacity(levels.len());
        for (l, level) in levels.iter().enumerate() {
            let probs = level
                .iter()
                .map(|n| match n.parent {
                    Some(p) if l > 0 => path_probs[l - 1][p] * n.prob,
                    _ => n.prob,
                })
                .collect();
            path_probs.push(probs);
        }
        ScenarioTree {
            levels,
            path_probs,
            exact,
        }
    }

    fn validate_sums(&self, specs: &[Vec<NodeSpec>]) -> Result<()> {
        let check = |label: String, kids: &[usize], level: usize| -> Result<()> {
            if self.exact {
                let sum: Ratio<i64> = kids
                    .iter()
                    .map(|&k| self.levels[level][k].exact.expect("exact mode"))
                    .sum();
                if sum != Ratio::from_integer(1) {
                    return Err(Error::validation(format!("{label}: children sum {sum}")));
                }
            } else {
                let sum: f64 = kids.iter().map(|&k| self.levels[level][k].prob).sum();
                if (sum - 1.0).abs() > LOCAL_TOL {
                    return Err(Error::validation(format!("{label}: children sum {sum}")));
                }
            }
            Ok(())
        };
        let roots: Vec<usize> = (0..self.levels[0].len()).collect();
        check("time 1".to_owned(), &roots, 0)?;
        for (l, level) in self.levels.iter().enumerate() {
            for (k, node) in level.iter().enumerate() {
                if l + 1 < self.levels.len() {
                    if node.children.is_empty() {
                        return Err(Error::validation(format!(
                            "node '{}' at time {} has no children before the horizon",
                            specs[l][k].id,
                            l + 1
                        )));
                    }
                    check(
                        format!("node '{}' at time {}", node.id, l + 1),
                        &node.children,
                        l + 1,
                    )?;
                }
            }
        }
        let total: f64 = self.path_probs.last().expect("nonempty").iter().sum();
        if (total - 1.0).abs() > GLOBAL_TOL {
            return Err(Error::validation(format!("leaf probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    /// Nodes at `level` (time `level + 1`).
    pub fn level(&self, level: usize) -> &[Node] {
        &self.levels[level]
    }

    pub fn node(&self, level: usize, index: usize) -> &Node {
        &self.levels[level][index]
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn leaf_count(&self) -> usize {
        self.levels.last().map_or(0, Vec::len)
    }

    /// Dimension `d_t` of the state at `level`.
    pub fn state_dim(&self, level: usize) -> usize {
        self.levels[level][0].value.len()
    }

    /// Probability of the path ending at node `index` of `level`.
    pub fn path_prob(&self, level: usize, index: usize) -> f64 {
        self.path_probs[level][index]
    }

    /// Law of the full paths, indexed by leaf.
    pub fn leaf_law(&self) -> &[f64] {
        self.path_probs.last().expect("nonempty")
    }

    /// Ancestor at `target` of node `index` at `level` (`target <= level`).
    pub fn ancestor(&self, level: usize, index: usize, target: usize) -> usize {
        debug_assert!(target <= level);
        let mut k = index;
        for l in (target + 1..=level).rev() {
            k = self.levels[l][k].parent.expect("non-root node has a parent");
        }
        k
    }

    /// Law of the first step `P_1`.
    pub fn first_step(&self) -> DiscreteDistribution {
        DiscreteDistribution {
            support: (0..self.levels[0].len()).collect(),
            weights: self.levels[0].iter().map(|n| n.prob).collect(),
        }
    }

    /// Kernel of the next step after node `index` of `level`; support holds
    /// node indices at `level + 1`.
    pub fn kernel_at(&self, level: usize, index: usize) -> Option<DiscreteDistribution> {
        let node = self.levels.get(level)?.get(index)?;
        if node.children.is_empty() {
            return None;
        }
        Some(DiscreteDistribution {
            support: node.children.clone(),
            weights: node
                .children
                .iter()
                .map(|&c| self.levels[level + 1][c].prob)
                .collect(),
        })
    }

    /// Conditional law `P_{t+1, ω_{1:t}}` of the next step given a path.
    pub fn conditional_kernel(&self, path: &NodePath) -> Result<DiscreteDistribution> {
        let level = path.depth() - 1;
        if path.depth() >= self.horizon() {
            return Err(Error::invalid(format!(
                "path of depth {} reaches the horizon; there is no next step",
                path.depth()
            )));
        }
        self.kernel_at(level, path.terminal())
            .ok_or_else(|| Error::invalid("terminal node has no children"))
    }

    /// Values `(x_1, ..., x_T)` along a full path.
    pub fn path_value(&self, leaf: &NodePath) -> Result<Vec<Vec<f64>>> {
        if leaf.depth() != self.horizon() {
            return Err(Error::invalid(format!(
                "path of depth {} is not a leaf path (horizon {})",
                leaf.depth(),
                self.horizon()
            )));
        }
        Ok(leaf
            .nodes()
            .iter()
            .enumerate()
            .map(|(l, &k)| self.levels[l][k].value.clone())
            .collect())
    }

    /// Values along the path ending at `leaf` on the last level.
    pub fn leaf_values(&self, leaf: usize) -> Vec<Vec<f64>> {
        let last = self.horizon() - 1;
        let mut out = vec![Vec::new(); self.horizon()];
        let mut k = leaf;
        for l in (0..=last).rev() {
            let node = &self.levels[l][k];
            out[l] = node.value.clone();
            if let Some(p) = node.parent {
                k = p;
            }
        }
        out
    }

    /// Values of every leaf path, indexed by leaf.
    pub fn all_leaf_values(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.leaf_count()).map(|k| self.leaf_values(k)).collect()
    }

    /// Ids along the path ending at `leaf`.
    pub fn leaf_ids(&self, leaf: usize) -> Vec<String> {
        let path = NodePath::to_node(self, self.horizon() - 1, leaf);
        path.nodes()
            .iter()
            .enumerate()
            .map(|(l, &k)| self.levels[l][k].id.clone())
            .collect()
    }

    pub fn leaf_index(&self, id: &str) -> Option<usize> {
        self.levels
            .last()?
            .iter()
            .position(|n| n.id == id)
    }

    /// A single deterministic path.
    pub fn deterministic(values: &[Vec<f64>]) -> Result<Self> {
        let levels = values
            .iter()
            .enumerate()
            .map(|(l, v)| {
                let parent = (l > 0).then(|| format!("n{}", l - 1));
                vec![NodeSpec {
                    id: format!("n{l}"),
                    parent,
                    prob: ProbSpec::Float(1.0),
                    value: v.clone(),
                }]
            })
            .collect();
        ScenarioTree::from_specs(levels)
    }

    /// A horizon-one tree with the given atoms.
    pub fn single_period(values: &[Vec<f64>], probs: &[f64]) -> Result<Self> {
        let level = values
            .iter()
            .zip(probs)
            .enumerate()
            .map(|(k, (v, &p))| NodeSpec::new(format!("a{k}"), None, p, v.clone()))
            .collect();
        ScenarioTree::from_specs(vec![level])
    }

    pub fn to_specs(&self) -> Vec<Vec<NodeSpec>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, level)| {
                level
                    .iter()
                    .map(|n| NodeSpec {
                        id: n.id.clone(),
                        parent: n.parent.map(|p| self.levels[l - 1][p].id.clone()),
                        prob: match n.exact {
                            Some(r) => ProbSpec::Exact(r),
                            None => ProbSpec::Float(n.prob),
                        },
                        value: n.value.clone(),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TreeFile::from(self)).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        load_tree(text.as_bytes())
    }
}

impl fmt::Display for ScenarioTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<usize> = self.levels.iter().map(Vec::len).collect();
        write!(f, "ScenarioTree(T={}, nodes per time {:?})", self.horizon(), sizes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TreeFile {
    horizon: usize,
    levels: Vec<Vec<NodeFile>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: String,
    parent: Option<String>,
    p: ProbFile,
    x: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ProbFile {
    Float(f64),
    Text(String),
}

impl From<&ScenarioTree> for TreeFile {
    fn from(tree: &ScenarioTree) -> Self {
        TreeFile {
            horizon: tree.horizon(),
            levels: tree
                .to_specs()
                .into_iter()
                .map(|level| {
                    level
                        .into_iter()
                        .map(|n| NodeFile {
                            id: n.id,
                            parent: n.parent,
                            p: match n.prob {
                                ProbSpec::Float(p) => ProbFile::Float(p),
                                ProbSpec::Exact(r) => ProbFile::Text(format!("{}/{}", r.numer(), r.denom())),
                            },
                            x: n.value,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn parse_ratio(s: &str) -> Result<Ratio<i64>> {
    let bad = || Error::Parse(format!("cannot read probability '{s}' as a ratio a/b"));
    let (a, b) = s.split_once('/').unwrap_or((s, "1"));
    let a: i64 = a.trim().parse().map_err(|_| bad())?;
    let b: i64 = b.trim().parse().map_err(|_| bad())?;
    if b == 0 {
        return Err(bad());
    }
    Ok(Ratio::new(a, b))
}

/// Parses and validates a tree from its JSON document.
pub fn load_tree(serialized: &[u8]) -> Result<ScenarioTree> {
    let file: TreeFile =
        serde_json::from_slice(serialized).map_err(|e| Error::Parse(e.to_string()))?;
    tree_from_file(file)
}

pub fn tree_from_value(value: serde_json::Value) -> Result<ScenarioTree> {
    let file: TreeFile = serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
    tree_from_file(file)
}

fn tree_from_file(file: TreeFile) -> Result<ScenarioTree> {
    if file.horizon != file.levels.len() {
        return Err(Error::validation(format!(
            "horizon {} but {} levels given",
            file.horizon,
            file.levels.len()
        )));
    }
    let levels = file
        .levels
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|n| {
                    Ok(NodeSpec {
                        id: n.id,
                        parent: n.parent,
                        prob: match n.p {
                            ProbFile::Float(p) => ProbSpec::Float(p),
                            ProbFile::Text(s) => ProbSpec::Exact(parse_ratio(&s)?),
                        },
                        value: n.x,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ScenarioTree::from_specs(levels)
}
