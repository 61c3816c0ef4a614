//! Multicausal transport: backward induction, coupling assembly and
//! verification, the brute-force LP oracle with dual certificates, the
//! restriction and gluing operations, and adapted Wasserstein distances.

use std::collections::HashMap;
use std::ops::Deref;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpProblem, Residuals};
use crate::ot::{
    advance, flat_index, multimarginal_ot_with_budget, normalize_potentials, tv_distance,
    CostTensor, TransportPlan,
};
use crate::tree::{DiscreteDistribution, ProductNodeTuple, ScenarioTree};
use crate::{DEFAULT_TENSOR_BUDGET, DEFAULT_TUPLE_BUDGET};

/// Tolerance on test-function integrals and certificate slacks.
pub const CAUSAL_TOL: f64 = 1e-8;
/// Tolerance on marginal agreement in total variation.
pub const MARGINAL_TOL: f64 = 1e-9;

/// A cost on tuples of full paths. `leaves[i]` is the leaf index in tree `i`
/// and `paths[i]` the values `(x_1, ..., x_T)` along it.
pub trait PathCost: Sync {
    fn cost(&self, leaves: &[usize], paths: &[&[Vec<f64>]]) -> f64;
}

impl<F> PathCost for F
where
    F: Fn(&[usize], &[&[Vec<f64>]]) -> f64 + Sync,
{
    fn cost(&self, leaves: &[usize], paths: &[&[Vec<f64>]]) -> f64 {
        self(leaves, paths)
    }
}

/// `Σ_t w_t Σ_{i<j} ||x_t^i - x_t^j||_p^p`; unit time weights when empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LpSum {
    pub p: f64,
    pub weights: Vec<f64>,
}

impl LpSum {
    pub fn new(p: f64) -> Self {
        LpSum { p, weights: Vec::new() }
    }

    pub fn quadratic() -> Self {
        Self::new(2.0)
    }
}

impl PathCost for LpSum {
    fn cost(&self, _: &[usize], paths: &[&[Vec<f64>]]) -> f64 {
        let mut total = 0.0;
        let horizon = paths.first().map_or(0, |p| p.len());
        for t in 0..horizon {
            let w = self.weights.get(t).copied().unwrap_or(1.0);
            for i in 0..paths.len() {
                for j in i + 1..paths.len() {
                    let s: f64 = paths[i][t]
                        .iter()
                        .zip(&paths[j][t])
                        .map(|(a, b)| (a - b).abs().powf(self.p))
                        .sum();
                    total += w * s;
                }
            }
        }
        total
    }
}

/// `(Σ_t ||x_t - y_t||_2)^p`, summed over pairs when more than two paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AwCost {
    pub p: f64,
}

impl PathCost for AwCost {
    fn cost(&self, _: &[usize], paths: &[&[Vec<f64>]]) -> f64 {
        let mut total = 0.0;
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                let d: f64 = paths[i]
                    .iter()
                    .zip(paths[j])
                    .map(|(a, b)| euclid(a, b))
                    .sum();
                total += d.powf(self.p);
            }
        }
        total
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dense cost indexed by leaf tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCost(pub CostTensor);

impl PathCost for TensorCost {
    fn cost(&self, leaves: &[usize], _: &[&[Vec<f64>]]) -> f64 {
        self.0.get(leaves)
    }
}

/// Precomputed ancestry and leaf values of a tree.
pub(crate) struct LeafTable {
    /// `anc[leaf][level]`.
    pub anc: Vec<Vec<usize>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl LeafTable {
    pub fn new(tree: &ScenarioTree) -> Self {
        let last = tree.horizon() - 1;
        let anc = (0..tree.leaf_count())
            .map(|k| (0..=last).map(|l| tree.ancestor(last, k, l)).collect())
            .collect();
        LeafTable {
            anc,
            values: tree.all_leaf_values(),
        }
    }
}

pub(crate) fn check_horizons(trees: &[ScenarioTree]) -> Result<usize> {
    let t = trees
        .first()
        .ok_or_else(|| Error::invalid("at least one tree is required"))?
        .horizon();
    if let Some(k) = trees.iter().position(|tr| tr.horizon() != t) {
        return Err(Error::DimensionMismatch(format!(
            "tree {k} has horizon {} but tree 0 has horizon {t}",
            trees[k].horizon()
        )));
    }
    Ok(t)
}

pub(crate) fn check_tuple_budget(trees: &[ScenarioTree], budget: u128) -> Result<Vec<usize>> {
    let dims: Vec<usize> = trees.iter().map(ScenarioTree::leaf_count).collect();
    let count = dims.iter().map(|&d| d as u128).product::<u128>();
    if count > budget {
        return Err(Error::Budget {
            what: "leaf tuples",
            requested: count,
            limit: budget,
        });
    }
    Ok(dims)
}

/// Evaluates the cost on every leaf tuple, in row-major order.
pub(crate) fn cost_table(trees: &[ScenarioTree], cost: &dyn PathCost) -> (Vec<usize>, Vec<f64>) {
    let tables: Vec<LeafTable> = trees.iter().map(LeafTable::new).collect();
    let dims: Vec<usize> = trees.iter().map(ScenarioTree::leaf_count).collect();
    let total: usize = dims.iter().product();
    let data = (0..total)
        .into_par_iter()
        .map(|flat| {
            let leaves = unflatten(flat, &dims);
            let paths: Vec<&[Vec<f64>]> = leaves
                .iter()
                .zip(&tables)
                .map(|(&k, t)| t.values[k].as_slice())
                .collect();
            cost.cost(&leaves, &paths)
        })
        .collect();
    (dims, data)
}

pub(crate) fn unflatten(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        idx[a] = flat % dims[a];
        flat /= dims[a];
    }
    idx
}

/// `V(t, ω̄_{1:t})` for `t = 0..=T`, indexed by node tuples at depth `t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueFunction {
    /// Node counts per process at each depth (empty at depth 0).
    pub dims: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl ValueFunction {
    pub fn get(&self, tuple: &ProductNodeTuple) -> Option<f64> {
        let dims = self.dims.get(tuple.time)?;
        if tuple.nodes.len() != dims.len() || tuple.nodes.iter().zip(dims).any(|(n, d)| n >= d) {
            return None;
        }
        Some(self.values[tuple.time][flat_index(&tuple.nodes, dims)])
    }

    pub fn root(&self) -> f64 {
        self.values[0][0]
    }
}

/// Kernels `K_{t+1}` for every node tuple at depth `t < T`. Plan entries are
/// node indices at the next level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelPolicy {
    pub dims: Vec<Vec<usize>>,
    pub plans: Vec<Vec<TransportPlan>>,
}

impl KernelPolicy {
    pub fn horizon(&self) -> usize {
        self.plans.len()
    }

    pub fn plan(&self, tuple: &ProductNodeTuple) -> Option<&TransportPlan> {
        let dims = self.dims.get(tuple.time)?;
        if tuple.nodes.len() != dims.len() || tuple.nodes.iter().zip(dims).any(|(n, d)| n >= d) {
            return None;
        }
        self.plans[tuple.time].get(flat_index(&tuple.nodes, dims))
    }

    pub fn set_plan(&mut self, tuple: &ProductNodeTuple, plan: TransportPlan) -> Result<()> {
        let dims = self
            .dims
            .get(tuple.time)
            .ok_or_else(|| Error::invalid("tuple time beyond the policy horizon"))?;
        if tuple.nodes.len() != dims.len() || tuple.nodes.iter().zip(dims).any(|(n, d)| n >= d) {
            return Err(Error::invalid("node tuple outside the policy"));
        }
        let k = flat_index(&tuple.nodes, dims);
        self.plans[tuple.time][k] = plan;
        Ok(())
    }

    /// The policy that couples all kernels independently.
    pub fn product(trees: &[ScenarioTree]) -> Result<Self> {
        let horizon = check_horizons(trees)?;
        let mut dims = vec![Vec::new()];
        let mut plans = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let count: usize = dims[t].iter().product();
            let next: Vec<usize> = trees.iter().map(|tr| tr.level_len(t)).collect();
            let slice = (0..count)
                .map(|flat| {
                    let kernels = kernels_at(trees, t, &unflatten(flat, &dims[t]));
                    product_plan(&kernels, &next)
                })
                .collect();
            plans.push(slice);
            dims.push(next);
        }
        dims.pop();
        Ok(KernelPolicy { dims, plans })
    }
}

/// Kernels of the next step after a node tuple at depth `t` (`t = 0` is the
/// root, where the kernels are the first-step laws).
fn kernels_at(trees: &[ScenarioTree], t: usize, nodes: &[usize]) -> Vec<DiscreteDistribution> {
    trees
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            if t == 0 {
                tr.first_step()
            } else {
                tr.kernel_at(t - 1, nodes[i]).expect("inner node has children")
            }
        })
        .collect()
}

fn product_plan(kernels: &[DiscreteDistribution], dims: &[usize]) -> TransportPlan {
    let local: Vec<usize> = kernels.iter().map(DiscreteDistribution::len).collect();
    let count: usize = local.iter().product();
    let mut idx = vec![0; local.len()];
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let w: f64 = idx.iter().zip(kernels).map(|(&k, m)| m.weights[k]).product();
        let nodes = idx.iter().zip(kernels).map(|(&k, m)| m.support[k]).collect();
        entries.push((nodes, w));
        advance(&mut idx, &local);
    }
    TransportPlan::new(dims.to_vec(), entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DppSolution {
    pub value: f64,
    pub values: ValueFunction,
    pub policy: KernelPolicy,
    /// Largest weak-duality gap over all inner problems.
    pub max_inner_gap: f64,
}

/// Backward induction for the multicausal problem.
pub fn mc_dpp(trees: &[ScenarioTree], cost: &dyn PathCost) -> Result<DppSolution> {
    mc_dpp_with_budget(trees, cost, DEFAULT_TUPLE_BUDGET)
}

pub fn mc_dpp_with_budget(
    trees: &[ScenarioTree],
    cost: &dyn PathCost,
    budget: u128,
) -> Result<DppSolution> {
    let horizon = check_horizons(trees)?;
    check_tuple_budget(trees, budget)?;
    let level_dims: Vec<Vec<usize>> = (0..=horizon)
        .map(|t| {
            if t == 0 {
                Vec::new()
            } else {
                trees.iter().map(|tr| tr.level_len(t - 1)).collect()
            }
        })
        .collect();

    let (_, terminal) = cost_table(trees, cost);
    if let Some(c) = terminal.iter().find(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("cost evaluates to {c}")));
    }
    let mut values = vec![Vec::new(); horizon + 1];
    values[horizon] = terminal;
    let mut plans = vec![Vec::new(); horizon];
    let mut max_gap = 0.0f64;

    for t in (0..horizon).rev() {
        let dims = &level_dims[t];
        let next_dims = &level_dims[t + 1];
        let next_values = &values[t + 1];
        let count: usize = dims.iter().product();
        let solved: Vec<(f64, TransportPlan, f64)> = (0..count)
            .into_par_iter()
            .map(|flat| {
                let nodes = unflatten(flat, dims);
                let kernels = kernels_at(trees, t, &nodes);
                let local: Vec<usize> = kernels.iter().map(DiscreteDistribution::len).collect();
                let tensor = CostTensor::from_fn(local, |idx| {
                    let child: Vec<usize> =
                        idx.iter().zip(&kernels).map(|(&k, m)| m.support[k]).collect();
                    next_values[flat_index(&child, next_dims)]
                });
                let sol = multimarginal_ot_with_budget(&kernels, &tensor, DEFAULT_TENSOR_BUDGET)?;
                let entries = sol
                    .plan
                    .entries
                    .into_iter()
                    .map(|(idx, w)| {
                        let nodes = idx.iter().zip(&kernels).map(|(&k, m)| m.support[k]).collect();
                        (nodes, w)
                    })
                    .collect();
                Ok((
                    sol.value,
                    TransportPlan::new(next_dims.clone(), entries),
                    sol.duality_gap,
                ))
            })
            .collect::<Result<_>>()?;
        let mut vs = Vec::with_capacity(count);
        let mut ps = Vec::with_capacity(count);
        for (v, p, g) in solved {
            vs.push(v);
            ps.push(p);
            max_gap = max_gap.max(g);
        }
        values[t] = vs;
        plans[t] = ps;
    }
    let mut policy_dims = level_dims.clone();
    policy_dims.pop();
    Ok(DppSolution {
        value: values[0][0],
        values: ValueFunction {
            dims: level_dims,
            values,
        },
        policy: KernelPolicy {
            dims: policy_dims,
            plans,
        },
        max_inner_gap: max_gap,
    })
}

/// A coupling on leaf tuples; axis `i` ranges over the leaves of tree `i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MulticausalCoupling {
    pub plan: TransportPlan,
}

impl Deref for MulticausalCoupling {
    type Target = TransportPlan;

    fn deref(&self) -> &TransportPlan {
        &self.plan
    }
}

impl MulticausalCoupling {
    pub fn new(leaf_counts: Vec<usize>, entries: Vec<(Vec<usize>, f64)>) -> Self {
        MulticausalCoupling {
            plan: TransportPlan::new(leaf_counts, entries),
        }
    }

    /// The independent coupling of the leaf laws.
    pub fn product(trees: &[ScenarioTree]) -> Self {
        let dims: Vec<usize> = trees.iter().map(ScenarioTree::leaf_count).collect();
        let count: usize = dims.iter().product();
        let mut idx = vec![0; dims.len()];
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let w = idx.iter().zip(trees).map(|(&k, t)| t.leaf_law()[k]).product();
            entries.push((idx.clone(), w));
            advance(&mut idx, &dims);
        }
        Self::new(dims, entries)
    }

    pub fn expected_cost(&self, trees: &[ScenarioTree], cost: &dyn PathCost) -> f64 {
        let tables: Vec<LeafTable> = trees.iter().map(LeafTable::new).collect();
        self.plan.expect(|leaves| {
            let paths: Vec<&[Vec<f64>]> = leaves
                .iter()
                .zip(&tables)
                .map(|(&k, t)| t.values[k].as_slice())
                .collect();
            cost.cost(leaves, &paths)
        })
    }
}

/// Builds the coupling `K_1 ⊗ K_2 ⊗ ... ⊗ K_T` from a policy.
pub fn assemble_coupling(policy: &KernelPolicy) -> Result<MulticausalCoupling> {
    let horizon = policy.horizon();
    if horizon == 0 {
        return Err(Error::invalid("empty policy"));
    }
    let mut current: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    for t in 0..horizon {
        let mut next: HashMap<Vec<usize>, f64> = HashMap::new();
        for (nodes, w) in &current {
            let tuple = ProductNodeTuple {
                time: t,
                nodes: nodes.clone(),
            };
            let plan = policy
                .plan(&tuple)
                .filter(|p| !p.entries.is_empty())
                .ok_or_else(|| {
                    Error::invalid(format!("incomplete policy: no plan at time {t} for {nodes:?}"))
                })?;
            for (child, pw) in &plan.entries {
                *next.entry(child.clone()).or_insert(0.0) += w * pw;
            }
        }
        current = next.into_iter().collect();
    }
    let leaf_counts = policy.plans[horizon - 1]
        .first()
        .map(|p| p.dims.clone())
        .unwrap_or_default();
    Ok(MulticausalCoupling::new(leaf_counts, current))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub process: usize,
    /// Time of the own node being tested (1-based).
    pub time: usize,
    /// Time of the conditioning information, `time - 1`.
    pub conditioning_time: usize,
    /// Node ids of the other processes at the conditioning time.
    pub others: Vec<String>,
    pub own: String,
    /// `π(A, b) - P(b | parent b) π(A, parent b)`.
    pub violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub pass: bool,
    pub worst_violation: f64,
    pub marginal_error: f64,
    pub witnesses: Vec<Witness>,
}

/// Evaluates every indicator test function on the coupling.
pub fn verify_multicausal(
    coupling: &TransportPlan,
    trees: &[ScenarioTree],
) -> Result<VerificationReport> {
    let all: Vec<usize> = (0..trees.len()).collect();
    verify_directions(coupling, trees, &all)
}

/// One-directional check for a plan on `(X, Y)` leaf pairs: the future of
/// `X` must not depend on the past of `Y`. Only the structure of `tree_y` is
/// used, not its probabilities.
pub fn verify_causal(
    plan: &TransportPlan,
    tree_x: &ScenarioTree,
    tree_y: &ScenarioTree,
) -> Result<VerificationReport> {
    verify_directions(plan, &[tree_x.clone(), tree_y.clone()], &[0])
}

pub(crate) fn verify_directions(
    coupling: &TransportPlan,
    trees: &[ScenarioTree],
    processes: &[usize],
) -> Result<VerificationReport> {
    let horizon = check_horizons(trees)?;
    let n = trees.len();
    if coupling.dims.len() != n
        || coupling.dims.iter().zip(trees).any(|(&d, t)| d != t.leaf_count())
    {
        return Err(Error::DimensionMismatch(format!(
            "coupling of shape {:?} does not match the trees",
            coupling.dims
        )));
    }
    // Only the tested processes' laws enter the test functions; the other
    // trees contribute their filtrations alone.
    let marginal_error = processes
        .iter()
        .map(|&i| tv_distance(&coupling.marginal(i), trees[i].leaf_law()))
        .fold(0.0, f64::max);
    if marginal_error > MARGINAL_TOL {
        return Err(Error::validation(format!(
            "coupling marginals differ from the tree laws by {marginal_error:.3e} in total variation"
        )));
    }
    let tables: Vec<LeafTable> = trees.iter().map(LeafTable::new).collect();
    let mut witnesses = Vec::new();
    let mut worst = 0.0f64;
    for &i in processes {
        for l in 1..horizon {
            // (others at l-1, own at l) and (others at l-1, own at l-1)
            let mut joint: HashMap<(Vec<usize>, usize), f64> = HashMap::new();
            let mut before: HashMap<(Vec<usize>, usize), f64> = HashMap::new();
            for (leaves, w) in &coupling.entries {
                let others: Vec<usize> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| tables[j].anc[leaves[j]][l - 1])
                    .collect();
                let own = &tables[i].anc[leaves[i]];
                *joint.entry((others.clone(), own[l])).or_insert(0.0) += w;
                *before.entry((others, own[l - 1])).or_insert(0.0) += w;
            }
            let tree = &trees[i];
            let mut keys: Vec<&(Vec<usize>, usize)> = before.keys().collect();
            keys.sort();
            for (others, p) in keys {
                let mass = before[&(others.clone(), *p)];
                for &b in tree.node(l - 1, *p).children() {
                    let pb = tree.node(l, b).prob;
                    let got = joint.get(&(others.clone(), b)).copied().unwrap_or(0.0);
                    let v = got - pb * mass;
                    worst = worst.max(v.abs());
                    if v.abs() > CAUSAL_TOL {
                        let ids = (0..n)
                            .filter(|&j| j != i)
                            .zip(others)
                            .map(|(j, &k)| trees[j].node(l - 1, k).id.clone())
                            .collect();
                        witnesses.push(Witness {
                            process: i,
                            time: l + 1,
                            conditioning_time: l,
                            others: ids,
                            own: tree.node(l, b).id.clone(),
                            violation: v,
                        });
                    }
                }
            }
        }
    }
    witnesses.sort_by(|a, b| {
        b.violation
            .abs()
            .total_cmp(&a.violation.abs())
            .then_with(|| (a.process, a.time).cmp(&(b.process, b.time)))
    });
    Ok(VerificationReport {
        pass: worst <= CAUSAL_TOL,
        worst_violation: worst,
        marginal_error,
        witnesses,
    })
}

/// One linearized test-function equality on leaf tuples.
pub(crate) struct CausalRow {
    pub process: usize,
    pub level: usize,
    /// Flat index of the other processes' nodes at `level - 1`.
    pub others: usize,
    pub own: usize,
    /// `(flat leaf-tuple index, coefficient)`.
    pub terms: Vec<(usize, f64)>,
}

/// Indicator test-function rows for the listed processes. Within each sibling
/// group the last child is omitted: its row is minus the sum of the others.
pub(crate) fn causal_rows(trees: &[ScenarioTree], processes: &[usize]) -> Vec<CausalRow> {
    let n = trees.len();
    let horizon = trees[0].horizon();
    let tables: Vec<LeafTable> = trees.iter().map(LeafTable::new).collect();
    let dims: Vec<usize> = trees.iter().map(ScenarioTree::leaf_count).collect();
    let total: usize = dims.iter().product();
    let mut out = Vec::new();
    for &i in processes {
        let tree = &trees[i];
        for l in 1..horizon {
            let other_dims: Vec<usize> = (0..n)
                .filter(|&j| j != i)
                .map(|j| trees[j].level_len(l - 1))
                .collect();
            let others_count: usize = other_dims.iter().product();
            let width = tree.level_len(l);
            let mut slots: Vec<Vec<(usize, f64)>> = vec![Vec::new(); others_count * width];
            let mut idx = vec![0; n];
            for flat in 0..total {
                let others: Vec<usize> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| tables[j].anc[idx[j]][l - 1])
                    .collect();
                let a = flat_index(&others, &other_dims);
                let own = tables[i].anc[idx[i]][l];
                let parent = tables[i].anc[idx[i]][l - 1];
                let children = tree.node(l - 1, parent).children();
                for &b in &children[..children.len() - 1] {
                    let coef = f64::from(u8::from(b == own)) - tree.node(l, b).prob;
                    slots[a * width + b].push((flat, coef));
                }
                advance(&mut idx, &dims);
            }
            for (s, terms) in slots.into_iter().enumerate() {
                if !terms.is_empty() {
                    out.push(CausalRow {
                        process: i,
                        level: l,
                        others: s / width,
                        own: s % width,
                        terms,
                    });
                }
            }
        }
    }
    out
}

/// Potentials `f^i` on leaves and martingale coefficients `a_t^i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualCertificate {
    pub potentials: Vec<Vec<f64>>,
    /// `coefficients[i][l - 1][A * level_len + b]` for levels `l >= 1`, with
    /// `A` the flat index of the other processes' nodes at `l - 1`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CertificateCheck {
    /// `Σ_i E_{P^i}[f^i]`.
    pub dual_value: f64,
    /// `min (c + F - ⊕ f^i)` over every leaf tuple.
    pub min_slack: f64,
    /// `∫ F dπ` under the supplied coupling.
    pub martingale_integral: f64,
}

impl DualCertificate {
    fn zero(trees: &[ScenarioTree], processes: &[usize]) -> Self {
        let n = trees.len();
        let horizon = trees[0].horizon();
        let coefficients = (0..n)
            .map(|i| {
                if !processes.contains(&i) {
                    return Vec::new();
                }
                (1..horizon)
                    .map(|l| {
                        let others: usize = (0..n)
                            .filter(|&j| j != i)
                            .map(|j| trees[j].level_len(l - 1))
                            .product();
                        vec![0.0; others * trees[i].level_len(l)]
                    })
                    .collect()
            })
            .collect();
        DualCertificate {
            potentials: trees.iter().map(|t| vec![0.0; t.leaf_count()]).collect(),
            coefficients,
        }
    }

    /// `F(ω̄) = Σ_{i,t} [a_t^i(A, ω_t^i) - Σ_b P(b | ω_{t-1}^i) a_t^i(A, b)]`.
    pub fn martingale(&self, trees: &[ScenarioTree], leaves: &[usize]) -> f64 {
        let n = trees.len();
        let last = trees[0].horizon() - 1;
        let mut total = 0.0;
        for (i, levels) in self.coefficients.iter().enumerate() {
            let tree = &trees[i];
            for (li, coef) in levels.iter().enumerate() {
                let l = li + 1;
                let mut a = 0;
                for j in (0..n).filter(|&j| j != i) {
                    a = a * trees[j].level_len(l - 1) + trees[j].ancestor(last, leaves[j], l - 1);
                }
                let width = tree.level_len(l);
                let own = tree.ancestor(last, leaves[i], l);
                let parent = tree.ancestor(last, leaves[i], l - 1);
                let mean: f64 = tree
                    .node(l - 1, parent)
                    .children()
                    .iter()
                    .map(|&b| tree.node(l, b).prob * coef[a * width + b])
                    .sum();
                total += coef[a * width + own] - mean;
            }
        }
        total
    }

    pub fn check(
        &self,
        trees: &[ScenarioTree],
        cost: &dyn PathCost,
        coupling: &TransportPlan,
    ) -> CertificateCheck {
        let dual_value = self
            .potentials
            .iter()
            .zip(trees)
            .map(|(f, t)| f.iter().zip(t.leaf_law()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let (dims, costs) = cost_table(trees, cost);
        let min_slack = (0..costs.len())
            .into_par_iter()
            .map(|flat| {
                let leaves = unflatten(flat, &dims);
                let f: f64 = leaves.iter().zip(&self.potentials).map(|(&k, f)| f[k]).sum();
                costs[flat] + self.martingale(trees, &leaves) - f
            })
            .reduce(|| f64::INFINITY, f64::min);
        let martingale_integral = coupling.expect(|leaves| self.martingale(trees, leaves));
        CertificateCheck {
            dual_value,
            min_slack,
            martingale_integral,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub value: f64,
    pub coupling: MulticausalCoupling,
    pub certificate: DualCertificate,
    pub residuals: Residuals,
    pub iterations: usize,
}

/// Solves the multicausal problem as one LP over all leaf tuples.
pub fn brute_force_mcot(trees: &[ScenarioTree], cost: &dyn PathCost) -> Result<OracleSolution> {
    brute_force_mcot_with_budget(trees, cost, DEFAULT_TUPLE_BUDGET)
}

pub fn brute_force_mcot_with_budget(
    trees: &[ScenarioTree],
    cost: &dyn PathCost,
    budget: u128,
) -> Result<OracleSolution> {
    check_horizons(trees)?;
    check_tuple_budget(trees, budget)?;
    let all: Vec<usize> = (0..trees.len()).collect();
    tuple_lp(trees, cost, &all)
}

/// Transport LP over leaf tuples with marginal rows and the test-function
/// rows of the listed processes.
pub(crate) fn tuple_lp(
    trees: &[ScenarioTree],
    cost: &dyn PathCost,
    processes: &[usize],
) -> Result<OracleSolution> {
    let (dims, costs) = cost_table(trees, cost);
    if let Some(c) = costs.iter().find(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("cost evaluates to {c}")));
    }
    let mut lp = LpProblem::new();
    for &c in &costs {
        lp.add_var(c);
    }
    let n = trees.len();
    let mut marginal_rows: Vec<Vec<Vec<(usize, f64)>>> =
        dims.iter().map(|&d| vec![Vec::new(); d]).collect();
    let mut idx = vec![0; n];
    for flat in 0..costs.len() {
        for (i, &k) in idx.iter().enumerate() {
            marginal_rows[i][k].push((flat, 1.0));
        }
        advance(&mut idx, &dims);
    }
    let mut marginal_ids = Vec::with_capacity(n);
    for (i, rows) in marginal_rows.into_iter().enumerate() {
        let law = trees[i].leaf_law();
        marginal_ids.push(
            rows.into_iter()
                .enumerate()
                .map(|(k, terms)| lp.add_row(terms, law[k]))
                .collect::<Vec<_>>(),
        );
    }
    let causal = causal_rows(trees, processes);
    let mut causal_ids = Vec::with_capacity(causal.len());
    for row in &causal {
        causal_ids.push(lp.add_row(row.terms.clone(), 0.0));
    }
    let sol = solve_lp(&lp)?;

    let mut cert = DualCertificate::zero(trees, processes);
    cert.potentials = marginal_ids
        .iter()
        .map(|ids| ids.iter().map(|&r| sol.duals[r]).collect())
        .collect();
    normalize_potentials(&mut cert.potentials);
    for (row, &r) in causal.iter().zip(&causal_ids) {
        let width = trees[row.process].level_len(row.level);
        cert.coefficients[row.process][row.level - 1][row.others * width + row.own] = -sol.duals[r];
    }
    let entries = sol
        .x
        .iter()
        .enumerate()
        .map(|(flat, &w)| (unflatten(flat, &dims), w))
        .collect();
    Ok(OracleSolution {
        value: sol.objective,
        coupling: MulticausalCoupling::new(dims, entries),
        certificate: cert,
        residuals: sol.residuals,
        iterations: sol.iterations,
    })
}

/// Pushforward onto the coordinates in `subset` (in the given order).
pub fn restrict_coupling(coupling: &TransportPlan, subset: &[usize]) -> Result<MulticausalCoupling> {
    if subset.is_empty() {
        return Err(Error::invalid("empty index subset"));
    }
    let n = coupling.dims.len();
    for (k, &i) in subset.iter().enumerate() {
        if i >= n {
            return Err(Error::invalid(format!("index {i} out of range for {n} processes")));
        }
        if subset[..k].contains(&i) {
            return Err(Error::invalid(format!("index {i} repeated")));
        }
    }
    let mut acc: HashMap<Vec<usize>, f64> = HashMap::new();
    for (leaves, w) in &coupling.entries {
        let key: Vec<usize> = subset.iter().map(|&i| leaves[i]).collect();
        *acc.entry(key).or_insert(0.0) += w;
    }
    let dims = subset.iter().map(|&i| coupling.dims[i]).collect();
    Ok(MulticausalCoupling::new(dims, acc.into_iter().collect()))
}

/// Glues `π` on processes `1..=M` and `γ` on `M..=N` along their shared
/// process `M` (the last axis of `π`, the first of `γ`).
pub fn glue(pi: &TransportPlan, gamma: &TransportPlan) -> Result<MulticausalCoupling> {
    let (Some(&dm), Some(&dg)) = (pi.dims.last(), gamma.dims.first()) else {
        return Err(Error::invalid("couplings must have at least one axis"));
    };
    if dm != dg {
        return Err(Error::DimensionMismatch(format!(
            "shared process has {dm} leaves in the first coupling and {dg} in the second"
        )));
    }
    let m = pi.dims.len() - 1;
    let shared_pi = pi.marginal(m);
    let shared_gamma = gamma.marginal(0);
    let tv = tv_distance(&shared_pi, &shared_gamma);
    if tv > MARGINAL_TOL {
        return Err(Error::validation(format!(
            "shared marginals differ by {tv:.3e} in total variation"
        )));
    }
    let mut by_shared: Vec<Vec<(&[usize], f64)>> = vec![Vec::new(); dm];
    for (idx, w) in &gamma.entries {
        by_shared[idx[0]].push((&idx[1..], *w / shared_gamma[idx[0]]));
    }
    let mut entries = Vec::new();
    for (idx, w) in &pi.entries {
        for (rest, k) in &by_shared[idx[m]] {
            let mut full = idx.clone();
            full.extend_from_slice(rest);
            entries.push((full, w * k));
        }
    }
    let mut dims = pi.dims.clone();
    dims.extend_from_slice(&gamma.dims[1..]);
    Ok(MulticausalCoupling::new(dims, entries))
}

/// `AW_p(X, Y)` with path distance `Σ_t ||x_t - y_t||_2`.
pub fn aw_distance(x: &ScenarioTree, y: &ScenarioTree, p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::invalid(format!("exponent p = {p} must be at least 1")));
    }
    let sol = mc_dpp(&[x.clone(), y.clone()], &AwCost { p })?;
    Ok(sol.value.max(0.0).powf(1.0 / p))
}
