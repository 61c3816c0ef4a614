//! Classical and multimarginal optimal transport between discrete laws.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpProblem, Residuals};
use crate::tree::DiscreteDistribution;
use crate::DEFAULT_TENSOR_BUDGET;

/// Sparse nonnegative measure on a product of finite index sets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportPlan {
    /// Size of each axis.
    pub dims: Vec<usize>,
    /// Positive entries in lexicographic order of their index tuples.
    pub entries: Vec<(Vec<usize>, f64)>,
}

impl TransportPlan {
    pub fn new(dims: Vec<usize>, mut entries: Vec<(Vec<usize>, f64)>) -> Self {
        entries.retain(|(_, w)| *w > 0.0);
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        TransportPlan { dims, entries }
    }

    /// Pushforward onto one axis.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[axis]];
        for (idx, w) in &self.entries {
            out[idx[axis]] += w;
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }

    pub fn weight(&self, index: &[usize]) -> f64 {
        self.entries
            .binary_search_by(|(i, _)| i.as_slice().cmp(index))
            .map_or(0.0, |k| self.entries[k].1)
    }

    pub fn expect(&self, f: impl Fn(&[usize]) -> f64) -> f64 {
        self.entries.iter().map(|(i, w)| w * f(i)).sum()
    }

    /// Largest total-variation distance between a marginal and its target.
    pub fn marginal_error(&self, targets: &[&[f64]]) -> f64 {
        targets
            .iter()
            .enumerate()
            .map(|(axis, t)| tv_distance(&self.marginal(axis), t))
            .fold(0.0, f64::max)
    }
}

/// `½ Σ |p - q|`, treating missing entries as zero.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    0.5 * (0..n)
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Dense cost tensor in row-major order (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct CostTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl CostTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor of shape {dims:?} needs {len} entries, got {}",
                data.len()
            )));
        }
        Ok(CostTensor { dims, data })
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            advance(&mut idx, &dims);
        }
        CostTensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(idx, &self.dims)]
    }
}

/// Row-major successor of a multi-index; wraps to all zeros after the last.
pub(crate) fn advance(idx: &mut [usize], dims: &[usize]) {
    for a in (0..dims.len()).rev() {
        idx[a] += 1;
        if idx[a] < dims[a] {
            return;
        }
        idx[a] = 0;
    }
}

pub(crate) fn flat_index(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimarginalSolution {
    pub value: f64,
    /// Indices are positions within each marginal's support list.
    pub plan: TransportPlan,
    /// Potentials per marginal atom; every block but the last is pinned to
    /// zero at its first atom.
    pub duals: Vec<Vec<f64>>,
    /// `|value - Σ_i Σ_k duals[i][k] w_ik|`.
    pub duality_gap: f64,
    pub iterations: usize,
}

pub fn multimarginal_ot(
    marginals: &[DiscreteDistribution],
    cost: &CostTensor,
) -> Result<MultimarginalSolution> {
    multimarginal_ot_with_budget(marginals, cost, DEFAULT_TENSOR_BUDGET)
}

pub fn multimarginal_ot_with_budget(
    marginals: &[DiscreteDistribution],
    cost: &CostTensor,
    budget: u128,
) -> Result<MultimarginalSolution> {
    if marginals.is_empty() {
        return Err(Error::invalid("no marginals"));
    }
    let dims: Vec<usize> = marginals.iter().map(DiscreteDistribution::len).collect();
    if dims != cost.dims {
        return Err(Error::DimensionMismatch(format!(
            "cost tensor shape {:?} does not match marginal sizes {dims:?}",
            cost.dims
        )));
    }
    let entries = dims.iter().map(|&d| d as u128).product::<u128>();
    if entries > budget {
        return Err(Error::Budget {
            what: "cost tensor entries",
            requested: entries,
            limit: budget,
        });
    }
    if let Some(w) = marginals.iter().flat_map(|m| &m.weights).find(|w| **w <= 0.0) {
        return Err(Error::invalid(format!("marginal weight {w} is not positive")));
    }

    let n = marginals.len();
    if n == 1 {
        let w = &marginals[0].weights;
        let value = w.iter().zip(&cost.data).map(|(a, b)| a * b).sum();
        let plan = TransportPlan::new(
            dims.clone(),
            w.iter().enumerate().map(|(k, &p)| (vec![k], p)).collect(),
        );
        return Ok(MultimarginalSolution {
            value,
            plan,
            duals: vec![cost.data.clone()],
            duality_gap: 0.0,
            iterations: 0,
        });
    }

    let mut lp = LpProblem::new();
    for &c in &cost.data {
        lp.add_var(c);
    }
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dims.iter().sum()];
    let mut idx = vec![0; n];
    for var in 0..cost.data.len() {
        for (axis, &k) in idx.iter().enumerate() {
            rows[offsets[axis] + k].push((var, 1.0));
        }
        advance(&mut idx, &dims);
    }
    for (r, terms) in rows.into_iter().enumerate() {
        let axis = offsets.iter().rposition(|&o| o <= r).expect("offset table");
        lp.add_row(terms, marginals[axis].weights[r - offsets[axis]]);
    }
    let sol = solve_lp(&lp)?;

    let mut entries = Vec::new();
    let mut idx = vec![0; n];
    for &x in &sol.x {
        if x > 0.0 {
            entries.push((idx.clone(), x));
        }
        advance(&mut idx, &dims);
    }
    let mut duals: Vec<Vec<f64>> = (0..n)
        .map(|axis| sol.duals[offsets[axis]..offsets[axis] + dims[axis]].to_vec())
        .collect();
    normalize_potentials(&mut duals);
    let dual_value: f64 = duals
        .iter()
        .zip(marginals)
        .map(|(d, m)| d.iter().zip(&m.weights).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(MultimarginalSolution {
        value: sol.objective,
        plan: TransportPlan::new(dims, entries),
        duality_gap: (sol.objective - dual_value).abs(),
        duals,
        iterations: sol.iterations,
    })
}

/// Pins every block but the last to zero at its first atom; the last block
/// absorbs the shifts so that `⊕ φ_i` is unchanged.
pub(crate) fn normalize_potentials(duals: &mut [Vec<f64>]) {
    let n = duals.len();
    if n < 2 {
        return;
    }
    let mut shift = 0.0;
    for d in duals.iter_mut().take(n - 1) {
        let s = d[0];
        d.iter_mut().for_each(|v| *v -= s);
        shift += s;
    }
    duals[n - 1].iter_mut().for_each(|v| *v += shift);
}

/// Two-marginal transport by successive shortest augmenting paths.
///
/// This route does not go through the simplex engine, which makes it an
/// independent check on [`multimarginal_ot`] for `N = 2`.
pub fn classical_ot(
    mu: &DiscreteDistribution,
    nu: &DiscreteDistribution,
    cost: &[Vec<f64>],
) -> Result<(f64, TransportPlan)> {
    let (a, b) = (mu.len(), nu.len());
    if cost.len() != a || cost.iter().any(|r| r.len() != b) {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix must be {a}x{b}"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite cost"));
    }
    // Residual graph: source, a supply nodes, b demand nodes, sink.
    let source = 0;
    let sink = a + b + 1;
    let mut graph = FlowGraph::new(a + b + 2);
    for i in 0..a {
        graph.add_edge(source, 1 + i, mu.weights[i], 0.0);
    }
    let mut transport_edges = Vec::with_capacity(a * b);
    for (i, row) in cost.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            transport_edges.push((i, j, graph.add_edge(1 + i, 1 + a + j, f64::INFINITY, c)));
        }
    }
    for j in 0..b {
        graph.add_edge(1 + a + j, sink, nu.weights[j], 0.0);
    }
    let mut remaining = 1.0f64;
    while remaining > 1e-15 {
        let Some(path) = graph.shortest_path(source, sink) else {
            break;
        };
        let push = path
            .iter()
            .map(|&e| graph.edges[e].cap)
            .fold(remaining, f64::min);
        if push <= 1e-18 {
            break;
        }
        for &e in &path {
            graph.edges[e].cap -= push;
            graph.edges[e ^ 1].cap += push;
        }
        remaining -= push;
    }
    let mut entries = Vec::new();
    let mut value = 0.0;
    for (i, j, e) in transport_edges {
        let flow = graph.edges[e ^ 1].cap;
        if flow > 0.0 {
            value += flow * cost[i][j];
            entries.push((vec![i, j], flow));
        }
    }
    Ok((value, TransportPlan::new(vec![a, b], entries)))
}

struct FlowEdge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct FlowGraph {
    adj: Vec<Vec<usize>>,
    edges: Vec<FlowEdge>,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        FlowGraph {
            adj: vec![Vec::new(); nodes],
            edges: Vec::new(),
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(FlowEdge { to, cap, cost });
        self.edges.push(FlowEdge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    /// Bellman–Ford over edges with residual capacity; returns edge ids.
    fn shortest_path(&self, s: usize, t: usize) -> Option<Vec<usize>> {
        let nodes = self.adj.len();
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        dist[s] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &self.adj[u] {
                    let edge = &self.edges[e];
                    if edge.cap > 1e-15 && dist[u] + edge.cost < dist[edge.to] - 1e-14 {
                        dist[edge.to] = dist[u] + edge.cost;
                        via[edge.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t] == f64::INFINITY {
            return None;
        }
        let mut path = Vec::new();
        let mut v = t;
        while v != s {
            let e = via[v];
            path.push(e);
            v = self.edges[e ^ 1].to;
        }
        path.reverse();
        Some(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedSupportBarycenter {
    pub value: f64,
    /// Barycenter weights over the support points.
    pub nu: Vec<f64>,
    /// One plan per input measure, axes (support point, atom).
    pub plans: Vec<TransportPlan>,
    pub residuals: Residuals,
}

/// Minimizes `Σ_i λ_i W_{c_i}(ν, μ_i)` over laws `ν` on a fixed support as one
/// joint linear program. `costs[i][s][k]` is the cost between support point
/// `s` and atom `k` of `measures[i]`.
pub fn wasserstein_barycenter_fixed_support(
    measures: &[DiscreteDistribution],
    weights: &[f64],
    costs: &[Vec<Vec<f64>>],
    support_len: usize,
) -> Result<FixedSupportBarycenter> {
    if weights.len() != measures.len() {
        return Err(Error::DimensionMismatch("one weight per measure".into()));
    }
    if weights.iter().any(|&l| !(l > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("barycenter weights must be positive and sum to one"));
    }
    let weighted: Vec<Vec<Vec<f64>>> = costs
        .iter()
        .zip(weights)
        .map(|(c, &l)| c.iter().map(|row| row.iter().map(|v| l * v).collect()).collect())
        .collect();
    barycenter_lp(measures, &weighted, support_len)
}

pub(crate) fn barycenter_lp(
    measures: &[DiscreteDistribution],
    costs: &[Vec<Vec<f64>>],
    support_len: usize,
) -> Result<FixedSupportBarycenter> {
    if support_len == 0 {
        return Err(Error::invalid("empty barycenter support"));
    }
    if measures.is_empty() || costs.len() != measures.len() {
        return Err(Error::DimensionMismatch("one cost matrix per measure".into()));
    }
    for (i, (c, m)) in costs.iter().zip(measures).enumerate() {
        if c.len() != support_len || c.iter().any(|row| row.len() != m.len()) {
            return Err(Error::DimensionMismatch(format!(
                "cost matrix {i} must be {support_len}x{}",
                m.len()
            )));
        }
    }
    let mut lp = LpProblem::new();
    let nu_vars: Vec<usize> = (0..support_len).map(|_| lp.add_var(0.0)).collect();
    let mut plan_vars = Vec::with_capacity(measures.len());
    for c in costs {
        let vars: Vec<Vec<usize>> = c
            .iter()
            .map(|row| row.iter().map(|&v| lp.add_var(v)).collect())
            .collect();
        plan_vars.push(vars);
    }
    for (i, m) in measures.iter().enumerate() {
        for k in 0..m.len() {
            let terms = (0..support_len).map(|s| (plan_vars[i][s][k], 1.0)).collect();
            lp.add_row(terms, m.weights[k]);
        }
        for s in 0..support_len {
            let mut terms: Vec<(usize, f64)> = plan_vars[i][s].iter().map(|&v| (v, 1.0)).collect();
            terms.push((nu_vars[s], -1.0));
            lp.add_row(terms, 0.0);
        }
    }
    let sol = solve_lp(&lp)?;
    let nu = nu_vars.iter().map(|&v| sol.x[v]).collect();
    let plans = plan_vars
        .iter()
        .zip(measures)
        .map(|(vars, m)| {
            let mut entries = Vec::new();
            for (s, row) in vars.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    entries.push((vec![s, k], sol.x[v]));
                }
            }
            TransportPlan::new(vec![support_len, m.len()], entries)
        })
        .collect();
    Ok(FixedSupportBarycenter {
        value: sol.objective,
        nu,
        plans,
        residuals: sol.residuals,
    })
}
