//! Bicausal barycenters through the multimarginal reformulation, causal
//! barycenters as one joint LP, the anticausal reduction to a classical
//! barycenter, and the Gaussian counterexample separating the two notions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpProblem, Residuals};
use crate::multicausal::{
    assemble_coupling, causal_rows, check_horizons, cost_table, mc_dpp, tuple_lp, unflatten,
    DualCertificate, KernelPolicy, LeafTable, MulticausalCoupling, PathCost, TensorCost,
    ValueFunction,
};
use crate::ot::{barycenter_lp, CostTensor, TransportPlan};
use crate::quant::quantize_gauss_hermite;
use crate::tree::{NodeSpec, ScenarioTree};
use crate::DEFAULT_TUPLE_BUDGET;

/// One per-time cost `c_t^i(x_t, y_t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeCost {
    /// `λ ||x - y||_p^p`.
    Power { lambda: f64, p: f64 },
    /// Explicit values on finite grids: `values[a][b] = c(xs[a], ys[b])`.
    Matrix {
        xs: Vec<Vec<f64>>,
        ys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
    },
}

fn grid_position(grid: &[Vec<f64>], v: &[f64]) -> Option<usize> {
    grid.iter().position(|g| {
        g.len() == v.len() && g.iter().zip(v).all(|(a, b)| (a - b).abs() <= 1e-12)
    })
}

impl TimeCost {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            TimeCost::Power { lambda, p } => {
                if x.len() != y.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "state of dimension {} against task of dimension {}",
                        x.len(),
                        y.len()
                    )));
                }
                Ok(lambda * x.iter().zip(y).map(|(a, b)| (a - b).abs().powf(*p)).sum::<f64>())
            }
            TimeCost::Matrix { xs, ys, values } => {
                let a = grid_position(xs, x)
                    .ok_or_else(|| Error::invalid(format!("state {x:?} is not on the cost grid")))?;
                let b = grid_position(ys, y)
                    .ok_or_else(|| Error::invalid(format!("task {y:?} is not on the cost grid")))?;
                Ok(values[a][b])
            }
        }
    }

    pub fn lower_bound(&self) -> f64 {
        match self {
            TimeCost::Power { .. } => 0.0,
            TimeCost::Matrix { values, .. } => {
                values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

/// `c^i(x, y) = Σ_t c_t^i(x_t, y_t)` for every process `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableCost {
    /// `terms[i][t]`.
    pub terms: Vec<Vec<TimeCost>>,
}

impl SeparableCost {
    /// `c_t^i = λ^i ||x - y||_p^p` at every time.
    pub fn power(weights: &[f64], p: f64, horizon: usize) -> Self {
        SeparableCost {
            terms: weights
                .iter()
                .map(|&lambda| vec![TimeCost::Power { lambda, p }; horizon])
                .collect(),
        }
    }

    pub fn processes(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, i: usize, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
        let terms = &self.terms[i];
        if terms.len() != x.len() || x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "cost has {} periods, paths have {} and {}",
                terms.len(),
                x.len(),
                y.len()
            )));
        }
        let mut total = 0.0;
        for ((c, a), b) in terms.iter().zip(x).zip(y) {
            total += c.eval(a, b)?;
        }
        Ok(total)
    }

    /// The pair cost `c^i` on `(X^i, Y)` leaf pairs.
    pub fn pair(&self, i: usize) -> PairCost<'_> {
        PairCost { cost: self, process: i }
    }

    fn check(&self, n: usize, horizon: usize) -> Result<()> {
        if self.terms.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "cost covers {} processes, {n} given",
                self.terms.len()
            )));
        }
        if let Some(i) = self.terms.iter().position(|t| t.len() != horizon) {
            return Err(Error::DimensionMismatch(format!(
                "cost of process {i} has {} periods, horizon is {horizon}",
                self.terms[i].len()
            )));
        }
        Ok(())
    }
}

/// `c^i` evaluated on `(X^i, Y)`; evaluation failures surface as NaN, which
/// the solvers reject.
pub struct PairCost<'a> {
    cost: &'a SeparableCost,
    process: usize,
}

impl PathCost for PairCost<'_> {
    fn cost(&self, _: &[usize], paths: &[&[Vec<f64>]]) -> f64 {
        self.cost
            .eval(self.process, paths[0], paths[1])
            .unwrap_or(f64::NAN)
    }
}

/// Per-time minimizer `φ_t^0(x_t^1, ..., x_t^N)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Phi0Selector {
    /// `y_t = Σ_i λ^i x_t^i`.
    Quadratic { weights: Vec<f64> },
    /// Argmin over `grids[t]`, lowest index on ties.
    Grid { grids: Vec<Vec<Vec<f64>>>, eps: f64 },
}

pub fn phi0_quadratic(weights: &[f64]) -> Result<Phi0Selector> {
    if weights.is_empty() || weights.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("weights must be positive"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(Phi0Selector::Quadratic {
        weights: weights.to_vec(),
    })
}

impl Phi0Selector {
    pub fn select(&self, cost: &SeparableCost, t: usize, xs: &[&[f64]]) -> Result<Vec<f64>> {
        match self {
            Phi0Selector::Quadratic { weights } => {
                if weights.len() != xs.len() {
                    return Err(Error::DimensionMismatch("one weight per process".into()));
                }
                let d = xs[0].len();
                if xs.iter().any(|x| x.len() != d) {
                    return Err(Error::DimensionMismatch(
                        "closed-form selector needs equal state dimensions".into(),
                    ));
                }
                Ok((0..d)
                    .map(|k| weights.iter().zip(xs).map(|(l, x)| l * x[k]).sum())
                    .collect())
            }
            Phi0Selector::Grid { grids, .. } => {
                let grid = grids
                    .get(t)
                    .ok_or_else(|| Error::DimensionMismatch(format!("no grid for time {}", t + 1)))?;
                let mut best: Option<(f64, &Vec<f64>)> = None;
                for y in grid {
                    let mut v = 0.0;
                    for (i, x) in xs.iter().enumerate() {
                        v += cost.terms[i][t].eval(x, y)?;
                    }
                    if best.map_or(true, |(b, _)| v < b) {
                        best = Some((v, y));
                    }
                }
                best.map(|(_, y)| y.clone())
                    .ok_or_else(|| Error::invalid(format!("empty grid at time {}", t + 1)))
            }
        }
    }

    pub fn eps(&self) -> f64 {
        match self {
            Phi0Selector::Quadratic { .. } => 0.0,
            Phi0Selector::Grid { eps, .. } => *eps,
        }
    }
}

/// `c(x^1, ..., x^N) = Σ_t Σ_i c_t^i(x_t^i, φ_t^0(x_t^{1:N}))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateCost {
    pub cost: SeparableCost,
    pub selector: Phi0Selector,
}

pub fn aggregate_cost(cost: &SeparableCost, selector: &Phi0Selector) -> Result<AggregateCost> {
    let horizon = cost.terms.first().map_or(0, Vec::len);
    if cost.terms.iter().any(|t| t.len() != horizon) {
        return Err(Error::DimensionMismatch("cost periods differ across processes".into()));
    }
    match selector {
        Phi0Selector::Grid { grids, .. } if grids.len() != horizon => {
            return Err(Error::DimensionMismatch(format!(
                "selector covers {} periods, cost has {horizon}",
                grids.len()
            )))
        }
        Phi0Selector::Quadratic { weights } if weights.len() != cost.processes() => {
            return Err(Error::DimensionMismatch("one selector weight per process".into()))
        }
        _ => {}
    }
    Ok(AggregateCost {
        cost: cost.clone(),
        selector: selector.clone(),
    })
}

impl AggregateCost {
    /// Barycenter state at time `t` for the given states.
    pub fn select(&self, t: usize, xs: &[&[f64]]) -> Result<Vec<f64>> {
        self.selector.select(&self.cost, t, xs)
    }

    pub fn try_cost(&self, paths: &[&[Vec<f64>]]) -> Result<f64> {
        if paths.len() != self.cost.processes() {
            return Err(Error::DimensionMismatch("one path per process".into()));
        }
        let horizon = self.cost.terms[0].len();
        let mut total = 0.0;
        for t in 0..horizon {
            let xs: Vec<&[f64]> = paths.iter().map(|p| p[t].as_slice()).collect();
            let y = self.select(t, &xs)?;
            for (i, x) in xs.iter().enumerate() {
                total += self.cost.terms[i][t].eval(x, &y)?;
            }
        }
        Ok(total)
    }
}

impl PathCost for AggregateCost {
    fn cost(&self, _: &[usize], paths: &[&[Vec<f64>]]) -> f64 {
        self.try_cost(paths).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcBarycenter {
    pub value: f64,
    /// Barycenter on the product node structure; ids join member ids by `|`.
    pub process: ScenarioTree,
    pub coupling: MulticausalCoupling,
    pub values: ValueFunction,
    pub policy: KernelPolicy,
    /// Largest weak-duality gap over the inner problems of the induction.
    pub max_inner_gap: f64,
}

/// Bicausal barycenter via the multicausal problem with the aggregated cost.
pub fn bc_barycenter(
    trees: &[ScenarioTree],
    cost: &SeparableCost,
    selector: &Phi0Selector,
) -> Result<BcBarycenter> {
    let horizon = check_horizons(trees)?;
    cost.check(trees.len(), horizon)?;
    let agg = aggregate_cost(cost, selector)?;
    crate::multicausal::check_tuple_budget(trees, DEFAULT_TUPLE_BUDGET)?;

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
            agg.try_cost(&paths)
        })
        .collect::<Result<Vec<f64>>>()?;
    let tensor = TensorCost(CostTensor::new(dims, data)?);
    let dpp = mc_dpp(trees, &tensor)?;
    let coupling = assemble_coupling(&dpp.policy)?;
    let process = barycenter_process(trees, &coupling, &agg)?;
    Ok(BcBarycenter {
        value: dpp.value,
        process,
        coupling,
        values: dpp.values,
        policy: dpp.policy,
        max_inner_gap: dpp.max_inner_gap,
    })
}

/// The process `φ^0(X^1, ..., X^N)` under a coupling, with the filtration of
/// the node tuples carrying positive mass.
pub fn barycenter_process(
    trees: &[ScenarioTree],
    coupling: &TransportPlan,
    agg: &AggregateCost,
) -> Result<ScenarioTree> {
    let horizon = check_horizons(trees)?;
    let tables: Vec<LeafTable> = trees.iter().map(LeafTable::new).collect();
    let mut masses: Vec<BTreeMap<Vec<usize>, f64>> = vec![BTreeMap::new(); horizon];
    for (leaves, w) in &coupling.entries {
        for (l, level) in masses.iter_mut().enumerate() {
            let key: Vec<usize> = leaves.iter().zip(&tables).map(|(&k, t)| t.anc[k][l]).collect();
            *level.entry(key).or_insert(0.0) += w;
        }
    }
    let id_of = |l: usize, nodes: &[usize]| -> String {
        nodes
            .iter()
            .zip(trees)
            .map(|(&k, t)| t.node(l, k).id.as_str())
            .collect::<Vec<_>>()
            .join("|")
    };
    let mut levels = Vec::with_capacity(horizon);
    for l in 0..horizon {
        let mut specs = Vec::with_capacity(masses[l].len());
        for (nodes, &mass) in &masses[l] {
            let xs: Vec<&[f64]> = nodes
                .iter()
                .zip(trees)
                .map(|(&k, t)| t.node(l, k).value.as_slice())
                .collect();
            let value = agg.select(l, &xs)?;
            let (parent, prob) = if l == 0 {
                (None, mass)
            } else {
                let pnodes: Vec<usize> = nodes
                    .iter()
                    .zip(trees)
                    .map(|(&k, t)| t.node(l, k).parent.expect("non-root"))
                    .collect();
                (Some(id_of(l - 1, &pnodes)), mass / masses[l - 1][&pnodes])
            };
            specs.push(NodeSpec {
                id: id_of(l, nodes),
                parent,
                prob: crate::tree::ProbSpec::Float(prob),
                value,
            });
        }
        levels.push(renormalize(specs));
    }
    ScenarioTree::from_specs(levels)
}

/// Rescales sibling probabilities to sum to one, absorbing rounding drift.
fn renormalize(mut specs: Vec<NodeSpec>) -> Vec<NodeSpec> {
    let mut sums: BTreeMap<Option<String>, f64> = BTreeMap::new();
    for s in &specs {
        if let crate::tree::ProbSpec::Float(p) = s.prob {
            *sums.entry(s.parent.clone()).or_insert(0.0) += p;
        }
    }
    for s in &mut specs {
        if let crate::tree::ProbSpec::Float(p) = s.prob {
            s.prob = crate::tree::ProbSpec::Float(p / sums[&s.parent]);
        }
    }
    specs
}

/// `Σ_i AW_{c^i}(X^i, Y)` by independent two-marginal backward inductions.
pub fn bc_bary_value(
    trees: &[ScenarioTree],
    cost: &SeparableCost,
    candidate: &ScenarioTree,
) -> Result<f64> {
    let horizon = check_horizons(trees)?;
    if candidate.horizon() != horizon {
        return Err(Error::DimensionMismatch(format!(
            "candidate has horizon {}, processes have {horizon}",
            candidate.horizon()
        )));
    }
    cost.check(trees.len(), horizon)?;
    let values = trees
        .par_iter()
        .enumerate()
        .map(|(i, x)| mc_dpp(&[x.clone(), candidate.clone()], &cost.pair(i)).map(|s| s.value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalOtSolution {
    pub value: f64,
    /// Axes: leaves of `X`, leaves of `Y`.
    pub plan: TransportPlan,
    pub certificate: DualCertificate,
    pub residuals: Residuals,
}

/// Causal transport from `X` to `Y`: the future of `X` is independent of the
/// past of `Y` given the past of `X`.
pub fn causal_ot(x: &ScenarioTree, y: &ScenarioTree, cost: &dyn PathCost) -> Result<CausalOtSolution> {
    let trees = [x.clone(), y.clone()];
    check_horizons(&trees)?;
    crate::multicausal::check_tuple_budget(&trees, DEFAULT_TUPLE_BUDGET)?;
    let sol = tuple_lp(&trees, cost, &[0])?;
    Ok(CausalOtSolution {
        value: sol.value,
        plan: sol.coupling.plan,
        certificate: sol.certificate,
        residuals: sol.residuals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CausalBarycenterSolution {
    pub value: f64,
    /// Law over task leaves.
    pub nu: Vec<f64>,
    /// `plans[i]` has axes (leaves of `X^i`, task leaves).
    pub plans: Vec<TransportPlan>,
    /// `f^i` on leaves of `X^i`; all but the first pinned to zero at leaf 0.
    pub potentials: Vec<Vec<f64>>,
    /// `g^i` on task leaves with `g^0 = -Σ_{i≥1} g^i`.
    pub task_potentials: Vec<Vec<f64>>,
    /// Martingale coefficients of `G^i`, laid out as in [`DualCertificate`]
    /// for the pair `(X^i, Y)`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub dual_value: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CausalDualCheck {
    pub dual_value: f64,
    /// `min (c^i - g^i + G^i - f^i)` over all pairs and processes.
    pub min_slack: f64,
    /// Largest `|c^i - g^i + G^i - f^i|` on the support of the plans.
    pub support_gap: f64,
    /// `Σ_i g^i(y) = 0` with `g^0` computed as `-Σ_{i≥1} g^i`.
    pub clearing_exact: bool,
}

impl CausalBarycenterSolution {
    /// `G^i` at leaf pair `(k, y)`.
    pub fn martingale(&self, i: usize, x: &ScenarioTree, task: &ScenarioTree, k: usize, y: usize) -> f64 {
        let cert = DualCertificate {
            potentials: Vec::new(),
            coefficients: vec![self.coefficients[i].clone(), Vec::new()],
        };
        cert.martingale(&[x.clone(), task.clone()], &[k, y])
    }

    pub fn check(
        &self,
        trees: &[ScenarioTree],
        task: &ScenarioTree,
        costs: &[&dyn PathCost],
    ) -> CausalDualCheck {
        let mut min_slack = f64::INFINITY;
        let mut support_gap = 0.0f64;
        let mut dual_value = 0.0;
        for (i, x) in trees.iter().enumerate() {
            dual_value += self.potentials[i]
                .iter()
                .zip(x.leaf_law())
                .map(|(f, p)| f * p)
                .sum::<f64>();
            let pair = [x.clone(), task.clone()];
            let (dims, c) = cost_table(&pair, costs[i]);
            let cert = DualCertificate {
                potentials: Vec::new(),
                coefficients: vec![self.coefficients[i].clone(), Vec::new()],
            };
            for (flat, cv) in c.iter().enumerate() {
                let idx = unflatten(flat, &dims);
                let s = cv - self.task_potentials[i][idx[1]] + cert.martingale(&pair, &idx)
                    - self.potentials[i][idx[0]];
                min_slack = min_slack.min(s);
                if self.plans[i].weight(&idx) > 0.0 {
                    support_gap = support_gap.max(s.abs());
                }
            }
        }
        let clearing_exact = (0..self.nu.len()).all(|y| {
            let rest: f64 = self.task_potentials[1..].iter().map(|g| g[y]).sum();
            self.task_potentials[0][y] + rest == 0.0
        });
        CausalDualCheck {
            dual_value,
            min_slack,
            support_gap,
            clearing_exact,
        }
    }
}

/// Best law on the task leaves for `Σ_i CW_{c^i}(X^i, Y^ν)`, as one LP over
/// `ν` and the causal plans `π^i`.
pub fn causal_barycenter(
    trees: &[ScenarioTree],
    task: &ScenarioTree,
    costs: &[&dyn PathCost],
) -> Result<CausalBarycenterSolution> {
    let horizon = check_horizons(trees)?;
    if task.horizon() != horizon {
        return Err(Error::DimensionMismatch(format!(
            "task tree has horizon {}, processes have {horizon}",
            task.horizon()
        )));
    }
    if costs.len() != trees.len() {
        return Err(Error::DimensionMismatch("one cost per process".into()));
    }
    let ny = task.leaf_count();
    let vars: u128 = trees.iter().map(|t| (t.leaf_count() * ny) as u128).sum();
    if vars > DEFAULT_TUPLE_BUDGET {
        return Err(Error::Budget {
            what: "plan entries",
            requested: vars,
            limit: DEFAULT_TUPLE_BUDGET,
        });
    }

    let mut lp = LpProblem::new();
    let nu_vars: Vec<usize> = (0..ny).map(|_| lp.add_var(0.0)).collect();
    let mut offsets = Vec::with_capacity(trees.len());
    let mut marg_rows = Vec::with_capacity(trees.len());
    let mut link_rows = Vec::with_capacity(trees.len());
    let mut causal = Vec::with_capacity(trees.len());
    for (i, x) in trees.iter().enumerate() {
        let pair = [x.clone(), task.clone()];
        let (_, c) = cost_table(&pair, costs[i]);
        if let Some(v) = c.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("cost of process {i} evaluates to {v}")));
        }
        let offset = lp.num_vars();
        for &v in &c {
            lp.add_var(v);
        }
        offsets.push(offset);
        let law = x.leaf_law();
        marg_rows.push(
            (0..x.leaf_count())
                .map(|k| lp.add_row((0..ny).map(|y| (offset + k * ny + y, 1.0)).collect(), law[k]))
                .collect::<Vec<_>>(),
        );
        link_rows.push(
            (0..ny)
                .map(|y| {
                    let mut terms: Vec<(usize, f64)> =
                        (0..x.leaf_count()).map(|k| (offset + k * ny + y, 1.0)).collect();
                    terms.push((nu_vars[y], -1.0));
                    lp.add_row(terms, 0.0)
                })
                .collect::<Vec<_>>(),
        );
        let rows = causal_rows(&pair, &[0]);
        let ids: Vec<usize> = rows
            .iter()
            .map(|r| {
                let terms = r.terms.iter().map(|&(f, v)| (offset + f, v)).collect();
                lp.add_row(terms, 0.0)
            })
            .collect();
        causal.push((rows, ids));
    }
    let sol = solve_lp(&lp)?;

    let n = trees.len();
    let mut f: Vec<Vec<f64>> = marg_rows
        .iter()
        .map(|ids| ids.iter().map(|&r| sol.duals[r]).collect())
        .collect();
    let mut h: Vec<Vec<f64>> = link_rows
        .iter()
        .map(|ids| ids.iter().map(|&r| sol.duals[r]).collect())
        .collect();
    // Gauge: move constants from f^i into g^i for i ≥ 1, absorbed by i = 0.
    let mut absorbed = 0.0;
    for i in 1..n {
        let k = f[i][0];
        f[i].iter_mut().for_each(|v| *v -= k);
        h[i].iter_mut().for_each(|v| *v += k);
        absorbed += k;
    }
    f[0].iter_mut().for_each(|v| *v += absorbed);
    let mut g = h;
    g[0] = (0..ny)
        .map(|y| 0.0 - g[1..].iter().map(|gi| gi[y]).sum::<f64>())
        .collect();

    let mut coefficients = Vec::with_capacity(n);
    for (i, (rows, ids)) in causal.iter().enumerate() {
        let pair = [trees[i].clone(), task.clone()];
        let mut cert_levels: Vec<Vec<f64>> = (1..horizon)
            .map(|l| vec![0.0; task.level_len(l - 1) * trees[i].level_len(l)])
            .collect();
        for (row, &r) in rows.iter().zip(ids) {
            let width = pair[0].level_len(row.level);
            cert_levels[row.level - 1][row.others * width + row.own] = -sol.duals[r];
        }
        coefficients.push(cert_levels);
    }
    let plans = trees
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let entries = (0..x.leaf_count() * ny)
                .map(|flat| (vec![flat / ny, flat % ny], sol.x[offsets[i] + flat]))
                .collect();
            TransportPlan::new(vec![x.leaf_count(), ny], entries)
        })
        .collect();
    let dual_value = f
        .iter()
        .zip(trees)
        .map(|(fi, x)| fi.iter().zip(x.leaf_law()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(CausalBarycenterSolution {
        value: sol.objective,
        nu: nu_vars.iter().map(|&v| sol.x[v]).collect(),
        plans,
        potentials: f,
        task_potentials: g,
        coefficients,
        dual_value,
        residuals: sol.residuals,
        iterations: sol.iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnticausalSolution {
    pub value: f64,
    pub nu: Vec<f64>,
    /// `plans[i]` has axes (task leaves, leaves of `X^i`).
    pub plans: Vec<TransportPlan>,
    /// `kernels[i][y][k] = π^i(y, k) / ν(y)`; zero rows where `ν(y) = 0`.
    pub kernels: Vec<Vec<Vec<f64>>>,
    pub residuals: Residuals,
}

impl AnticausalSolution {
    /// `ν(dy) Π_i K^i(y; dx^i)` on (task leaf, leaves of each `X^i`).
    pub fn glued(&self) -> TransportPlan {
        let mut dims = vec![self.nu.len()];
        dims.extend(self.plans.iter().map(|p| p.dims[1]));
        let mut entries = Vec::new();
        for (y, &m) in self.nu.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            let mut partial: Vec<(Vec<usize>, f64)> = vec![(vec![y], m)];
            for k in &self.kernels {
                partial = partial
                    .into_iter()
                    .flat_map(|(idx, w)| {
                        k[y].iter().enumerate().filter(|(_, &p)| p > 0.0).map(move |(j, &p)| {
                            let mut next = idx.clone();
                            next.push(j);
                            (next, w * p)
                        })
                    })
                    .collect();
            }
            entries.extend(partial);
        }
        TransportPlan::new(dims, entries)
    }
}

/// The barycenter with causality imposed in the reverse direction, which is
/// a classical barycenter of the path laws on the task support.
pub fn anticausal_barycenter(
    trees: &[ScenarioTree],
    task: &ScenarioTree,
    costs: &[&dyn PathCost],
) -> Result<AnticausalSolution> {
    let horizon = check_horizons(trees)?;
    if task.horizon() != horizon {
        return Err(Error::DimensionMismatch("task tree horizon differs".into()));
    }
    if costs.len() != trees.len() {
        return Err(Error::DimensionMismatch("one cost per process".into()));
    }
    let ny = task.leaf_count();
    let vars: u128 = trees.iter().map(|t| (t.leaf_count() * ny) as u128).sum();
    if vars > DEFAULT_TUPLE_BUDGET {
        return Err(Error::Budget {
            what: "plan entries",
            requested: vars,
            limit: DEFAULT_TUPLE_BUDGET,
        });
    }
    let mut matrices = Vec::with_capacity(trees.len());
    let mut measures = Vec::with_capacity(trees.len());
    for (i, x) in trees.iter().enumerate() {
        let (_, c) = cost_table(&[x.clone(), task.clone()], costs[i]);
        if let Some(v) = c.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("cost of process {i} evaluates to {v}")));
        }
        let nx = x.leaf_count();
        matrices.push((0..ny).map(|y| (0..nx).map(|k| c[k * ny + y]).collect()).collect());
        measures.push(crate::tree::DiscreteDistribution::from_weights(x.leaf_law().to_vec())?);
    }
    let b = barycenter_lp(&measures, &matrices, ny)?;
    let kernels = b
        .plans
        .iter()
        .map(|p| {
            (0..ny)
                .map(|y| {
                    (0..p.dims[1])
                        .map(|k| if b.nu[y] > 0.0 { p.weight(&[y, k]) / b.nu[y] } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(AnticausalSolution {
        value: b.value,
        nu: b.nu,
        plans: b.plans,
        kernels,
        residuals: b.residuals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub n_quant: usize,
    pub moment2: f64,
    pub moment6: f64,
    /// Cost of `φ^0(x^1, x^2) = x^1 + x^2` under the product coupling.
    pub cost_phi0_construction: f64,
    /// Same coupling with the stationary selector `(x^1 + x^2) / 2`.
    pub cost_phi0_stationary: f64,
    /// `Σ_i ½ CW_2^2(X^i, (0, Y^3))`.
    pub cost_canonical_candidate: f64,
    pub causal_costs: Vec<f64>,
}

/// `X^1 = (Y, Y^3)` and `X^2 = (0, Y^3)` with `Y` quantized on `n` points.
pub fn counterexample_trees(n: usize) -> Result<(ScenarioTree, ScenarioTree)> {
    let q = quantize_gauss_hermite(n);
    let x1 = ScenarioTree::from_specs(vec![
        q.nodes
            .iter()
            .zip(&q.weights)
            .enumerate()
            .map(|(k, (&z, &w))| NodeSpec::new(format!("y{k}"), None, w, vec![z]))
            .collect(),
        q.nodes
            .iter()
            .enumerate()
            .map(|(k, &z)| {
                NodeSpec::new(format!("y{k}c"), Some(&format!("y{k}")), 1.0, vec![z * z * z])
            })
            .collect(),
    ])?;
    let x2 = ScenarioTree::from_specs(vec![
        vec![NodeSpec::new("o", None, 1.0, vec![0.0])],
        q.nodes
            .iter()
            .zip(&q.weights)
            .enumerate()
            .map(|(k, (&z, &w))| NodeSpec::new(format!("c{k}"), Some("o"), w, vec![z * z * z]))
            .collect(),
    ])?;
    Ok((x1, x2))
}

pub fn counterexample_demo(n_quant: usize) -> Result<CounterexampleReport> {
    if n_quant < 4 {
        return Err(Error::invalid(format!(
            "n_quant = {n_quant}; at least 4 nodes are needed for exact sixth moments"
        )));
    }
    let q = quantize_gauss_hermite(n_quant);
    let (x1, x2) = counterexample_trees(n_quant)?;
    let trees = [x1.clone(), x2.clone()];
    let half = SeparableCost::power(&[0.5, 0.5], 2.0, 2);
    let product = MulticausalCoupling::product(&trees);
    let tables: Vec<LeafTable> = trees.iter().map(LeafTable::new).collect();
    let under_product = |phi: &dyn Fn(&[f64], &[f64]) -> Vec<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (leaves, w) in &product.entries {
            let a = &tables[0].values[leaves[0]];
            let b = &tables[1].values[leaves[1]];
            let y: Vec<Vec<f64>> = a.iter().zip(b).map(|(u, v)| phi(u, v)).collect();
            total += w * (half.eval(0, a, &y)? + half.eval(1, b, &y)?);
        }
        Ok(total)
    };
    let sum = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a + b).collect();
    let mean = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| 0.5 * (a + b)).collect();
    let cost_phi0_construction = under_product(&sum)?;
    let cost_phi0_stationary = under_product(&mean)?;

    let candidate = x2.clone();
    let causal_costs = trees
        .iter()
        .enumerate()
        .map(|(i, x)| causal_ot(x, &candidate, &half.pair(i)).map(|s| s.value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CounterexampleReport {
        n_quant,
        moment2: q.expect(|z| z * z),
        moment6: q.expect(|z| z.powi(6)),
        cost_phi0_construction,
        cost_phi0_stationary,
        cost_canonical_candidate: causal_costs.iter().sum(),
        causal_costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multicausal::verify_causal;

    fn binary(p: f64, q: [f64; 2], x: [f64; 6]) -> ScenarioTree {
        ScenarioTree::from_specs(vec![
            vec![
                NodeSpec::new("u", None, p, vec![x[0]]),
                NodeSpec::new("d", None, 1.0 - p, vec![x[1]]),
            ],
            vec![
                NodeSpec::new("uu", Some("u"), q[0], vec![x[2]]),
                NodeSpec::new("ud", Some("u"), 1.0 - q[0], vec![x[3]]),
                NodeSpec::new("du", Some("d"), q[1], vec![x[4]]),
                NodeSpec::new("dd", Some("d"), 1.0 - q[1], vec![x[5]]),
            ],
        ])
        .unwrap()
    }

    #[test]
    fn aggregate_cost_single_process_vanishes() {
        let cost = SeparableCost::power(&[1.0], 2.0, 2);
        let agg = aggregate_cost(&cost, &phi0_quadratic(&[1.0]).unwrap()).unwrap();
        let p = vec![vec![1.5], vec![-2.0]];
        assert_eq!(agg.try_cost(&[&p]).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_cost_two_processes_quarter_gap() {
        let cost = SeparableCost::power(&[0.5, 0.5], 2.0, 2);
        let agg = aggregate_cost(&cost, &phi0_quadratic(&[0.5, 0.5]).unwrap()).unwrap();
        let a = vec![vec![0.0], vec![1.0]];
        let b = vec![vec![2.0], vec![-1.0]];
        // ¼ (4 + 4)
        assert!((agg.try_cost(&[&a, &b]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grid_selector_agrees_with_closed_form_on_grid_points() {
        let cost = SeparableCost::power(&[0.5, 0.5], 2.0, 1);
        let grid = Phi0Selector::Grid {
            grids: vec![vec![vec![0.0], vec![1.0], vec![2.0]]],
            eps: 0.0,
        };
        let closed = phi0_quadratic(&[0.5, 0.5]).unwrap();
        for (a, b) in [(0.0, 2.0), (1.0, 1.0), (2.0, 0.0)] {
            let xs: [&[f64]; 2] = [&[a], &[b]];
            assert_eq!(
                grid.select(&cost, 0, &xs).unwrap(),
                closed.select(&cost, 0, &xs).unwrap()
            );
        }
    }

    #[test]
    fn quadratic_selector_matches_fine_grid() {
        let w = [0.2, 0.3, 0.5];
        let cost = SeparableCost::power(&w, 2.0, 1);
        let grid: Vec<Vec<f64>> = (0..=4000).map(|k| vec![-2.0 + k as f64 * 1e-3]).collect();
        let fine = Phi0Selector::Grid { grids: vec![grid], eps: 0.0 };
        let closed = phi0_quadratic(&w).unwrap();
        let xs: [&[f64]; 3] = [&[0.7], &[-1.3], &[1.1]];
        let a = fine.select(&cost, 0, &xs).unwrap()[0];
        let b = closed.select(&cost, 0, &xs).unwrap()[0];
        assert!((a - b).abs() <= 5e-4 + 1e-12);
    }

    #[test]
    fn invalid_weights() {
        assert!(phi0_quadratic(&[0.5, 0.6]).is_err());
        assert!(phi0_quadratic(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn dirac_barycenter_is_the_midpoint_path() {
        let a = ScenarioTree::deterministic(&[vec![0.0], vec![4.0]]).unwrap();
        let b = ScenarioTree::deterministic(&[vec![2.0], vec![0.0]]).unwrap();
        let cost = SeparableCost::power(&[0.5, 0.5], 2.0, 2);
        let sel = phi0_quadratic(&[0.5, 0.5]).unwrap();
        let r = bc_barycenter(&[a.clone(), b.clone()], &cost, &sel).unwrap();
        assert!((r.value - 0.25 * (4.0 + 16.0)).abs() < 1e-12);
        assert_eq!(r.process.leaf_values(0), vec![vec![1.0], vec![2.0]]);
        let v = bc_bary_value(&[a, b], &cost, &r.process).unwrap();
        assert!((v - r.value).abs() < 1e-12);
    }

    #[test]
    fn identical_trees_barycenter() {
        let t = binary(0.3, [0.6, 0.2], [1.0, -1.0, 2.0, 0.0, -0.5, -2.0]);
        let cost = SeparableCost::power(&[0.5, 0.5], 2.0, 2);
        let r = bc_barycenter(&[t.clone(), t.clone()], &cost, &phi0_quadratic(&[0.5, 0.5]).unwrap())
            .unwrap();
        assert!(r.value.abs() < 1e-12);
        assert_eq!(r.process.leaf_count(), 4);
    }

    #[test]
    fn barycenter_value_matches_its_process() {
        let a = binary(0.3, [0.6, 0.2], [1.0, -1.0, 2.0, 0.0, -0.5, -2.0]);
        let b = binary(0.55, [0.1, 0.7], [0.2, 0.4, -1.0, 1.5, 0.3, 0.0]);
        let cost = SeparableCost::power(&[0.4, 0.6], 2.0, 2);
        let sel = phi0_quadratic(&[0.4, 0.6]).unwrap();
        let trees = [a, b];
        let r = bc_barycenter(&trees, &cost, &sel).unwrap();
        let v = bc_bary_value(&trees, &cost, &r.process).unwrap();
        assert!((v - r.value).abs() < 1e-9, "{v} vs {}", r.value);
        let dirac = ScenarioTree::deterministic(&[vec![0.1], vec![0.2]]).unwrap();
        let forced: f64 = trees
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (0..t.leaf_count())
                    .map(|k| {
                        t.leaf_law()[k]
                            * cost.eval(i, &t.leaf_values(k), &dirac.leaf_values(0)).unwrap()
                    })
                    .sum::<f64>()
            })
            .sum();
        let vd = bc_bary_value(&trees, &cost, &dirac).unwrap();
        assert!((vd - forced).abs() < 1e-12);
        assert!(vd >= r.value - 1e-9);
    }

    #[test]
    fn causal_single_period_is_classical() {
        let a = ScenarioTree::single_period(&[vec![0.0], vec![1.0]], &[0.4, 0.6]).unwrap();
        let b = ScenarioTree::single_period(&[vec![0.5], vec![3.0]], &[0.7, 0.3]).unwrap();
        let cost = SeparableCost::power(&[1.0], 2.0, 1);
        let s = causal_ot(&a, &b, &cost.pair(0)).unwrap();
        let m: Vec<Vec<f64>> = [0.0, 1.0]
            .iter()
            .map(|x| [0.5, 3.0].iter().map(|y| (x - y) * (x - y)).collect())
            .collect();
        let (v, _) = crate::ot::classical_ot(&a.first_step(), &b.first_step(), &m).unwrap();
        assert!((s.value - v).abs() < 1e-12);
    }

    #[test]
    fn causal_barycenter_of_identical_trees() {
        let t = binary(0.3, [0.6, 0.2], [1.0, -1.0, 2.0, 0.0, -0.5, -2.0]);
        let cost = SeparableCost::power(&[1.0, 1.0], 1.0, 2);
        let trees = [t.clone(), t.clone()];
        let costs: [&dyn PathCost; 2] = [&cost.pair(0), &cost.pair(1)];
        let s = causal_barycenter(&trees, &t, &costs).unwrap();
        assert!(s.value.abs() < 1e-12);
        for (a, b) in s.nu.iter().zip(t.leaf_law()) {
            assert!((a - b).abs() < 1e-12);
        }
        let chk = s.check(&trees, &t, &costs);
        assert!(chk.clearing_exact);
        assert!(chk.min_slack >= -1e-9);
        assert!((chk.dual_value - s.value).abs() < 1e-9);
    }

    #[test]
    fn causal_barycenter_plans_are_causal_with_common_marginal() {
        let a = binary(0.3, [0.6, 0.2], [1.0, -1.0, 2.0, 0.0, -0.5, -2.0]);
        let b = binary(0.55, [0.1, 0.7], [0.2, 0.4, -1.0, 1.5, 0.3, 0.0]);
        let task = binary(0.5, [0.5, 0.5], [0.5, -0.5, 1.0, 0.0, 0.0, -1.0]);
        let cost = SeparableCost::power(&[0.5, 0.5], 2.0, 2);
        let trees = [a, b];
        let costs: [&dyn PathCost; 2] = [&cost.pair(0), &cost.pair(1)];
        let s = causal_barycenter(&trees, &task, &costs).unwrap();
        for (i, p) in s.plans.iter().enumerate() {
            assert!(crate::ot::tv_distance(&p.marginal(1), &s.nu) < 1e-9);
            let r = verify_causal(p, &trees[i], &task).unwrap();
            assert!(r.pass, "{r:?}");
        }
        let chk = s.check(&trees, &task, &costs);
        assert!((chk.dual_value - s.value).abs() < 1e-8);
        assert!(chk.min_slack >= -1e-8);
        assert!(chk.support_gap <= 1e-8);
        let anti = anticausal_barycenter(&trees, &task, &costs).unwrap();
        assert!(anti.value <= s.value + 1e-9);
    }

    #[test]
    fn anticausal_two_diracs_midpoint() {
        let a = ScenarioTree::deterministic(&[vec![0.0], vec![0.0]]).unwrap();
        let b = ScenarioTree::deterministic(&[vec![1.0], vec![1.0]]).unwrap();
        let task = ScenarioTree::from_specs(vec![
            vec![
                NodeSpec::new("0", None, 1.0 / 3.0, vec![0.0]),
                NodeSpec::new("h", None, 1.0 / 3.0, vec![0.5]),
                NodeSpec::new("1", None, 1.0 / 3.0, vec![1.0]),
            ],
            vec![
                NodeSpec::new("00", Some("0"), 1.0, vec![0.0]),
                NodeSpec::new("hh", Some("h"), 1.0, vec![0.5]),
                NodeSpec::new("11", Some("1"), 1.0, vec![1.0]),
            ],
        ])
        .unwrap();
        let cost = SeparableCost::power(&[0.5, 0.5], 2.0, 2);
        let costs: [&dyn PathCost; 2] = [&cost.pair(0), &cost.pair(1)];
        let s = anticausal_barycenter(&[a, b], &task, &costs).unwrap();
        assert!((s.nu[1] - 1.0).abs() < 1e-12);
        assert!((s.value - 0.5).abs() < 1e-12);
        let g = s.glued();
        assert!((g.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn counterexample_values() {
        let r = counterexample_demo(4).unwrap();
        assert!((r.moment2 - 1.0).abs() < 1e-12);
        assert!((r.moment6 - 15.0).abs() < 1e-9);
        assert!((r.cost_phi0_construction - 15.5).abs() < 1e-9);
        assert!((r.cost_phi0_stationary - 7.75).abs() < 1e-9);
        // ½ E Y² from the first process, nothing from the second
        assert!((r.cost_canonical_candidate - 0.5).abs() < 1e-9);
        assert!(counterexample_demo(3).is_err());
    }
}
