//! Dynamic matching equilibria from causal barycenters and their duals.
//!
//! Population `0` is the principal, whose cost is minus its utility; the
//! remaining populations are agent groups. Wages are functions of full task
//! paths.

use serde::Serialize;

use crate::barycenter::{causal_barycenter, TimeCost};
use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpProblem};
use crate::multicausal::{causal_rows, check_horizons, verify_causal, PathCost, MARGINAL_TOL};
use crate::ot::{tv_distance, TransportPlan};
use crate::tree::ScenarioTree;

/// Tolerance on best-response optimality gaps.
pub const OPTIMALITY_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingInstance {
    /// `trees[0]` is the principal.
    pub trees: Vec<ScenarioTree>,
    pub tasks: ScenarioTree,
    /// `costs[i][k][y]`: cost of type leaf `k` of population `i` on task
    /// leaf `y`; `costs[0] = -u`.
    pub costs: Vec<Vec<Vec<f64>>>,
}

fn path_matrix(tree: &ScenarioTree, tasks: &ScenarioTree, terms: &[TimeCost], sign: f64) -> Result<Vec<Vec<f64>>> {
    if terms.len() != tree.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "cost has {} periods, horizon is {}",
            terms.len(),
            tree.horizon()
        )));
    }
    let ys = tasks.all_leaf_values();
    (0..tree.leaf_count())
        .map(|k| {
            let x = tree.leaf_values(k);
            ys.iter()
                .map(|y| {
                    let mut total = 0.0;
                    for ((c, a), b) in terms.iter().zip(&x).zip(y) {
                        total += c.eval(a, b)?;
                    }
                    Ok(sign * total)
                })
                .collect()
        })
        .collect()
}

impl MatchingInstance {
    /// Builds the instance from per-time cost terms; the principal's cost is
    /// `c^0 = -u`.
    pub fn new(
        principal: ScenarioTree,
        utility: &[TimeCost],
        agents: Vec<(ScenarioTree, Vec<TimeCost>)>,
        tasks: ScenarioTree,
    ) -> Result<Self> {
        let mut costs = vec![path_matrix(&principal, &tasks, utility, -1.0)?];
        let mut trees = vec![principal];
        for (tree, terms) in agents {
            costs.push(path_matrix(&tree, &tasks, &terms, 1.0)?);
            trees.push(tree);
        }
        Self::from_matrices(trees, tasks, costs)
    }

    pub fn from_matrices(
        trees: Vec<ScenarioTree>,
        tasks: ScenarioTree,
        costs: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let horizon = check_horizons(&trees)?;
        if tasks.horizon() != horizon {
            return Err(Error::DimensionMismatch(format!(
                "task tree has horizon {}, populations have {horizon}",
                tasks.horizon()
            )));
        }
        if costs.len() != trees.len() {
            return Err(Error::DimensionMismatch("one cost matrix per population".into()));
        }
        for (i, (c, t)) in costs.iter().zip(&trees).enumerate() {
            if c.len() != t.leaf_count() || c.iter().any(|r| r.len() != tasks.leaf_count()) {
                return Err(Error::DimensionMismatch(format!(
                    "cost matrix of population {i} must be {}x{}",
                    t.leaf_count(),
                    tasks.leaf_count()
                )));
            }
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("population {i} has a non-finite cost")));
            }
        }
        Ok(MatchingInstance { trees, tasks, costs })
    }

    pub fn populations(&self) -> usize {
        self.trees.len()
    }

    fn cost(&self, i: usize) -> impl PathCost + '_ {
        let m = &self.costs[i];
        move |l: &[usize], _: &[&[Vec<f64>]]| m[l[0]][l[1]]
    }

    /// `E_π[c^i - w]`.
    pub fn expected_net_cost(&self, i: usize, plan: &TransportPlan, wage: &[f64]) -> f64 {
        plan.expect(|l| self.costs[i][l[0]][l[1]] - wage[l[1]])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Equilibrium {
    /// `wages[i][y]` with `wages[0] = -Σ_{i≥1} wages[i]`.
    pub wages: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
    /// `plans[i]` has axes (type leaves, task leaves).
    pub plans: Vec<TransportPlan>,
    /// `V^i(w^i)` realized by the plans.
    pub values: Vec<f64>,
    pub potentials: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// Causal barycenter value and its dual value.
    pub barycenter_value: f64,
    pub dual_value: f64,
}

/// Equilibrium from the causal barycenter over all populations: tasks and
/// plans from the primal, wages `w^i = g^i` from the dual.
pub fn solve_matching(inst: &MatchingInstance) -> Result<Equilibrium> {
    let owned: Vec<_> = (0..inst.populations()).map(|i| inst.cost(i)).collect();
    let costs: Vec<&dyn PathCost> = owned.iter().map(|c| c as &dyn PathCost).collect();
    let sol = causal_barycenter(&inst.trees, &inst.tasks, &costs)?;
    let values = (0..inst.populations())
        .map(|i| inst.expected_net_cost(i, &sol.plans[i], &sol.task_potentials[i]))
        .collect();
    Ok(Equilibrium {
        wages: sol.task_potentials,
        nu: sol.nu,
        plans: sol.plans,
        values,
        potentials: sol.potentials,
        coefficients: sol.coefficients,
        barycenter_value: sol.value,
        dual_value: sol.dual_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestResponse {
    pub value: f64,
    pub plan: TransportPlan,
}

/// `V^i(w) = inf ∫ (c^i - w) dπ` over causal plans with free task law.
pub fn best_response(inst: &MatchingInstance, i: usize, wage: &[f64]) -> Result<BestResponse> {
    if i >= inst.populations() {
        return Err(Error::invalid(format!("population {i} does not exist")));
    }
    let ny = inst.tasks.leaf_count();
    if wage.len() != ny {
        return Err(Error::DimensionMismatch(format!(
            "wage has {} entries, there are {ny} task paths",
            wage.len()
        )));
    }
    if let Some(w) = wage.iter().find(|w| !w.is_finite()) {
        return Err(Error::invalid(format!("wage value {w} is not finite")));
    }
    let tree = &inst.trees[i];
    let nx = tree.leaf_count();
    let mut lp = LpProblem::new();
    for k in 0..nx {
        for y in 0..ny {
            lp.add_var(inst.costs[i][k][y] - wage[y]);
        }
    }
    let law = tree.leaf_law();
    for k in 0..nx {
        lp.add_row((0..ny).map(|y| (k * ny + y, 1.0)).collect(), law[k]);
    }
    for row in causal_rows(&[tree.clone(), inst.tasks.clone()], &[0]) {
        lp.add_row(row.terms, 0.0);
    }
    let sol = solve_lp(&lp)?;
    let entries = sol
        .x
        .iter()
        .enumerate()
        .map(|(f, &w)| (vec![f / ny, f % ny], w))
        .collect();
    Ok(BestResponse {
        value: sol.objective,
        plan: TransportPlan::new(vec![nx, ny], entries),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumReport {
    pub clearing_ok: bool,
    /// Task paths (ids joined by `/`) where the wages do not sum to zero.
    pub clearing_violations: Vec<(String, f64)>,
    /// `E_{π^i}[c^i - w^i] - V^i(w^i)` per population.
    pub optimality_gaps: Vec<f64>,
    pub optimality_ok: bool,
    pub common_marginal_error: f64,
    pub common_marginal_ok: bool,
    pub causal_ok: Vec<bool>,
    pub pass: bool,
}

pub fn verify_equilibrium(inst: &MatchingInstance, eq: &Equilibrium) -> Result<EquilibriumReport> {
    let n = inst.populations();
    let ny = inst.tasks.leaf_count();
    if eq.wages.len() != n || eq.plans.len() != n || eq.nu.len() != ny {
        return Err(Error::DimensionMismatch("equilibrium does not match the instance".into()));
    }
    let mut clearing_violations = Vec::new();
    for y in 0..ny {
        let rest: f64 = eq.wages[1..].iter().map(|w| w[y]).sum();
        let total = eq.wages[0][y] + rest;
        if total != 0.0 {
            clearing_violations.push((inst.tasks.leaf_ids(y).join("/"), total));
        }
    }
    let mut gaps = Vec::with_capacity(n);
    let mut causal_ok = Vec::with_capacity(n);
    let mut marginal_error = 0.0f64;
    for i in 0..n {
        let br = best_response(inst, i, &eq.wages[i])?;
        gaps.push(inst.expected_net_cost(i, &eq.plans[i], &eq.wages[i]) - br.value);
        marginal_error = marginal_error.max(tv_distance(&eq.plans[i].marginal(1), &eq.nu));
        let ok = verify_causal(&eq.plans[i], &inst.trees[i], &inst.tasks)
            .map(|r| r.pass)
            .unwrap_or(false);
        causal_ok.push(ok);
    }
    let clearing_ok = clearing_violations.is_empty();
    let optimality_ok = gaps.iter().all(|g| g.abs() <= OPTIMALITY_TOL);
    let common_marginal_ok = marginal_error <= MARGINAL_TOL;
    let pass = clearing_ok && optimality_ok && common_marginal_ok && causal_ok.iter().all(|&b| b);
    Ok(EquilibriumReport {
        clearing_ok,
        clearing_violations,
        optimality_gaps: gaps,
        optimality_ok,
        common_marginal_error: marginal_error,
        common_marginal_ok,
        causal_ok,
        pass,
    })
}
