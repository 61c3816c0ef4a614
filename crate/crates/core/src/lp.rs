//! Equality-form linear programs
//!
//! ```text
//! minimize c·x  subject to  A x = b,  x >= 0
//! ```
//!
//! Problems are assembled row by row and handed to the HiGHS dual simplex,
//! single-threaded so results do not depend on scheduling. Every returned
//! solution is re-checked against the original data: primal and dual
//! residuals and the duality gap are measured here, not taken from the
//! solver, and an inaccurate answer is an error rather than a result.

use highs::{ColProblem, HighsModelStatus, Sense};

use crate::error::{Error, Result};

const LOOSE_TOL: f64 = 1e-7;

/// Default cap on constraint-matrix nonzeros.
pub const DEFAULT_NONZERO_BUDGET: u128 = 50_000_000;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LpProblem {
    objective: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl LpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a nonnegative variable with the given cost; returns its index.
    pub fn add_var(&mut self, cost: f64) -> usize {
        self.objective.push(cost);
        self.objective.len() - 1
    }

    /// Adds the equality `Σ coef·x_var = rhs`; returns the row index.
    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.rows.push(terms);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        for (r, row) in self.rows.iter().enumerate() {
            if let Some(&(j, _)) = row.iter().find(|(j, _)| *j >= n) {
                return Err(Error::invalid(format!("row {r} references undeclared variable {j}")));
            }
            if row.iter().any(|(_, v)| !v.is_finite()) || !self.rhs[r].is_finite() {
                return Err(Error::invalid(format!("row {r} has non-finite data")));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite objective coefficient"));
        }
        Ok(())
    }

    /// `A x` for a candidate point.
    pub fn row_activity(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Residuals {
    /// `max_r |A_r x - b_r|`, including any negativity of `x`.
    pub primal: f64,
    /// `max_j (A_j·y - c_j)^+`.
    pub dual: f64,
    /// `|c·x - b·y|`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// One multiplier per constraint row; `A^T y <= c` at optimality.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: Residuals,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub nonzero_budget: u128,
    /// Passed to the solver as its primal and dual feasibility tolerance.
    pub solver_tol: f64,
    /// Accepted residual, relative to `1 + max|b|` (primal) or `1 + max|c|` (dual).
    pub accept_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            nonzero_budget: DEFAULT_NONZERO_BUDGET,
            solver_tol: 1e-9,
            accept_tol: 1e-8,
        }
    }
}

pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution> {
    solve_lp_with(problem, &SolverOptions::default())
}

pub fn solve_lp_with(problem: &LpProblem, opts: &SolverOptions) -> Result<LpSolution> {
    problem.validate()?;
    let nnz: u128 = problem.rows.iter().map(|r| r.len() as u128).sum();
    if nnz > opts.nonzero_budget {
        return Err(Error::Budget {
            what: "constraint nonzeros",
            requested: nnz,
            limit: opts.nonzero_budget,
        });
    }
    if problem.num_rows() == 0 {
        return solve_unconstrained(problem);
    }
    let (mut status, mut x, mut duals, mut iterations) = run_highs(problem, &problem.objective, opts)?;
    if status != HighsModelStatus::Optimal && opts.solver_tol < LOOSE_TOL {
        // very small probabilities can trip the tight tolerances into a false
        // infeasibility verdict; confirm at the solver's standard tolerance
        // and leave accuracy to the residual check below
        let loose = SolverOptions {
            solver_tol: LOOSE_TOL,
            ..opts.clone()
        };
        (status, x, duals, iterations) = run_highs(problem, &problem.objective, &loose)?;
    }
    match status {
        HighsModelStatus::Optimal => {}
        HighsModelStatus::Infeasible => return Err(Error::Infeasible),
        HighsModelStatus::Unbounded => return Err(Error::Unbounded),
        HighsModelStatus::UnboundedOrInfeasible => {
            // a zero objective separates the two cases
            let zero = vec![0.0; problem.num_vars()];
            let (s, ..) = run_highs(problem, &zero, opts)?;
            return Err(if s == HighsModelStatus::Optimal {
                Error::Unbounded
            } else {
                Error::Infeasible
            });
        }
        other => return Err(Error::Numerical(format!("solver stopped with status {other:?}"))),
    }
    let x: Vec<f64> = x.into_iter().map(|v| v.max(0.0)).collect();
    let (objective, residuals) = measure(problem, &x, &duals);
    let bmax = problem.rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let cmax = problem.objective.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    if residuals.primal > opts.accept_tol * (1.0 + bmax) || residuals.dual > opts.accept_tol * (1.0 + cmax) {
        return Err(Error::Numerical(format!(
            "inaccurate optimum (primal residual {:.1e}, dual residual {:.1e})",
            residuals.primal, residuals.dual
        )));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        duals,
        objective,
        iterations,
        residuals,
    })
}

type HighsRun = (HighsModelStatus, Vec<f64>, Vec<f64>, usize);

fn run_highs(p: &LpProblem, cost: &[f64], opts: &SolverOptions) -> Result<HighsRun> {
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); p.num_vars()];
    for (r, row) in p.rows.iter().enumerate() {
        for &(j, v) in row {
            cols[j].push((r, v));
        }
    }
    let mut hp = ColProblem::default();
    let rows: Vec<_> = p.rhs.iter().map(|&b| hp.add_row(b..=b)).collect();
    for (j, col) in cols.iter().enumerate() {
        hp.add_column(cost[j], 0.0.., col.iter().map(|&(r, v)| (rows[r], v)));
    }
    let mut model = hp
        .try_optimise(Sense::Minimise)
        .map_err(|e| Error::Numerical(format!("solver rejected the problem: {e:?}")))?;
    model.make_quiet();
    for (name, value) in [
        ("primal_feasibility_tolerance", opts.solver_tol),
        ("dual_feasibility_tolerance", opts.solver_tol),
    ] {
        model
            .try_set_option(name, value)
            .map_err(|e| Error::invalid(format!("solver option {name}: {e:?}")))?;
    }
    model
        .try_set_option("threads", 1)
        .and_then(|_| model.try_set_option("solver", "simplex"))
        .map_err(|e| Error::invalid(format!("solver option: {e:?}")))?;
    let solved = model
        .try_solve()
        .map_err(|e| Error::Numerical(format!("solver failed: {e:?}")))?;
    let status = solved.status();
    let sol = solved.get_solution();
    let iterations = solved.simplex_iteration_count().max(0) as usize;
    Ok((status, sol.columns().to_vec(), sol.dual_rows().to_vec(), iterations))
}

fn solve_unconstrained(problem: &LpProblem) -> Result<LpSolution> {
    if problem.objective.iter().any(|&c| c < 0.0) {
        return Err(Error::Unbounded);
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x: vec![0.0; problem.num_vars()],
        duals: Vec::new(),
        objective: 0.0,
        iterations: 0,
        residuals: Residuals::default(),
    })
}

/// Objective and residuals of a candidate primal-dual pair.
fn measure(p: &LpProblem, x: &[f64], duals: &[f64]) -> (f64, Residuals) {
    let activity = p.row_activity(x);
    let primal = activity
        .iter()
        .zip(&p.rhs)
        .fold(0.0f64, |a, (ax, b)| a.max((ax - b).abs()));
    let mut aty = vec![0.0; x.len()];
    for (r, row) in p.rows.iter().enumerate() {
        for &(j, v) in row {
            aty[j] += v * duals[r];
        }
    }
    let dual = aty
        .iter()
        .zip(&p.objective)
        .fold(0.0f64, |a, (ay, c)| a.max(ay - c));
    let objective: f64 = x.iter().zip(&p.objective).map(|(a, b)| a * b).sum();
    let dual_obj: f64 = duals.iter().zip(&p.rhs).map(|(a, b)| a * b).sum();
    let gap = (objective - dual_obj).abs();
    (objective, Residuals { primal, dual, gap })
}
