//! `cot`: command-line front end for the causal transport solvers.

mod input;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use cot_core::barycenter::{
    anticausal_barycenter, bc_bary_value, bc_barycenter, causal_barycenter, counterexample_demo,
};
use cot_core::matching::{solve_matching, verify_equilibrium};
use cot_core::multicausal::{
    assemble_coupling, brute_force_mcot_with_budget, mc_dpp_with_budget, verify_multicausal, AwCost,
    OracleSolution, VerificationReport,
};
use cot_core::random::{random_tree, rng, TreeShape};
use cot_core::{Error, PathCost, ScenarioTree, DEFAULT_TUPLE_BUDGET};

pub enum CliError {
    Core(Error),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                Error::Parse(_) | Error::Validation(_) | Error::DimensionMismatch(_) | Error::InvalidArgument(_) => 2,
                Error::Budget { .. } => 3,
                Error::Infeasible | Error::Unbounded | Error::Numerical(_) => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Io(m) => format!("cannot read input: {m}"),
            CliError::Core(e) => e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "cot", version, about = "Causal, bicausal and multicausal optimal transport on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Cap on enumerated leaf tuples.
    #[arg(long, global = true, default_value_t = DEFAULT_TUPLE_BUDGET)]
    budget: u128,
    /// Include wall-clock timing (makes reports non-reproducible).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Adapted Wasserstein distance between two trees.
    Awdist {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// Multicausal transport by backward induction.
    Mcot {
        #[arg(required = true, num_args = 2..)]
        trees: Vec<PathBuf>,
        /// lp_sum:P[:W1,...], aw:P or tensor:FILE.
        #[arg(long, default_value = "lp_sum:2")]
        cost: String,
        /// Also solve the joint LP and report its certificate.
        #[arg(long)]
        oracle: bool,
    },
    /// Multicausal transport as one LP with a dual certificate.
    McotOracle {
        #[arg(required = true, num_args = 2..)]
        trees: Vec<PathBuf>,
        #[arg(long, default_value = "lp_sum:2")]
        cost: String,
    },
    /// Bicausal barycenter.
    BaryBc {
        #[arg(required = true)]
        trees: Vec<PathBuf>,
        #[command(flatten)]
        cost: BaryCost,
        /// Declared accuracy of the grid selector used for non-quadratic costs.
        #[arg(long, default_value_t = 0.0)]
        grid_eps: f64,
    },
    /// Causal barycenter on a fixed task tree.
    BaryC {
        #[arg(required = true)]
        trees: Vec<PathBuf>,
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        cost: BaryCost,
    },
    /// Anticausal barycenter on a fixed task tree.
    BaryAnticausal {
        #[arg(required = true)]
        trees: Vec<PathBuf>,
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        cost: BaryCost,
    },
    /// Matching equilibrium with wages.
    Match { instance: PathBuf },
    /// Checks a coupling against the multicausal test functions.
    VerifyCoupling {
        coupling: PathBuf,
        #[arg(required = true)]
        trees: Vec<PathBuf>,
        /// Largest accepted test-function integral and marginal TV error.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// The Gaussian counterexample under n-point quantization.
    Counterexample {
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Random scenario tree, for generating test instances.
    GenTree {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        #[arg(long, default_value_t = 2)]
        branching: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
    },
}

#[derive(clap::Args)]
struct BaryCost {
    /// Process weights λ^i, comma separated; uniform when omitted.
    #[arg(long)]
    weights: Option<String>,
    /// Exponent of the per-time cost λ^i ||x_t - y_t||_p^p.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// JSON file with explicit per-process, per-time cost terms.
    #[arg(long)]
    cost_file: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.message());
        return ExitCode::from(e.exit_code());
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

/// Honours `COT_THREADS`; otherwise rayon picks the thread count.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("COT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::InvalidArgument(format!("COT_THREADS = '{v}' is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()).into())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.budget < 1 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()).into());
    }
    let start = Instant::now();
    let text = match &cli.command {
        Command::GenTree {
            seed,
            horizon,
            branching,
            dim,
        } => {
            if *horizon < 1 || *branching < 1 || *dim < 1 {
                return Err(Error::InvalidArgument("horizon, branching and dim must be positive".into()).into());
            }
            let shape = TreeShape {
                dim: *dim,
                ..TreeShape::new(*horizon, *branching)
            };
            let tree = random_tree(&mut rng(*seed), &shape);
            let value: Value = serde_json::from_str(&tree.to_json()).expect("tree JSON is valid");
            serde_json::to_string_pretty(&value).expect("serializable") + "\n"
        }
        command => {
            let (name, body) = dispatch(command, cli.budget)?;
            let mut report = Map::new();
            report.insert("schema".into(), json!("1"));
            report.insert("command".into(), json!(name));
            for (k, v) in body {
                report.insert(k, v);
            }
            if cli.timing {
                report.insert("timing".into(), json!({ "seconds": start.elapsed().as_secs_f64() }));
            }
            match cli.format {
                Format::Json => serde_json::to_string_pretty(&Value::Object(report)).expect("serializable") + "\n",
                Format::Text => text_summary(&report),
            }
        }
    };
    match &cli.output {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// One `key: value` line per scalar field, nested objects flattened with dots.
fn text_summary(report: &Map<String, Value>) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            Value::Array(_) => {}
            other => out.push_str(&format!("{prefix}: {other}\n")),
        }
    }
    let mut out = String::new();
    walk("", &Value::Object(report.clone()), &mut out);
    out
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn check_tuples(trees: &[ScenarioTree], budget: u128) -> Result<(), Error> {
    let count: u128 = trees.iter().map(|t| t.leaf_count() as u128).product();
    if count > budget {
        return Err(Error::Budget {
            what: "leaf tuples",
            requested: count,
            limit: budget,
        });
    }
    Ok(())
}

fn check_pairs(trees: &[ScenarioTree], task: &ScenarioTree, budget: u128) -> Result<(), Error> {
    let count: u128 = trees.iter().map(|t| (t.leaf_count() * task.leaf_count()) as u128).sum();
    if count > budget {
        return Err(Error::Budget {
            what: "plan entries",
            requested: count,
            limit: budget,
        });
    }
    Ok(())
}

fn verification(report: &VerificationReport) -> Value {
    json!({
        "pass": report.pass,
        "worst_violation": report.worst_violation,
        "marginal_error": report.marginal_error,
        "witnesses": to_value(&report.witnesses),
    })
}

fn oracle_block(sol: &OracleSolution, trees: &[ScenarioTree], cost: &dyn PathCost) -> Value {
    let check = sol.certificate.check(trees, cost, &sol.coupling);
    json!({
        "value": sol.value,
        "duality_gap": (check.dual_value - sol.value).abs(),
        "coupling": to_value(&sol.coupling.plan),
        "certificate": to_value(&sol.certificate),
        "certificate_check": to_value(&check),
        "residuals": to_value(&sol.residuals),
        "iterations": sol.iterations,
    })
}

type Body = Vec<(String, Value)>;

fn field(k: &str, v: Value) -> (String, Value) {
    (k.to_string(), v)
}

fn dispatch(command: &Command, budget: u128) -> Result<(&'static str, Body), CliError> {
    match command {
        Command::Awdist { a, b, p } => {
            if !(*p >= 1.0) || !p.is_finite() {
                return Err(Error::InvalidArgument(format!("exponent p = {p} must be at least 1")).into());
            }
            let trees = vec![input::tree(a)?, input::tree(b)?];
            check_tuples(&trees, budget)?;
            let cost = AwCost { p: *p };
            let dpp = mc_dpp_with_budget(&trees, &cost, budget)?;
            let coupling = assemble_coupling(&dpp.policy)?;
            let report = verify_multicausal(&coupling, &trees)?;
            Ok((
                "awdist",
                vec![
                    field("p", json!(p)),
                    field("value", json!(dpp.value.max(0.0).powf(1.0 / p))),
                    field("cost_value", json!(dpp.value)),
                    field("duality_gap", json!(dpp.max_inner_gap)),
                    field("coupling", to_value(&coupling.plan)),
                    field("verification", verification(&report)),
                ],
            ))
        }
        Command::Mcot { trees, cost, oracle } => {
            let trees = input::trees(trees)?;
            check_tuples(&trees, budget)?;
            let spec = input::cost_spec(cost, &trees)?;
            let c = spec.as_path_cost();
            let dpp = mc_dpp_with_budget(&trees, c, budget)?;
            let coupling = assemble_coupling(&dpp.policy)?;
            let report = verify_multicausal(&coupling, &trees)?;
            let mut body = vec![
                field("cost", json!(cost)),
                field("value", json!(dpp.value)),
                field("duality_gap", json!(dpp.max_inner_gap)),
                field("coupling", to_value(&coupling.plan)),
                field("verification", verification(&report)),
            ];
            if *oracle {
                let sol = brute_force_mcot_with_budget(&trees, c, budget)?;
                body.push(field("dpp_oracle_gap", json!((dpp.value - sol.value).abs())));
                body.push(field("oracle", oracle_block(&sol, &trees, c)));
            }
            Ok(("mcot", body))
        }
        Command::McotOracle { trees, cost } => {
            let trees = input::trees(trees)?;
            check_tuples(&trees, budget)?;
            let spec = input::cost_spec(cost, &trees)?;
            let c = spec.as_path_cost();
            let sol = brute_force_mcot_with_budget(&trees, c, budget)?;
            let mut body = vec![field("cost", json!(cost))];
            if let Value::Object(m) = oracle_block(&sol, &trees, c) {
                body.extend(m);
            }
            Ok(("mcot-oracle", body))
        }
        Command::BaryBc { trees, cost, grid_eps } => {
            let trees = input::trees(trees)?;
            check_tuples(&trees, budget)?;
            let horizon = trees[0].horizon();
            let sep = input::separable_cost(cost.cost_file.as_deref(), cost.weights.as_deref(), cost.p, trees.len(), horizon)?;
            let selector = input::selector(&sep, &trees, *grid_eps)?;
            let bary = bc_barycenter(&trees, &sep, &selector)?;
            let attained = bc_bary_value(&trees, &sep, &bary.process)?;
            let report = verify_multicausal(&bary.coupling, &trees)?;
            let process: Value = serde_json::from_str(&bary.process.to_json()).expect("tree JSON is valid");
            Ok((
                "bary-bc",
                vec![
                    field("value", json!(bary.value)),
                    field("duality_gap", json!(bary.max_inner_gap)),
                    field("attained_value", json!(attained)),
                    field("selector_eps", json!(selector.eps())),
                    field("barycenter", process),
                    field("coupling", to_value(&bary.coupling.plan)),
                    field("verification", verification(&report)),
                ],
            ))
        }
        Command::BaryC { trees, task, cost } => {
            let trees = input::trees(trees)?;
            let task = input::tree(task)?;
            check_pairs(&trees, &task, budget)?;
            let sep = input::separable_cost(cost.cost_file.as_deref(), cost.weights.as_deref(), cost.p, trees.len(), task.horizon())?;
            let pairs: Vec<_> = (0..sep.processes()).map(|i| sep.pair(i)).collect();
            if pairs.len() != trees.len() {
                return Err(Error::DimensionMismatch(format!("cost covers {} processes, {} given", pairs.len(), trees.len())).into());
            }
            let costs: Vec<&dyn PathCost> = pairs.iter().map(|c| c as &dyn PathCost).collect();
            let sol = causal_barycenter(&trees, &task, &costs)?;
            let check = sol.check(&trees, &task, &costs);
            let mut body = vec![field("duality_gap", json!((sol.value - sol.dual_value).abs()))];
            if let Value::Object(m) = to_value(&sol) {
                body.extend(m);
            }
            body.push(field("certificate_check", to_value(&check)));
            Ok(("bary-c", body))
        }
        Command::BaryAnticausal { trees, task, cost } => {
            let trees = input::trees(trees)?;
            let task = input::tree(task)?;
            check_pairs(&trees, &task, budget)?;
            let sep = input::separable_cost(cost.cost_file.as_deref(), cost.weights.as_deref(), cost.p, trees.len(), task.horizon())?;
            let pairs: Vec<_> = (0..sep.processes()).map(|i| sep.pair(i)).collect();
            if pairs.len() != trees.len() {
                return Err(Error::DimensionMismatch(format!("cost covers {} processes, {} given", pairs.len(), trees.len())).into());
            }
            let costs: Vec<&dyn PathCost> = pairs.iter().map(|c| c as &dyn PathCost).collect();
            let sol = anticausal_barycenter(&trees, &task, &costs)?;
            let mut body = vec![field("duality_gap", json!(sol.residuals.gap))];
            if let Value::Object(m) = to_value(&sol) {
                body.extend(m);
            }
            Ok(("bary-anticausal", body))
        }
        Command::Match { instance } => {
            let inst = input::matching(instance)?;
            let mut all = inst.trees.clone();
            all.push(inst.tasks.clone());
            check_pairs(&inst.trees, &inst.tasks, budget)?;
            let eq = solve_matching(&inst)?;
            let report = verify_equilibrium(&inst, &eq)?;
            let mut body = vec![field("duality_gap", json!((eq.barycenter_value - eq.dual_value).abs()))];
            if let Value::Object(m) = to_value(&eq) {
                body.extend(m);
            }
            body.push(field("verification", to_value(&report)));
            Ok(("match", body))
        }
        Command::VerifyCoupling { coupling, trees, tol } => {
            if !(*tol > 0.0) {
                return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")).into());
            }
            let trees = input::trees(trees)?;
            check_tuples(&trees, budget)?;
            let plan = input::coupling(coupling, &trees)?;
            let report = verify_multicausal(&plan, &trees)?;
            let pass = report.worst_violation <= *tol && report.marginal_error <= *tol;
            let mut v = verification(&report);
            v["pass"] = json!(pass);
            Ok(("verify-coupling", vec![field("tolerance", json!(tol)), field("verification", v)]))
        }
        Command::Counterexample { n } => {
            let report = counterexample_demo(*n)?;
            let mut body = Vec::new();
            if let Value::Object(m) = to_value(&report) {
                body.extend(m);
            }
            Ok(("counterexample", body))
        }
        Command::GenTree { .. } => unreachable!("handled before dispatch"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        let code = |e: Error| CliError::from(e).exit_code();
        assert_eq!(code(Error::Parse("x".into())), 2);
        assert_eq!(code(Error::DimensionMismatch("x".into())), 2);
        assert_eq!(code(Error::Budget { what: "x", requested: 2, limit: 1 }), 3);
        assert_eq!(code(Error::Infeasible), 4);
        assert_eq!(code(Error::Numerical("x".into())), 4);
        assert_eq!(CliError::Io("x".into()).exit_code(), 2);
    }

    #[test]
    fn text_summary_flattens_scalars() {
        let v = json!({"schema": "1", "a": {"b": 2.5, "c": [1, 2]}, "d": true});
        let Value::Object(m) = v else { unreachable!() };
        assert_eq!(text_summary(&m), "a.b: 2.5\nd: true\nschema: \"1\"\n");
    }
}
