use std::fs;
use std::path::Path;

use serde::Deserialize;

use cot_core::barycenter::{phi0_quadratic, Phi0Selector, SeparableCost, TimeCost};
use cot_core::matching::MatchingInstance;
use cot_core::multicausal::{AwCost, LpSum, TensorCost};
use cot_core::ot::CostTensor;
use cot_core::{load_tree, Error, PathCost, ScenarioTree, TransportPlan};

use crate::CliError;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())).into())
}

pub fn tree(path: &Path) -> Result<ScenarioTree, CliError> {
    load_tree(&read(path)?).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    })
}

pub fn trees(paths: &[std::path::PathBuf]) -> Result<Vec<ScenarioTree>, CliError> {
    paths.iter().map(|p| tree(p)).collect()
}

/// Named path cost for the multicausal commands.
pub enum CostSpec {
    LpSum(LpSum),
    Aw(AwCost),
    Tensor(TensorCost),
}

impl CostSpec {
    pub fn as_path_cost(&self) -> &dyn PathCost {
        match self {
            CostSpec::LpSum(c) => c,
            CostSpec::Aw(c) => c,
            CostSpec::Tensor(c) => c,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn exponent(s: &str) -> Result<f64, CliError> {
    let p: f64 = s
        .parse()
        .map_err(|_| Error::Parse(format!("cannot read exponent '{s}'")))?;
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("exponent {p} must be positive")).into());
    }
    Ok(p)
}

/// `lp_sum:P[:W1,W2,...]`, `aw:P` or `tensor:FILE`.
pub fn cost_spec(spec: &str, trees: &[ScenarioTree]) -> Result<CostSpec, CliError> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "lp_sum" => {
            let mut parts = rest.splitn(2, ':');
            let p = exponent(parts.next().filter(|s| !s.is_empty()).unwrap_or("2"))?;
            let weights = match parts.next() {
                Some(w) => number_list(w)?,
                None => Vec::new(),
            };
            Ok(CostSpec::LpSum(LpSum { p, weights }))
        }
        "aw" => Ok(CostSpec::Aw(AwCost {
            p: exponent(if rest.is_empty() { "2" } else { rest })?,
        })),
        "tensor" => {
            let file: TensorFile = parse_json(Path::new(rest))?;
            let tensor = CostTensor::new(file.dims, file.data)?;
            let leaves: Vec<usize> = trees.iter().map(ScenarioTree::leaf_count).collect();
            if tensor.dims() != leaves.as_slice() {
                return Err(Error::DimensionMismatch(format!(
                    "cost tensor has shape {:?}, leaf counts are {leaves:?}",
                    tensor.dims()
                ))
                .into());
            }
            Ok(CostSpec::Tensor(TensorCost(tensor)))
        }
        _ => Err(Error::Parse(format!(
            "unknown cost '{spec}'; expected lp_sum:P, aw:P or tensor:FILE"
        ))
        .into()),
    }
}

pub fn number_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("cannot read number '{v}'")).into())
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
enum TermFile {
    Power { lambda: f64, p: f64 },
    Matrix {
        xs: Vec<Vec<f64>>,
        ys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
    },
}

impl From<TermFile> for TimeCost {
    fn from(t: TermFile) -> Self {
        match t {
            TermFile::Power { lambda, p } => TimeCost::Power { lambda, p },
            TermFile::Matrix { xs, ys, values } => TimeCost::Matrix { xs, ys, values },
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeparableFile {
    /// `terms[i][t]`.
    terms: Vec<Vec<TermFile>>,
}

/// Barycenter cost: a JSON file of per-process, per-time terms, or weighted
/// p-powers from `--weights` and `--p`.
pub fn separable_cost(
    file: Option<&Path>,
    weights: Option<&str>,
    p: f64,
    n: usize,
    horizon: usize,
) -> Result<SeparableCost, CliError> {
    if let Some(path) = file {
        let f: SeparableFile = parse_json(path)?;
        return Ok(SeparableCost {
            terms: f
                .terms
                .into_iter()
                .map(|ts| ts.into_iter().map(TimeCost::from).collect())
                .collect(),
        });
    }
    let w = process_weights(weights, n)?;
    Ok(SeparableCost::power(&w, p, horizon))
}

pub fn process_weights(weights: Option<&str>, n: usize) -> Result<Vec<f64>, CliError> {
    let w = match weights {
        Some(s) => number_list(s)?,
        None => vec![1.0 / n as f64; n],
    };
    if w.len() != n {
        return Err(Error::DimensionMismatch(format!("{} weights for {n} processes", w.len())).into());
    }
    Ok(w)
}

/// Closed-form mean for quadratic power costs, otherwise the argmin over
/// every state the inputs visit at each time.
pub fn selector(cost: &SeparableCost, trees: &[ScenarioTree], eps: f64) -> Result<Phi0Selector, CliError> {
    let quadratic: Option<Vec<f64>> = cost
        .terms
        .iter()
        .map(|ts| {
            let first = match ts.first()? {
                TimeCost::Power { lambda, p } if *p == 2.0 => *lambda,
                _ => return None,
            };
            ts.iter()
                .all(|t| matches!(t, TimeCost::Power { lambda, p } if *p == 2.0 && *lambda == first))
                .then_some(first)
        })
        .collect();
    if let Some(w) = quadratic {
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() <= 1e-12 {
            return Ok(phi0_quadratic(&w)?);
        }
    }
    let horizon = trees.first().map_or(0, ScenarioTree::horizon);
    let grids = (0..horizon)
        .map(|l| {
            let mut g: Vec<Vec<f64>> = trees
                .iter()
                .flat_map(|t| t.level(l).iter().map(|n| n.value.clone()))
                .collect();
            g.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            g.dedup();
            g
        })
        .collect();
    Ok(Phi0Selector::Grid { grids, eps })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    tree: serde_json::Value,
    cost: Vec<TermFile>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatchingFile {
    Terms {
        principal: serde_json::Value,
        utility: Vec<TermFile>,
        agents: Vec<AgentFile>,
        tasks: serde_json::Value,
    },
    Matrices {
        trees: Vec<serde_json::Value>,
        tasks: serde_json::Value,
        costs: Vec<Vec<Vec<f64>>>,
    },
}

pub fn matching(path: &Path) -> Result<MatchingInstance, CliError> {
    let file: MatchingFile = parse_json(path)?;
    let tree = |v: serde_json::Value| cot_core::tree_from_value(v);
    let inst = match file {
        MatchingFile::Terms {
            principal,
            utility,
            agents,
            tasks,
        } => {
            let utility: Vec<TimeCost> = utility.into_iter().map(TimeCost::from).collect();
            let agents = agents
                .into_iter()
                .map(|a| Ok((tree(a.tree)?, a.cost.into_iter().map(TimeCost::from).collect())))
                .collect::<Result<Vec<_>, Error>>()?;
            MatchingInstance::new(tree(principal)?, &utility, agents, tree(tasks)?)?
        }
        MatchingFile::Matrices { trees, tasks, costs } => {
            let trees = trees.into_iter().map(tree).collect::<Result<Vec<_>, Error>>()?;
            MatchingInstance::from_matrices(trees, tree(tasks)?, costs)?
        }
    };
    Ok(inst)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingFile {
    /// Each entry names one leaf per process, by index or by leaf id.
    entries: Vec<(Vec<LeafRef>, f64)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LeafRef {
    Index(usize),
    Id(String),
}

/// Reads a coupling over leaf tuples; the axis sizes come from the trees.
pub fn coupling(path: &Path, trees: &[ScenarioTree]) -> Result<TransportPlan, CliError> {
    let file: CouplingFile = parse_json(path)?;
    let dims: Vec<usize> = trees.iter().map(ScenarioTree::leaf_count).collect();
    let mut entries = Vec::with_capacity(file.entries.len());
    for (refs, w) in file.entries {
        if refs.len() != trees.len() {
            return Err(Error::DimensionMismatch(format!(
                "coupling entry names {} leaves, {} trees given",
                refs.len(),
                trees.len()
            ))
            .into());
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Validation(format!("coupling weight {w} is not a finite nonnegative number")).into());
        }
        let idx = refs
            .into_iter()
            .zip(trees)
            .enumerate()
            .map(|(i, (r, t))| match r {
                LeafRef::Index(k) if k < t.leaf_count() => Ok(k),
                LeafRef::Index(k) => Err(Error::Validation(format!("tree {i} has no leaf {k}"))),
                LeafRef::Id(id) => t
                    .leaf_index(&id)
                    .ok_or_else(|| Error::Validation(format!("tree {i} has no leaf '{id}'"))),
            })
            .collect::<Result<Vec<usize>, Error>>()?;
        entries.push((idx, w));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    if entries.windows(2).any(|p| p[0].0 == p[1].0) {
        return Err(Error::Validation("coupling lists a leaf tuple twice".into()).into());
    }
    Ok(TransportPlan::new(dims, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_specs() {
        match cost_spec("lp_sum:1:0.5,2", &[]) {
            Ok(CostSpec::LpSum(c)) => assert_eq!((c.p, c.weights), (1.0, vec![0.5, 2.0])),
            _ => panic!("lp_sum not parsed"),
        }
        assert!(matches!(cost_spec("aw", &[]), Ok(CostSpec::Aw(AwCost { p })) if p == 2.0));
        assert!(cost_spec("lp_sum:-1", &[]).is_err());
        assert!(cost_spec("nope:2", &[]).is_err());
    }

    #[test]
    fn weights_default_to_uniform() {
        assert_eq!(process_weights(None, 4).ok(), Some(vec![0.25; 4]));
        assert!(process_weights(Some("0.5"), 2).is_err());
    }
}
