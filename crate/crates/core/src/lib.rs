//! Causal, bicausal and multicausal optimal transport between finite
//! scenario trees.
//!
//! The crate is organised bottom-up:
//!
//! * [`tree`] and [`quant`]: finite filtered processes and Gauss–Hermite
//!   quantization,
//! * [`lp`] and [`ot`]: a linear-programming layer over HiGHS and classical (multi)marginal
//!   transport on top of it,
//! * [`multicausal`]: backward induction for multicausal transport, coupling
//!   assembly and verification, the brute-force LP oracle with dual
//!   certificates, and adapted Wasserstein distances,
//! * [`barycenter`]: bicausal barycenters through the multimarginal
//!   reformulation, causal and anticausal barycenters,
//! * [`matching`]: dynamic matching equilibria built from causal barycenter
//!   duals.

pub mod barycenter;
pub mod error;
pub mod lp;
pub mod matching;
pub mod multicausal;
pub mod ot;
pub mod quant;
pub mod random;
pub mod tree;

pub use error::{Error, Result};
pub use lp::{solve_lp, LpProblem, LpSolution, LpStatus};
pub use multicausal::{
    assemble_coupling, aw_distance, brute_force_mcot, glue, mc_dpp, restrict_coupling,
    verify_multicausal, DualCertificate, KernelPolicy, MulticausalCoupling, PathCost,
    ValueFunction,
};
pub use ot::{classical_ot, multimarginal_ot, wasserstein_barycenter_fixed_support, TransportPlan};
pub use quant::quantize_gauss_hermite;
pub use tree::{load_tree, tree_from_value, DiscreteDistribution, NodePath, ProductNodeTuple, ScenarioTree};

/// Default cap on enumerated leaf tuples.
pub const DEFAULT_TUPLE_BUDGET: u128 = 1_000_000;
/// Default cap on dense cost tensor entries.
pub const DEFAULT_TENSOR_BUDGET: u128 = 10_000_000;
