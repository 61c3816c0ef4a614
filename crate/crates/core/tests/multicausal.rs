use proptest::prelude::*;

use cot_core::multicausal::{
    assemble_coupling, aw_distance, brute_force_mcot, glue, mc_dpp, restrict_coupling,
    verify_multicausal, AwCost, LpSum, MulticausalCoupling, PathCost,
};
use cot_core::ot::classical_ot;
use cot_core::random::{random_tree, random_trees, rng, TreeShape};
use cot_core::{load_tree, ScenarioTree};

fn trees(seed: u64, n: usize, horizon: usize, branching: usize) -> Vec<ScenarioTree> {
    random_trees(&mut rng(seed), n, &TreeShape::new(horizon, branching), 400)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_induction_matches_the_joint_lp(seed in any::<u64>(), n in 2usize..4, horizon in 1usize..4) {
        let ts = trees(seed, n, horizon, 2);
        let cost = LpSum::quadratic();
        let d = mc_dpp(&ts, &cost).unwrap();
        let o = brute_force_mcot(&ts, &cost).unwrap();
        prop_assert!(close(d.value, o.value, 1e-8), "{} vs {}", d.value, o.value);
    }

    #[test]
    fn assembled_policy_is_multicausal_and_optimal(seed in any::<u64>(), n in 2usize..4) {
        let ts = trees(seed, n, 3, 2);
        let cost = LpSum::new(1.0);
        let d = mc_dpp(&ts, &cost).unwrap();
        let coupling = assemble_coupling(&d.policy).unwrap();
        let report = verify_multicausal(&coupling, &ts).unwrap();
        prop_assert!(report.pass, "worst violation {}", report.worst_violation);
        prop_assert!(close(coupling.expected_cost(&ts, &cost), d.value, 1e-9));
        // the independent coupling is admissible, so it can only cost more
        let product = MulticausalCoupling::product(&ts);
        prop_assert!(verify_multicausal(&product, &ts).unwrap().pass);
        prop_assert!(product.expected_cost(&ts, &cost) >= d.value - 1e-9);
    }

    #[test]
    fn separable_costs_do_not_depend_on_the_coupling(seed in any::<u64>(), n in 2usize..4) {
        let ts = trees(seed, n, 2, 3);
        let cost = |_: &[usize], paths: &[&[Vec<f64>]]| -> f64 {
            paths.iter().enumerate().map(|(i, p)| (i as f64 + 1.0) * p[1][0] * p[1][0] + p[0][0]).sum()
        };
        let d = mc_dpp(&ts, &cost).unwrap();
        let expected = MulticausalCoupling::product(&ts).expected_cost(&ts, &cost);
        prop_assert!(close(d.value, expected, 1e-9));
    }

    #[test]
    fn adapted_distance_is_a_metric(seed in any::<u64>(), p in 1usize..3) {
        let ts = trees(seed, 3, 2, 3);
        let p = p as f64;
        let d = |a: usize, b: usize| aw_distance(&ts[a], &ts[b], p).unwrap();
        prop_assert!(d(0, 0) <= 1e-6);
        prop_assert!((d(0, 1) - d(1, 0)).abs() <= 1e-8);
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-8);
        prop_assert!(d(0, 1) >= 0.0);
    }

    #[test]
    fn restrictions_and_gluings_stay_multicausal(seed in any::<u64>()) {
        let ts = trees(seed, 3, 2, 2);
        let cost = LpSum::quadratic();
        let full = assemble_coupling(&mc_dpp(&ts, &cost).unwrap().policy).unwrap();
        for subset in [[0usize, 2], [2, 1]] {
            let r = restrict_coupling(&full, &subset).unwrap();
            let sub: Vec<ScenarioTree> = subset.iter().map(|&i| ts[i].clone()).collect();
            prop_assert!(verify_multicausal(&r, &sub).unwrap().pass);
        }
        let left = assemble_coupling(&mc_dpp(&ts[..2], &AwCost { p: 1.0 }).unwrap().policy).unwrap();
        let right = assemble_coupling(&mc_dpp(&ts[1..], &AwCost { p: 2.0 }).unwrap().policy).unwrap();
        let glued = glue(&left, &right).unwrap();
        prop_assert!(verify_multicausal(&glued, &ts).unwrap().pass);
    }

    #[test]
    fn tree_json_round_trips(seed in any::<u64>(), horizon in 1usize..4, dim in 1usize..3) {
        let shape = TreeShape { dim, ..TreeShape::new(horizon, 3) };
        let t = random_tree(&mut rng(seed), &shape);
        let back = ScenarioTree::from_json(&t.to_json()).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(load_tree(t.to_json().as_bytes()).unwrap(), t);
    }
}

#[test]
fn single_period_problem_is_classical_transport() {
    // with one period causality is vacuous, so the min-cost flow is an independent oracle
    for seed in 0..20u64 {
        let ts = trees(seed, 2, 1, 5);
        let cost = LpSum::new(1.0);
        let d = mc_dpp(&ts, &cost).unwrap();
        let (x, y) = (ts[0].all_leaf_values(), ts[1].all_leaf_values());
        let matrix: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, a)| {
                y.iter()
                    .enumerate()
                    .map(|(j, b)| cost.cost(&[i, j], &[a.as_slice(), b.as_slice()]))
                    .collect()
            })
            .collect();
        let (flow, _) = classical_ot(&ts[0].first_step(), &ts[1].first_step(), &matrix).unwrap();
        assert!(close(d.value, flow, 1e-10), "seed {seed}: {} vs {flow}", d.value);
    }
}

#[test]
fn identical_processes_are_at_distance_zero() {
    let t = trees(7, 1, 3, 3).remove(0);
    assert!(aw_distance(&t, &t, 1.0).unwrap() < 1e-9);
    assert!(aw_distance(&t, &t, 0.5).is_err());
}
