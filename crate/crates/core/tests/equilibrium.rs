use proptest::prelude::*;
use rand::Rng;

use cot_core::barycenter::{
    anticausal_barycenter, bc_bary_value, bc_barycenter, causal_barycenter, phi0_quadratic, SeparableCost,
    TimeCost,
};
use cot_core::matching::{best_response, solve_matching, verify_equilibrium, MatchingInstance};
use cot_core::multicausal::PathCost;
use cot_core::random::{random_tree, rng, TreeShape};
use cot_core::ScenarioTree;

fn instance(seed: u64, agents: usize) -> MatchingInstance {
    let mut r = rng(seed);
    let shape = TreeShape::new(2, 2);
    let principal = random_tree(&mut r, &shape);
    let tasks = random_tree(&mut r, &TreeShape::new(2, 3));
    let utility = vec![TimeCost::Power { lambda: -1.0, p: 2.0 }; 2];
    let pops = (0..agents)
        .map(|_| {
            let p = if r.gen_bool(0.5) { 1.0 } else { 2.0 };
            (random_tree(&mut r, &shape), vec![TimeCost::Power { lambda: r.gen_range(0.5..2.0), p }; 2])
        })
        .collect();
    MatchingInstance::new(principal, &utility, pops, tasks).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn equilibrium_values_add_up_to_the_barycenter(seed in any::<u64>(), agents in 1usize..3) {
        let inst = instance(seed, agents);
        let eq = solve_matching(&inst).unwrap();
        let report = verify_equilibrium(&inst, &eq).unwrap();
        prop_assert!(report.pass, "{report:?}");
        let total: f64 = eq.values.iter().sum();
        prop_assert!((total - eq.barycenter_value).abs() <= 1e-8 * (1.0 + total.abs()));
        prop_assert!((eq.dual_value - eq.barycenter_value).abs() <= 1e-8 * (1.0 + total.abs()));
    }

    #[test]
    fn shifting_wages_between_agents_keeps_the_equilibrium(seed in any::<u64>(), kappa in -3.0f64..3.0) {
        let inst = instance(seed, 2);
        let mut eq = solve_matching(&inst).unwrap();
        for w in &mut eq.wages[1] {
            *w += kappa;
        }
        for w in &mut eq.wages[2] {
            *w -= kappa;
        }
        let ny = inst.tasks.leaf_count();
        for y in 0..ny {
            let rest: f64 = eq.wages[1..].iter().map(|w| w[y]).sum();
            eq.wages[0][y] = -rest;
        }
        prop_assert!(verify_equilibrium(&inst, &eq).unwrap().pass);
        // a constant shift moves the best-response value by the same constant
        let base = best_response(&inst, 1, &eq.wages[1]).unwrap().value;
        let shifted: Vec<f64> = eq.wages[1].iter().map(|w| w + 1.0).collect();
        let moved = best_response(&inst, 1, &shifted).unwrap().value;
        prop_assert!((moved - (base - 1.0)).abs() <= 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn causal_barycenter_certificate_is_tight(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = TreeShape::new(2, 2);
        let trees: Vec<ScenarioTree> = (0..2).map(|_| random_tree(&mut r, &shape)).collect();
        let task = random_tree(&mut r, &TreeShape::new(2, 3));
        let cost = SeparableCost::power(&[0.3, 0.7], 2.0, 2);
        let (c0, c1) = (cost.pair(0), cost.pair(1));
        let costs: [&dyn PathCost; 2] = [&c0, &c1];
        let sol = causal_barycenter(&trees, &task, &costs).unwrap();
        prop_assert!((sol.value - sol.dual_value).abs() <= 1e-8 * (1.0 + sol.value.abs()));
        prop_assert!((sol.nu.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for y in 0..task.leaf_count() {
            prop_assert_eq!(sol.task_potentials[0][y] + sol.task_potentials[1][y], 0.0);
        }
        let anti = anticausal_barycenter(&trees, &task, &costs).unwrap();
        prop_assert!(anti.value <= sol.value + 1e-8);
    }

    #[test]
    fn bicausal_barycenter_attains_its_value(seed in any::<u64>(), lambda in 0.1f64..0.9) {
        let mut r = rng(seed);
        let shape = TreeShape::new(2, 2);
        let trees: Vec<ScenarioTree> = (0..2).map(|_| random_tree(&mut r, &shape)).collect();
        let weights = [lambda, 1.0 - lambda];
        let cost = SeparableCost::power(&weights, 2.0, 2);
        let bary = bc_barycenter(&trees, &cost, &phi0_quadratic(&weights).unwrap()).unwrap();
        let direct = bc_bary_value(&trees, &cost, &bary.process).unwrap();
        prop_assert!((direct - bary.value).abs() <= 1e-8 * (1.0 + bary.value.abs()));
        // any other candidate does at least as well as nothing better
        let other = random_tree(&mut r, &shape);
        prop_assert!(bc_bary_value(&trees, &cost, &other).unwrap() >= bary.value - 1e-8);
    }
}

#[test]
fn barycenter_of_a_single_process_on_its_own_support_is_free() {
    let t = random_tree(&mut rng(5), &TreeShape::new(3, 2));
    let cost = SeparableCost::power(&[1.0], 2.0, 3);
    let c = cost.pair(0);
    let sol = causal_barycenter(std::slice::from_ref(&t), &t, &[&c]).unwrap();
    assert!(sol.value.abs() < 1e-10);
}

#[test]
fn wages_of_the_wrong_length_are_rejected() {
    let inst = instance(3, 1);
    assert!(best_response(&inst, 0, &[0.0]).is_err());
    assert!(best_response(&inst, 9, &vec![0.0; inst.tasks.leaf_count()]).is_err());
}
