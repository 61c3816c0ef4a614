use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn cot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cot"))
        .args(args)
        .env("COT_THREADS", "2")
        .output()
        .expect("run cot")
}

fn report(args: &[&str]) -> Value {
    let out = cot(args);
    assert!(
        out.status.success(),
        "cot {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON report")
}

fn write(dir: &TempDir, name: &str, v: &Value) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
    p.display().to_string()
}

fn gen_tree(dir: &TempDir, name: &str, seed: u64, branching: usize) -> String {
    let p: PathBuf = dir.path().join(name);
    let out = cot(&[
        "gen-tree",
        "--seed",
        &seed.to_string(),
        "--branching",
        &branching.to_string(),
        "--output",
        p.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    p.display().to_string()
}

fn binary_tree(tag: &str, p: f64, x: [f64; 6]) -> Value {
    json!({
        "horizon": 2,
        "levels": [
            [
                {"id": format!("{tag}u"), "parent": null, "p": p, "x": [x[0]]},
                {"id": format!("{tag}d"), "parent": null, "p": 1.0 - p, "x": [x[1]]}
            ],
            [
                {"id": format!("{tag}uu"), "parent": format!("{tag}u"), "p": 0.5, "x": [x[2]]},
                {"id": format!("{tag}ud"), "parent": format!("{tag}u"), "p": 0.5, "x": [x[3]]},
                {"id": format!("{tag}du"), "parent": format!("{tag}d"), "p": 0.25, "x": [x[4]]},
                {"id": format!("{tag}dd"), "parent": format!("{tag}d"), "p": 0.75, "x": [x[5]]}
            ]
        ]
    })
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn identical_trees_are_at_distance_zero() {
    let dir = TempDir::new().unwrap();
    let a = gen_tree(&dir, "a.json", 3, 3);
    let r = report(&["awdist", &a, &a, "--p", "2"]);
    assert_eq!(r["schema"], "1");
    assert!(num(&r["value"]).abs() < 1e-9);
    assert_eq!(r["verification"]["pass"], true);
}

#[test]
fn backward_induction_agrees_with_the_joint_lp() {
    let dir = TempDir::new().unwrap();
    let ts: Vec<String> = (0..3).map(|k| gen_tree(&dir, &format!("x{k}.json"), 20 + k, 2)).collect();
    let r = report(&["mcot", &ts[0], &ts[1], &ts[2], "--cost", "lp_sum:2", "--oracle"]);
    assert!(num(&r["dpp_oracle_gap"]) <= 1e-8 * (1.0 + num(&r["value"]).abs()));
    assert!(num(&r["oracle"]["duality_gap"]) <= 1e-8);
    assert!(num(&r["oracle"]["certificate_check"]["min_slack"]) >= -1e-8);
    let o = report(&["mcot-oracle", &ts[0], &ts[1], &ts[2]]);
    assert_eq!(o["value"], r["oracle"]["value"]);
}

#[test]
fn counterexample_report() {
    let r = report(&["counterexample", "--n", "4"]);
    assert!((num(&r["cost_phi0_construction"]) - 15.5).abs() <= 1e-9);
    assert!((num(&r["cost_canonical_candidate"]) - 0.5).abs() <= 1e-9);
    assert!((num(&r["moment6"]) - 15.0).abs() <= 1e-12);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let a = gen_tree(&dir, "a.json", 1, 3);
    let b = gen_tree(&dir, "b.json", 2, 3);
    let first = cot(&["mcot", &a, &b, "--cost", "aw:1", "--oracle"]);
    let second = cot(&["mcot", &a, &b, "--cost", "aw:1", "--oracle"]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    let timed = report(&["mcot", &a, &b, "--timing"]);
    assert!(timed["timing"]["seconds"].is_number());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let a = gen_tree(&dir, "a.json", 4, 3);
    let bad = write(&dir, "bad.json", &json!({"horizon": 1, "levels": [[{"id": "a", "parent": null, "p": 0.7, "x": [0.0]}]]}));
    assert_eq!(cot(&["awdist", &a, &bad]).status.code(), Some(2));
    assert_eq!(cot(&["awdist", &a, "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(cot(&["mcot", &a, &a, "--cost", "bogus"]).status.code(), Some(2));
    assert_eq!(cot(&["mcot", &a, &a, "--budget", "1"]).status.code(), Some(3));
    assert_eq!(cot(&["counterexample", "--n", "2"]).status.code(), Some(2));
    assert_eq!(cot(&["no-such-command"]).status.code(), Some(2));
    let out = cot(&["mcot", &a, &a, "--budget", "1"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}

fn fair_tree(tag: &str) -> Value {
    let mut v = binary_tree(tag, 0.5, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    for node in v["levels"][1].as_array_mut().unwrap() {
        node["p"] = json!(0.5);
    }
    v
}

#[test]
fn coupling_verification_names_the_anticipating_step() {
    let dir = TempDir::new().unwrap();
    let x = write(&dir, "x.json", &fair_tree("x"));
    let y = write(&dir, "y.json", &fair_tree("y"));
    let ids_x = ["xuu", "xud", "xdu", "xdd"];
    let ids_y = ["yuu", "yud", "ydu", "ydd"];
    let mut entries = Vec::new();
    for a in ids_x {
        for b in ids_y {
            entries.push(json!([[a, b], 0.0625]));
        }
    }
    let product = write(&dir, "product.json", &json!({ "entries": entries }));
    let r = report(&["verify-coupling", &product, &x, &y]);
    assert_eq!(r["verification"]["pass"], true);

    // y's first step copies x's second step, y's second step copies x's first
    let anticipating = write(
        &dir,
        "anticipating.json",
        &json!({"entries": [
            [["xuu", "yuu"], 0.25], [["xud", "ydu"], 0.25],
            [["xdu", "yud"], 0.25], [["xdd", "ydd"], 0.25]
        ]}),
    );
    let r = report(&["verify-coupling", &anticipating, &x, &y]);
    assert_eq!(r["verification"]["pass"], false);
    let witnesses = r["verification"]["witnesses"].as_array().unwrap();
    assert!(!witnesses.is_empty());
    assert!(witnesses.iter().all(|w| w["time"] == 2 && w["conditioning_time"] == 1));
}

#[test]
fn barycenter_commands() {
    let dir = TempDir::new().unwrap();
    let a = gen_tree(&dir, "a.json", 30, 2);
    let b = gen_tree(&dir, "b.json", 31, 2);
    let task = gen_tree(&dir, "task.json", 32, 3);
    let bc = report(&["bary-bc", &a, &b, "--weights", "0.3,0.7"]);
    assert!((num(&bc["value"]) - num(&bc["attained_value"])).abs() <= 1e-8 * (1.0 + num(&bc["value"]).abs()));
    assert_eq!(bc["verification"]["pass"], true);
    let median = report(&["bary-bc", &a, &b, "--p", "1"]);
    assert!(num(&median["value"]) >= 0.0);
    let causal = report(&["bary-c", &a, &b, "--task", &task]);
    assert!(num(&causal["duality_gap"]) <= 1e-8);
    assert_eq!(causal["certificate_check"]["clearing_exact"], true);
    let anti = report(&["bary-anticausal", &a, &b, "--task", &task]);
    assert!(num(&anti["value"]) <= num(&causal["value"]) + 1e-8);
}

#[test]
fn matching_from_cost_terms_and_from_matrices() {
    let dir = TempDir::new().unwrap();
    let tree = |tag: &str, p: f64| binary_tree(tag, p, [1.0, 0.0, 1.5, 0.5, 0.2, -0.4]);
    let terms = json!({
        "principal": tree("p", 0.4),
        "utility": [{"kind": "power", "lambda": -1.0, "p": 2.0}, {"kind": "power", "lambda": -1.0, "p": 2.0}],
        "agents": [
            {"tree": tree("a", 0.6), "cost": [{"kind": "power", "lambda": 1.0, "p": 1.0}, {"kind": "power", "lambda": 1.0, "p": 1.0}]},
            {"tree": tree("b", 0.3), "cost": [{"kind": "power", "lambda": 2.0, "p": 2.0}, {"kind": "power", "lambda": 2.0, "p": 2.0}]}
        ],
        "tasks": binary_tree("t", 0.5, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    });
    let r = report(&["match", &write(&dir, "terms.json", &terms)]);
    assert_eq!(r["verification"]["pass"], true);
    assert!(num(&r["duality_gap"]) <= 1e-8);

    let costs: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|i| (0..4).map(|k| (0..4).map(|y| ((i * 7 + k * 3 + y) % 5) as f64 - 2.0).collect()).collect())
        .collect();
    let matrices = json!({"trees": [tree("p", 0.4), tree("a", 0.7)], "tasks": tree("t", 0.5), "costs": costs});
    let r = report(&["match", &write(&dir, "matrices.json", &matrices)]);
    assert_eq!(r["verification"]["pass"], true);
}

#[test]
fn text_format_and_output_file() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("report.txt");
    let out = cot(&["counterexample", "--format", "text", "--output", out_path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(Path::new(&out_path)).unwrap();
    assert!(text.contains("schema: \"1\""));
    assert!(text.contains("cost_phi0_construction: 15.5"));
}

#[test]
fn generated_trees_depend_only_on_the_seed() {
    let a = cot(&["gen-tree", "--seed", "9", "--horizon", "3"]);
    let b = cot(&["gen-tree", "--seed", "9", "--horizon", "3"]);
    let c = cot(&["gen-tree", "--seed", "10", "--horizon", "3"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["horizon"], 3);
}
