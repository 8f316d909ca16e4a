use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn jodp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jodp"))
        .current_dir(dir)
        .env("JODP_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace(env: &str, task: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("env.json"), env).unwrap();
    fs::write(dir.path().join("task.json"), task).unwrap();
    dir
}

const OPEN_6X6: &str = r#"{"width": 6, "height": 6, "obstacles": [[2, 2], [3, 2]]}"#;

const DEMO: &str = r#"{"goals": [
    {"name": "a", "types": ["a"], "ground": [5, 0]},
    {"name": "b", "types": ["b"], "ground": [0, 5]},
    {"name": "c", "types": ["c"], "ground": [5, 5]}
]}"#;

#[test]
fn three_goal_demo_completes() {
    let dir = workspace(OPEN_6X6, DEMO);
    let out = jodp(
        dir.path(),
        &["solve", "--env", "env.json", "--task", "task.json", "--solution-out", "sol.json", "--trace-out", "trace.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = stdout_json(&out);
    assert_eq!(report["status"], "feasible");
    assert_eq!(report["trace"]["completed"], true);
    assert_eq!(report["trace"]["goal_order"].as_array().unwrap().len(), 3);
    let sol: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sol.json")).unwrap()).unwrap();
    assert_eq!(sol["layout"]["dim"], 8 * 3 * 3);
    assert!(sol["iterations"].as_u64().unwrap() <= 3);

    let out = jodp(
        dir.path(),
        &["rollout", "--env", "env.json", "--task", "task.json", "--solution", "sol.json", "--sample", "--seed", "9"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["periods"].as_array().unwrap().len(), 3);
}

#[test]
fn cyclic_orderings_exit_with_infeasible_status() {
    let task = r#"{"goals": [
        {"name": "a", "types": ["x"], "ground": [5, 0]},
        {"name": "b", "types": ["y"], "ground": [0, 5]}
    ], "type_orderings": [["x", "y"], ["y", "x"]]}"#;
    let dir = workspace(OPEN_6X6, task);
    let out = jodp(dir.path(), &["solve", "--env", "env.json", "--task", "task.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["status"], "infeasible");
    assert!(stderr(&out).contains("infeasible"));
}

#[test]
fn axe_before_wood() {
    let env = r#"{"width": 8, "height": 8, "obstacles": [[4, 2], [4, 3], [4, 4]]}"#;
    let task = r#"{"goals": [
        {"name": "axe", "types": ["axe"], "ground": [7, 7]},
        {"name": "wood", "types": ["wood"], "ground": [1, 0]},
        {"name": "water", "types": ["water"], "ground": [0, 1]}
    ], "type_orderings": [["axe", "wood"]]}"#;
    let dir = workspace(env, task);
    let out = jodp(dir.path(), &["solve", "--env", "env.json", "--task", "task.json", "--cost-c", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let order: Vec<String> = stdout_json(&out)["trace"]["goal_order"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let pos = |n: &str| order.iter().position(|o| o == n).unwrap();
    assert!(pos("axe") < pos("wood"), "{order:?}");
}

#[test]
fn reground_without_bundle_asks_for_an_ensemble() {
    let dir = workspace(OPEN_6X6, DEMO);
    fs::write(dir.path().join("g.json"), "[[0, 0], [1, 1], [4, 4]]").unwrap();
    for extra in [&[][..], &["--ensemble", "missing.json"][..]] {
        let mut args = vec!["reground", "--env", "env.json", "--task", "task.json", "--grounding", "g.json"];
        args.extend_from_slice(extra);
        let out = jodp(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1));
        assert!(stderr(&out).contains("build ensemble first"), "{}", stderr(&out));
    }
}

#[test]
fn reground_with_complete_bundle_performs_no_policy_solves() {
    let dir = workspace(OPEN_6X6, DEMO);
    fs::write(dir.path().join("g.json"), r#"{"a": [0, 0], "b": [1, 1], "c": [4, 4]}"#).unwrap();
    let out = jodp(dir.path(), &["build-ensemble", "--env", "env.json", "--complete", "-o", "ens.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["members"], 34);
    let out = jodp(
        dir.path(),
        &[
            "reground", "--env", "env.json", "--task", "task.json", "--ensemble", "ens.json", "--grounding", "g.json",
            "--task-out", "task2.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = stdout_json(&out);
    assert_eq!(report["salmdp_solves"], 0);
    assert_eq!(report["absorption_solves"], 0);
    let moved: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("task2.json")).unwrap()).unwrap();
    assert_eq!(moved["goals"][2]["ground"], serde_json::json!([4, 4]));

    // A grounded-only bundle cannot serve a new grounding.
    let out = jodp(dir.path(), &["build-ensemble", "--env", "env.json", "--task", "task.json", "-o", "small.json"]);
    assert_eq!(out.status.code(), Some(0));
    let out = jodp(
        dir.path(),
        &["reground", "--env", "env.json", "--task", "task.json", "--ensemble", "small.json", "--grounding", "g.json"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("build ensemble first"));
}

#[test]
fn render_draws_one_polyline_per_period() {
    let dir = workspace(r#"{"width": 5, "height": 5}"#, DEMO.replace('5', "4").as_str());
    let out = jodp(dir.path(), &["solve", "--env", "env.json", "--task", "task.json", "--trace-out", "trace.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = jodp(dir.path(), &["render", "--env", "env.json", "--task", "task.json", "--trace", "trace.json"]);
    assert_eq!(out.status.code(), Some(0));
    let svg = String::from_utf8(out.stdout).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 3);
    let out = jodp(
        dir.path(),
        &["render", "--env", "env.json", "--task", "task.json", "--trace", "trace.json", "--format", "ascii"],
    );
    let ascii = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ascii.lines().count(), 5);
    assert!(ascii.starts_with('S'));
}

#[test]
fn identical_configs_are_tc_gie_with_unit_gamma() {
    let dir = workspace(OPEN_6X6, DEMO);
    let out = jodp(dir.path(), &["check-gie", "--env", "env.json", "--task1", "task.json", "--task2", "task.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = stdout_json(&out);
    assert_eq!(r["verdict"], "tcGIE");
    assert_eq!(r["gamma"], 1.0);
    assert_eq!(r["k_equal"], true);
    assert_eq!(r["s1"], r["s2"]);
}

#[test]
fn single_point_bench_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{"kind": "scaling", "id": "one", "grids": [6], "goal_counts": [2], "orderings": 1,
                   "solvers": ["GS"], "seed": 5, "episodes": 2}"#;
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    let out = jodp(dir.path(), &["bench", "--spec", "spec.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rows.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "experiment", "solver", "n_goals", "grid", "orderings", "wall_time_s", "ensemble_time_s", "iterations",
            "satisfied", "seed", "censored"
        ]
    );
    let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 1);
    assert_eq!(&records[0][1], "GS");
    assert_eq!(&records[0][8], "true");

    let out = jodp(dir.path(), &["bench", "--spec", "spec.json", "--format", "json", "-o", "out.json"]);
    assert_eq!(out.status.code(), Some(0));
    let rows: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
}

#[test]
fn malformed_files_report_their_position() {
    let dir = workspace("{\"width\": 4,\n \"height\": \"four\"}", DEMO);
    let out = jodp(dir.path(), &["solve", "--env", "env.json", "--task", "task.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("env.json") && err.contains("line"), "{err}");

    let dir = workspace(OPEN_6X6, r#"{"goals": [{"name": "a", "ground": [2, 2]}]}"#);
    let out = jodp(dir.path(), &["solve", "--env", "env.json", "--task", "task.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("obstacle"), "{}", stderr(&out));
}

#[test]
fn gen_env_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str, task: &'static str| {
        [
            "gen-env", "--width", "9", "--height", "7", "--obstacle-density", "0.2", "--goals", "4", "--orderings", "2",
            "--task-out", task, "-o", out, "--seed", "11",
        ]
    };
    assert_eq!(jodp(dir.path(), &args("e1.json", "t1.json")).status.code(), Some(0));
    assert_eq!(jodp(dir.path(), &args("e2.json", "t2.json")).status.code(), Some(0));
    let read = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("e1.json"), read("e2.json"));
    assert_eq!(read("t1.json"), read("t2.json"));
    let t: Value = serde_json::from_str(&read("t1.json")).unwrap();
    assert_eq!(t["goals"].as_array().unwrap().len(), 4);
    assert_eq!(t["type_orderings"].as_array().unwrap().len(), 2);
}
