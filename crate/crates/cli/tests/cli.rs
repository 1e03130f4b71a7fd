//! End-to-end checks of the binary: exit codes, report plumbing, and the
//! flags that change behavior rather than numbers.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hfmdp"))
}

fn model_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON report")
}

#[test]
fn validate_passes_a_clean_model_and_plan_emits_a_schema_versioned_report() {
    let model = model_path("engine.hmdp");
    let report = stdout_json(&run(&["validate", "--model", model.to_str().unwrap()]));
    assert_eq!(report["schema"], "hfmdp-report/1");
    assert_eq!(report["validation"]["valid"], true);

    let report = stdout_json(&run(&["plan", "--model", model.to_str().unwrap()]));
    assert_eq!(report["command"], "plan");
    assert!(report["plan"]["objective"].as_f64().unwrap().is_finite());
    assert!(report["plan"]["rounds"].as_u64().unwrap() >= 2);
}

#[test]
fn a_missing_model_and_a_malformed_model_exit_two() {
    let out = run(&["plan", "--model", "/nonexistent/no-such.hmdp"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("hfmdp:"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.hmdp");
    std::fs::write(&path, "hfmdp 1\ndiscount 0.9\nsubsystem A {").unwrap();
    let out = run(&["plan", "--model", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    // the diagnostic carries a location
    assert!(String::from_utf8_lossy(&out.stderr).contains(':'));
}

#[test]
fn an_inconsistent_model_exits_three_and_reports_the_violations() {
    // Two owners of x that disagree about where it goes next.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("disagree.hmdp");
    std::fs::write(
        &path,
        "hfmdp 1\ndiscount 0.9\nvar x 0 1\nvar a 0 1\n\
         subsystem A { internal x external a reward dense { 0 0 0 0 } cpt dense { 1 0 0 1 1 0 0 1 } }\n\
         subsystem B { internal x reward dense { 0 1 } cpt dense { 0.5 0.5 0.5 0.5 } }\n\
         tree { A B -> A }\n",
    )
    .unwrap();
    for cmd in ["validate", "plan"] {
        let out = run(&[cmd, "--model", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(3), "{} should refuse the model", cmd);
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["validation"]["valid"], false);
        let kinds: Vec<&str> = report["validation"]["violations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v["kind"].as_str().unwrap())
            .collect();
        assert!(kinds.iter().all(|k| *k == "inconsistent-dynamics"), "kinds: {:?}", kinds);
        // a planning report is refused outright, not emitted half-built
        assert!(report.get("plan").is_none() || report["plan"].is_null());
    }
}

#[test]
fn an_unreachable_round_budget_exits_four() {
    let model = model_path("tandem.hmdp");
    let out = run(&["plan", "--model", model.to_str().unwrap(), "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hfmdp:"));
}

#[test]
fn an_oracle_cap_too_small_for_the_joint_space_exits_five() {
    let model = model_path("tandem.hmdp");
    let out = run(&["compare", "--model", model.to_str().unwrap(), "--oracle-cap", "1"]);
    assert_eq!(out.status.code(), Some(5));
    let out = run(&[
        "execute",
        "--model",
        model.to_str().unwrap(),
        "--horizon",
        "3",
        "--oracle-cap",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn out_flag_writes_exactly_the_stdout_bytes() {
    let model = model_path("engine.hmdp");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let to_file = run(&[
        "plan",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(to_file.status.success());
    assert!(to_file.stdout.is_empty());
    let to_stdout = run(&["plan", "--model", model.to_str().unwrap(), "--seed", "0"]);
    assert_eq!(std::fs::read(&path).unwrap(), to_stdout.stdout);
}

#[test]
fn every_schedule_reaches_the_same_objective() {
    let model = model_path("engine.hmdp");
    let objective = |args: &[&str]| {
        let mut all = vec!["plan", "--model", model.to_str().unwrap()];
        all.extend_from_slice(args);
        stdout_json(&run(&all))["plan"]["objective"].as_f64().unwrap()
    };
    let sync = objective(&["--schedule", "sync"]);
    let leaves = objective(&["--schedule", "leaves-first"]);
    let random = objective(&["--schedule", "random", "--seed", "7"]);
    assert!((sync - leaves).abs() <= 1e-6, "sync {} vs leaves-first {}", sync, leaves);
    assert!((sync - random).abs() <= 1e-6, "sync {} vs random {}", sync, random);
}

#[test]
fn compare_recovers_the_known_exact_values_on_the_bundled_pair() {
    let model = model_path("tandem.hmdp");
    let report = stdout_json(&run(&["compare", "--model", model.to_str().unwrap()]));
    let oracle = &report["oracle"];
    assert!(oracle["objective_delta"].as_f64().unwrap().abs() <= 1e-6);
    let exact = oracle["exact"]["joint_values"].as_array().unwrap();
    let want = [54.0, 64.0, 60.0, 70.0];
    for (got, want) in exact.iter().zip(want) {
        assert!((got.as_f64().unwrap() - want).abs() <= 1e-6);
    }
    assert!(oracle["exact"]["objective_delta"].as_f64().unwrap().abs() <= 1e-6);
}

#[test]
fn execute_reproduces_episodes_for_a_fixed_seed_and_varies_across_seeds() {
    let model = model_path("engine.hmdp");
    let args = |seed: &str| {
        vec![
            "execute".to_string(),
            "--model".to_string(),
            model.to_str().unwrap().to_string(),
            "--horizon".to_string(),
            "4".to_string(),
            "--episodes".to_string(),
            "3".to_string(),
            "--seed".to_string(),
            seed.to_string(),
        ]
    };
    let run_args = |a: &[String]| run(&a.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let first = run_args(&args("11"));
    let second = run_args(&args("11"));
    assert_eq!(first.stdout, second.stdout);
    let report = stdout_json(&first);
    let episodes = report["episodes"]["episodes"].as_array().unwrap();
    assert_eq!(episodes.len(), 3);
    assert_eq!(episodes[0]["steps"].as_array().unwrap().len(), 4);
    let other = run_args(&args("12"));
    assert_ne!(first.stdout, other.stdout);
}

#[test]
fn timing_is_opt_in_so_default_reports_stay_reproducible() {
    let model = model_path("tandem.hmdp");
    let plain = stdout_json(&run(&["plan", "--model", model.to_str().unwrap()]));
    assert!(plain.get("timing").is_none() || plain["timing"].is_null());
    let timed = stdout_json(&run(&["plan", "--model", model.to_str().unwrap(), "--timing"]));
    assert!(timed["timing"]["total_ms"].is_number());
}

#[test]
fn bundled_models_are_fixpoints_of_parse_then_serialize() {
    for name in ["tandem.hmdp", "engine.hmdp", "duplex.hmdp"] {
        let text = std::fs::read_to_string(model_path(name)).unwrap();
        let parsed = hfmdp::modelfile::parse_model(&text).unwrap();
        let canonical = hfmdp::modelfile::serialize_model(&parsed.tree, &parsed.weights);
        let reparsed = hfmdp::modelfile::parse_model(&canonical).unwrap();
        let again = hfmdp::modelfile::serialize_model(&reparsed.tree, &reparsed.weights);
        assert_eq!(canonical, again, "{} does not canonicalize to a fixpoint", name);
    }
}
