use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trialsim::cli::report::CSV_COLUMNS;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trialsim"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

const SMALL: &str = r#"{
  "scenarios": [{"id": "s", "follow_up": "Realistic", "trend": {"Linear": {"a": -0.05}},
                 "effect": {"Constant": {"delta12": -1.5}}}],
  "methods": [
    {"key": "closest12_splines", "selection": "ClosestTo12", "time_adjust": "Splines3DF",
     "effect_model": "Constant", "engine": "OLS_Sandwich"},
    {"key": "wgee_tv", "selection": "All", "time_adjust": "Splines3DF",
     "effect_model": "TimeVaryingSplines3DF", "engine": "WGEE_Independence"}
  ]
}"#;

#[test]
fn shipped_configs_validate() {
    for name in ["table1_realistic", "tableS1_optimal", "tableS2_adjustment", "tableS3_unstructured", "oracle_ramp"] {
        let path = configs().join(format!("{name}.json"));
        let out = run(&["validate", "--config", path.to_str().unwrap()]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let table1 = trialsim::cli::parse_config(&configs().join("table1_realistic.json")).unwrap();
    assert_eq!((table1.scenarios.len(), table1.methods.len()), (3, 12));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = run(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["validate", "--config", "x.json", "--bogus"]).status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = SMALL.replace(r#""follow_up": "Realistic","#, r#""follow_up": "Realistic", "realistic_mix": {"p_optimal": 0.2, "p_first_month": 0.5, "p_usual": 0.2},"#);
    std::fs::write(&path, text).unwrap();
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenarios[0].realistic_mix"));
    assert!(!run(&["validate", "--config", dir.path().join("missing.json").to_str().unwrap()]).status.success());
}

#[test]
fn simulate_is_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.json");
    std::fs::write(&config, SMALL).unwrap();
    let cohort = dir.path().join("cohort.json");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out_path = dir.path().join(format!("out{threads}.csv"));
        let out = run(&[
            "simulate", "--config", config.to_str().unwrap(), "--reps", "4", "--seed", "9",
            "--threads", threads, "--cohort", cohort.to_str().unwrap(), "--out", out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read(&out_path).unwrap());
    }
    assert!(cohort.exists());
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn empty_grid_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("empty.json");
    let text = SMALL.replace(
        r#"[{"id": "s", "follow_up": "Realistic", "trend": {"Linear": {"a": -0.05}},
                 "effect": {"Constant": {"delta12": -1.5}}}]"#,
        "[]",
    );
    std::fs::write(&config, text).unwrap();
    let out = run(&["simulate", "--config", config.to_str().unwrap(), "--reps", "2", "--cohort", dir.path().join("c.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), format!("{}\n", CSV_COLUMNS.join(",")));
}

#[test]
fn cohort_generate_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.json");
    let out = run(&["cohort", "generate", "--size", "500", "--seed", "3", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(trialsim::cohort::Cohort::load(&path).unwrap().size(), 500);
}
