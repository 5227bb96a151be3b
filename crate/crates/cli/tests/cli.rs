use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use twistor_core::modes::{torus_mode_kernel, ModeOperator};
use twistor_core::FactorSpec;

const FLAT: &str = r#"{
  "version": 1,
  "seed": 3,
  "scenarios": [{
    "name": "flat",
    "factors": [{"kind": "torus", "dim": 2}, {"kind": "torus", "dim": 1}],
    "degrees": [1],
    "suites": ["theorem1", "proposition2"]
  }]
}"#;

const COARSE: &str = r#"{
  "version": 1,
  "scenarios": [{
    "name": "coarse",
    "factors": [{"kind": "sphere", "resolution": [4, 8]}, {"kind": "torus", "dim": 1}],
    "degrees": [1],
    "suites": ["theorem1"]
  }]
}"#;

fn twistor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twistor"))
        .args(args)
        .output()
        .expect("spawn twistor")
}

fn run_config(dir: &Path, text: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join("config.json");
    fs::write(&cfg, text).unwrap();
    let out = dir.join("out");
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (twistor(&args), out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn validate_reports(out: &Path) -> usize {
    let schema: Value = serde_json::from_str(include_str!("../schema/report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let mut n = 0;
    for entry in fs::read_dir(out).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let doc = read_json(&path);
            let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
            assert!(errors.is_empty(), "{}: {errors:?}", path.display());
            n += 1;
        }
    }
    n
}

#[test]
fn flat_product_passes_and_writes_valid_reports() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_config(dir.path(), FLAT, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(validate_reports(&out), 2);
    let doc = read_json(&out.join("theorem1-flat.json"));
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["runs"][0]["report"]["dimensions"]["twistor[p=1]"], 3);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("timings.csv").exists());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("theorem1") && table.contains("proposition2"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let text = FLAT.replace(
        r#""suites": ["theorem1", "proposition2"]"#,
        r#""suites": ["identities"]"#,
    );
    let (a, out_a) = run_config(dir.path(), &text, &[]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let first = fs::read(out_a.join("identities-flat.json")).unwrap();
    let summary = fs::read(out_a.join("summary.csv")).unwrap();
    fs::remove_dir_all(&out_a).unwrap();
    let (b, out_b) = run_config(dir.path(), &text, &["--max-threads", "1"]);
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    assert_eq!(fs::read(out_b.join("identities-flat.json")).unwrap(), first);
    assert_eq!(fs::read(out_b.join("summary.csv")).unwrap(), summary);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let text = FLAT.replace(
        r#""suites": ["theorem1", "proposition2"]"#,
        r#""suites": ["identities"]"#,
    );
    let (o, out) = run_config(dir.path(), &text, &["--seed", "41"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = read_json(&out.join("identities-flat.json"));
    assert_eq!(doc["options"]["seed"], 41);
}

#[test]
fn unresolved_sphere_reports_ambiguous_rank() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_config(dir.path(), COARSE, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(validate_reports(&out), 1);
    let doc = read_json(&out.join("theorem1-coarse.json"));
    let run = &doc["runs"][0];
    assert_eq!(run["verdict"], "ambiguous_rank");
    let kernel = &run["error"]["kernel"];
    assert!(kernel["gap"].as_f64().unwrap() < kernel["min_gap"].as_f64().unwrap());
    assert!(!kernel["singular_values"].as_array().unwrap().is_empty());
}

#[test]
fn missing_config_exits_3() {
    let o = twistor(&["--config", "/nonexistent/twistor.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_flag_exits_3() {
    assert_eq!(twistor(&["--bogus"]).status.code(), Some(3));
}

#[test]
fn invalid_configs_name_the_field() {
    let cases = [
        (FLAT.replace(r#""degrees": [1]"#, r#""degrees": [0]"#), "degrees"),
        (
            FLAT.replace(r#""kind": "torus", "dim": 2"#, r#""kind": "hyperbolic", "dim": 2"#),
            "factors",
        ),
        (FLAT.replace(r#""version": 1"#, r#""version": 7"#), "version"),
        (FLAT.replace(r#""suites": ["#, r#""suites": ["nope", "#), "suites"),
        (FLAT.replace("\"seed\": 3,", "\"seed\": 3,,"), "line"),
    ];
    for (text, needle) in cases {
        let dir = TempDir::new().unwrap();
        let (o, out) = run_config(dir.path(), &text, &[]);
        assert_eq!(o.status.code(), Some(3), "{text}");
        assert!(stderr(&o).contains(needle), "{needle}: {}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn list_scenarios_prints_default_matrix() {
    let o = twistor(&["--list-scenarios"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    let names: Vec<&str> = text.lines().filter_map(|l| l.split('\t').next()).collect();
    assert_eq!(names, ["t2xt1", "s2xt1", "s2xt2", "s2-conformal"]);
}

fn write_mode_fixture(dir: &Path, total_delta: usize) {
    let factors = vec![FactorSpec::unit_torus(2, 8), FactorSpec::unit_torus(1, 8)];
    let mut table = torus_mode_kernel(&factors, ModeOperator::Killing, 1, 2).unwrap();
    table.total += total_delta;
    let fx = json!({
        "version": 1,
        "name": "t3-killing",
        "manifold": {"factors": factors, "conformal_exponent": null},
        "kind": "mode_table",
        "dimension": table.total,
        "derivation": "symbolic",
        "mode_table": table,
    });
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("t3-killing.json"), fx.to_string()).unwrap();
}

#[test]
fn oracle_fixtures_are_cross_checked() {
    let dir = TempDir::new().unwrap();
    let text = FLAT.replace(r#""suites": ["theorem1", "proposition2"]"#, r#""suites": ["theorem1"]"#);
    let fixtures = dir.path().join("fixtures");
    write_mode_fixture(&fixtures, 0);
    let (o, out) = run_config(dir.path(), &text, &["--oracle-fixtures", fixtures.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = read_json(&out.join("theorem1-flat.json"));
    assert_eq!(doc["options"]["fixtures"], json!(["t3-killing"]));
    let checks = doc["runs"][0]["report"]["checks"].as_array().unwrap();
    let check = checks
        .iter()
        .find(|c| c["name"] == "fixture_mode_table[t3-killing]")
        .unwrap();
    assert_eq!(check["passed"], true);

    write_mode_fixture(&fixtures, 1);
    fs::remove_dir_all(&out).unwrap();
    let (o, _) = run_config(dir.path(), &text, &["--oracle-fixtures", fixtures.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn malformed_fixture_directory_exits_3() {
    let dir = TempDir::new().unwrap();
    let fixtures = dir.path().join("fixtures");
    fs::create_dir_all(&fixtures).unwrap();
    fs::write(fixtures.join("x.json"), r#"{"version": 1, "kind": "unicorn"}"#).unwrap();
    let (o, _) = run_config(dir.path(), FLAT, &["--oracle-fixtures", fixtures.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
