//! End-to-end runs of the command-line binary: report contents, exit codes,
//! artifact files, and byte-level determinism.

use std::process::{Command, Output};

fn flatctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatctl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn tmpdir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("flatctl-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

// ---- analyze -----------------------------------------------------------

#[test]
fn analyze_academic_reports_the_staged_structure() {
    let out = flatctl(&["analyze", "builtin:academic"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("stage form (1,2 | 2 | 5)"));
    assert!(text.contains("|kappa| = 10 = n = 10"));
    assert!(text.contains("kappa <= R = (4,3,5,5): yes"));
    assert!(text.contains("differential independence: expected rank 17"));
    assert!(text.contains("-> pass"));
}

#[test]
fn analyze_crane_reports_the_staged_structure() {
    let out = flatctl(&["analyze", "builtin:crane"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("stage form (2 | 4,4)"));
    assert!(text.contains("kappa = (4,4,2)"));
    assert!(text.contains("differential independence: expected rank 12"));
}

#[test]
fn analyze_writes_a_machine_readable_plan() {
    let dir = tmpdir("plan");
    let out = flatctl(&["analyze", "builtin:academic", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["kappa"], serde_json::json!([1, 2, 2, 5]));
    assert_eq!(plan["kappa_total"], 10);
    assert_eq!(plan["stages"].as_array().unwrap().len(), 3);
    assert_eq!(plan["outputs"][0]["chain"][0], "x1");
    std::fs::remove_dir_all(&dir).unwrap();
}

// ---- synthesize --------------------------------------------------------

#[test]
fn synthesize_academic_prints_the_closed_forms() {
    let out = flatctl(&["synthesize", "builtin:academic"]);
    assert!(out.status.success());
    let text = stdout(&out);
    // the stage-2 feedback from the staged construction
    assert!(text.contains("u2 = v2_1 - x4*v1_1@1"));
    assert!(text.contains("u3 = -v2_1 + v1_2 - x10 + x4*v1_1@1"));
    // the fully substituted tracking law over state and reference jets
    assert!(text.contains("closed form over (x, y^d-jets):"));
    assert!(text.contains("u1 = y1d@1 - 2*x1 + 2*y1d"));
}

#[test]
fn synthesize_crane_reports_implicit_stage_solutions() {
    let out = flatctl(&["synthesize", "builtin:crane"]);
    assert!(out.status.success());
    let text = stdout(&out);
    // mass-matrix stages are solved per evaluation, not expanded symbolically
    assert!(text.contains("[implicit stage solution"));
    assert!(text.contains("u1 = F("));
}

// ---- error paths -------------------------------------------------------

#[test]
fn malformed_system_file_is_an_input_error() {
    let dir = tmpdir("bad");
    std::fs::create_dir_all(&dir).unwrap();
    let file = dir.join("bad.sys");
    std::fs::write(&file, "garbage [[[\n").unwrap();
    let out = flatctl(&["analyze", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("content outside of a section"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_builtin_is_an_input_error() {
    let out = flatctl(&["verify", "builtin:nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown builtin system"));
}

#[test]
fn coarse_step_fails_verification_with_exit_one() {
    let out = flatctl(&["verify", "builtin:academic", "--dt", "1e-1"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAIL"));
    assert!(text.contains("VERIFICATION FAILED"));
}

// ---- simulate ----------------------------------------------------------

#[test]
fn simulate_writes_trace_and_plot() {
    let dir = tmpdir("sim");
    let out = flatctl(&[
        "simulate",
        "builtin:academic",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(csv.starts_with(
        "t,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,u1,u2,u3,u4,y1,y2,y3,y4,yd1,yd2,yd3,yd4,e1,e2,e3,e4\n"
    ));
    let cols = csv.lines().nth(1).unwrap().split(',').count();
    assert_eq!(cols, 1 + 10 + 4 + 4 + 4 + 4);
    assert!(dir.join("plot.txt").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

// ---- verify ------------------------------------------------------------

#[test]
fn verify_academic_passes_and_is_byte_deterministic() {
    let first = flatctl(&["verify", "builtin:academic", "--seed", "7"]);
    assert!(first.status.success(), "stderr: {}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("PASS  differential independence"));
    assert!(text.contains("PASS  exact-start max |e|"));
    assert!(text.contains("PASS  input-output behavior"));
    assert!(text.contains("PASS  linear error-ODE match"));
    assert!(text.contains("all checks passed"));

    let second = flatctl(&["verify", "builtin:academic", "--seed", "7"]);
    assert_eq!(first.stdout, second.stdout, "same seed, same bytes");

    // the seed can also come from the environment
    let via_env = Command::new(env!("CARGO_BIN_EXE_flatctl"))
        .args(["verify", "builtin:academic"])
        .env("FLATCTL_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(via_env.stdout, first.stdout);
}
