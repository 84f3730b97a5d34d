use std::path::Path;
use std::process::{Command, Output};

fn stdeform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdeform"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn equiv_default_sweep_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("equiv.json");
    let o = stdeform(&["equiv", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    assert_eq!(v["cases"].as_array().unwrap().len(), 96);
    assert!(v["max_abs_diff"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn corrupted_equiv_exits_one() {
    assert_eq!(
        code(&stdeform(&[
            "equiv",
            "--corrupt-weights",
            "--max-t",
            "1",
            "--max-h",
            "2",
            "--max-w",
            "2"
        ])),
        1
    );
}

#[test]
fn equiv_points_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "t = 1\nh = 2\nw = 2\npoints = 3\n").unwrap();
    assert_eq!(
        code(&stdeform(&["equiv", "--config", cfg.to_str().unwrap()])),
        2
    );
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.cfg");
    std::fs::write(&cfg, "haeds = 2\n").unwrap();
    let o = stdeform(&["demo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("haeds"));
}

#[test]
fn missing_config_file_exits_two() {
    assert_eq!(
        code(&stdeform(&["equiv", "--config", "/nonexistent/run.cfg"])),
        2
    );
}

#[test]
fn bad_flag_values_exit_two() {
    assert_eq!(code(&stdeform(&["uniform-init", "--trials", "99"])), 2);
    assert_eq!(code(&stdeform(&["scaling", "--sides", "2,3,4"])), 2);
    assert_eq!(code(&stdeform(&["gradcheck", "--module", "nope"])), 2);
    assert_eq!(code(&stdeform(&["demo", "--format", "xml"])), 2);
}

#[test]
fn scaling_csv_columns_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scaling.csv");
    let o = stdeform(&["scaling", "--format", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for path in ["dense", "deformable"] {
        let text = std::fs::read_to_string(dir.path().join(format!("scaling.{path}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("cells,multiplies,adds,interp_reads"));
        let cells: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(cells, ["8", "27", "64", "125", "216"]);
    }
    assert!(!out.exists());
}

#[test]
fn single_path_emits_one_series() {
    let o = stdeform(&["scaling", "--path", "deformable"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let paths = v["paths"].as_array().unwrap();
    assert_eq!(paths.len(), 1);
    assert_eq!(paths[0]["path"], "deformable");
}

#[test]
fn doubling_points_scales_deformable_counts_by_formula() {
    let run = |k: &str| -> serde_json::Value {
        let o = stdeform(&["scaling", "--path", "deformable", "--points", k]);
        assert_eq!(code(&o), 0);
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let (a, b) = (run("16"), run("32"));
    let slope = |v: &serde_json::Value| v["paths"][0]["slope"].as_f64().unwrap();
    assert!((slope(&a) - slope(&b)).abs() < 1e-9);
    for (p, q) in a["paths"][0]["points"]
        .as_array()
        .unwrap()
        .iter()
        .zip(b["paths"][0]["points"].as_array().unwrap())
    {
        let n = p["cells"].as_u64().unwrap();
        // C = M = 1: n·C² + n·4K + 9n·K + n
        let formula = |k: u64| n + 4 * n * k + 9 * n * k + n;
        assert_eq!(p["multiplies"].as_u64().unwrap(), formula(16));
        assert_eq!(q["multiplies"].as_u64().unwrap(), formula(32));
    }
}

#[test]
fn gradcheck_module_filter() {
    let o = stdeform(&["gradcheck", "--module", "interp", "--instances", "3"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let inst = v["instances"].as_array().unwrap();
    assert_eq!(inst.len(), 3);
    assert!(inst.iter().all(|i| i["module"] == "interp"));
}

#[test]
fn gradcheck_tiny_tolerance_reports_worst_offender() {
    let o = stdeform(&[
        "gradcheck",
        "--module",
        "dense",
        "--instances",
        "2",
        "--tolerance",
        "1e-12",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst dense"));
}

#[test]
fn uniform_zero_logits_is_exactly_zero() {
    let o = stdeform(&["uniform-init", "--zero-logits", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("num_keys,trials,scaled_deviation,max_deviation")
    );
    assert!(lines.all(|l| l.ends_with(",0.0,0.0")));
}

#[test]
fn every_command_repeats_under_a_seed() {
    for args in [
        vec!["demo", "--seed", "7", "--steps", "3"],
        vec!["uniform-init", "--seed", "7", "--sizes", "8,16"],
        vec!["equiv", "--seed", "7", "--max-t", "1"],
        vec!["gradcheck", "--seed", "7", "--instances", "2"],
    ] {
        let (a, b) = (stdeform(&args), stdeform(&args));
        assert!(!a.stdout.is_empty());
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn demo_seed_changes_output_and_config_seed_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("seed.cfg");
    std::fs::write(&cfg, "seed = 7\n").unwrap();
    let from_file = stdeform(&["demo", "--steps", "1", "--config", cfg.to_str().unwrap()]);
    let from_flag = stdeform(&["demo", "--steps", "1", "--seed", "7"]);
    let other = stdeform(&["demo", "--steps", "1", "--seed", "8"]);
    assert_eq!(from_file.stdout, from_flag.stdout);
    assert_ne!(from_flag.stdout, other.stdout);
}

#[test]
fn demo_paper_preset_reports_op_counts() {
    let o = stdeform(&["demo", "--preset", "paper", "--steps", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config"]["heads"], 8);
    assert_eq!(v["config"]["points"], 32);
    assert_eq!(v["config"]["channels"], 384);
    assert!(v["ops"]["encoder"]["multiplies"].as_u64().unwrap() > 0);
    assert!(v["ops"]["decoder"]["multiplies"].as_u64().unwrap() > 0);
}

#[test]
fn demo_csv_is_the_loss_trace() {
    let o = stdeform(&["demo", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("step,loss\n"));
    assert_eq!(text.lines().count(), 22);
}
