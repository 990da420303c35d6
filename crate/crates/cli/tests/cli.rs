use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_easyspec")).args(args).env_remove("ESPEC_WORKERS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bench_reports_both_tree_algorithms() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "bench", "--algorithms", "easyspec,sd_tree", "--n", "5", "--lp", "4", "--widths", "4,4,4,4,4",
        "--prompts", "2", "--max-new-tokens", "6", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("algorithm,"));
    assert!(lines[1].starts_with("easyspec,5,4,"));
    assert!(lines[2].starts_with("sd_tree,5,1,"));
    assert_eq!(std::fs::read_to_string(dir.path().join("bench.csv")).unwrap(), text);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}

#[test]
fn simulate_grid_shape() {
    let o = run(&["simulate", "--lp", "1..5", "--widths", "1,4,8,12", "--alpha", "0.7"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i % 5 + 1).to_string());
        assert_eq!(r[1], [1, 4, 8, 12][i / 5].to_string());
        assert_eq!(r[2], "0.7");
    }
}

#[test]
fn simulate_alpha_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("alpha.csv");
    std::fs::write(&csv, "lp_size,alpha\n1,0.9\n2,0.5\n").unwrap();
    let o = run(&["simulate", "--lp", "1,2", "--widths", "4", "--alpha-csv", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let alphas: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(alphas, ["0.9", "0.5"]);
    let o = run(&["simulate", "--lp", "1..3", "--alpha-csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_lossless_passes() {
    let o = run(&["check_lossless", "--vocab", "8", "--trials", "1000", "--samples", "20000"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 4);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["generate", "--prompt", "x", "--base-layers", "4", "--keep-layers", "3", "--lp", "9"]).status.code(), Some(1));
    assert_eq!(run(&["generate", "--prompt", "x", "--base", "/nonexistent/b", "--draft", "/nonexistent/d"]).status.code(), Some(2));
    assert_eq!(run(&["--config", "/nonexistent.json", "simulate"]).status.code(), Some(1));
}

#[test]
fn init_then_generate_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["init", "--base-layers", "4", "--keep-layers", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let base = dir.path().join("base.espec");
    let draft = dir.path().join("draft.espec");
    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--prompt", "the ", "--lp", "1", "--max-new-tokens", "10"];
        args.extend_from_slice(extra);
        run(&args)
    };
    let from_files = gen(&["--base", base.to_str().unwrap(), "--draft", draft.to_str().unwrap()]);
    let seeded = gen(&["--base-layers", "4", "--keep-layers", "3"]);
    assert!(from_files.status.success(), "{}", String::from_utf8_lossy(&from_files.stderr));
    assert_eq!(stdout(&from_files), stdout(&seeded));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"run": {"n": 2, "max_new_tokens": 4}, "bench": {"algorithms": ["sd"], "prompts": 1}}"#).unwrap();
    let path = cfg.to_str().unwrap();
    let o = run(&["--config", path, "bench", "--base-layers", "4", "--keep-layers", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("sd,2,"));
    let o = run(&["--config", path, "bench", "--base-layers", "4", "--keep-layers", "3", "--n", "3"]);
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("sd,3,"));
    std::fs::write(&cfg, r#"{"run": {"bogus": 1}}"#).unwrap();
    assert_eq!(run(&["--config", path, "simulate"]).status.code(), Some(1));
}

#[test]
fn generate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "generate", "--prompt", "a cat", "--algorithm", "easyspec", "--base-layers", "6", "--keep-layers", "4",
        "--lp", "2", "--n", "3", "--max-new-tokens", "8", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&dir.path().join("occupancy.csv")).exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["algorithm"], "easyspec");
}
