use std::path::Path;
use std::process::{Command, Output};

fn hcnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_suite(dir: &Path) {
    let o = hcnet(
        &["generate-hypercycle", "--out", "hc", "--nodes", "8,12", "--arities", "3,4", "--ratio", "0.5", "--seed", "2"],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hcnet(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(hcnet(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(hcnet(&["--help"], dir.path()).status.code(), Some(0));
    let o = hcnet(&["train", "--data", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.txt"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_suite(dir.path());
    std::fs::write(dir.path().join("bad.toml"), "epochs = 1\nwidth = 3\n").unwrap();
    let o = hcnet(&["train", "--data", "hc", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn train_then_evaluate_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    small_suite(dir.path());
    std::fs::write(dir.path().join("c.toml"), "dim = 8\nlayers = 3\nepochs = 2\n").unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        let o = hcnet(&["train", "--data", "hc", "--config", "c.toml", "--seed", "5", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));

    let log = String::from_utf8(read("a.ckpt.log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "loss", "val_mrr", "timestamp"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    let echo = String::from_utf8(read("a.ckpt.config.toml")).unwrap();
    assert!(echo.contains("seed = 5") && echo.contains("dim = 8"));

    let first = hcnet(&["evaluate", "--checkpoint", "a.ckpt", "--data", "hc"], dir.path());
    let second = hcnet(&["evaluate", "--checkpoint", "a.ckpt", "--data", "hc", "--out", "r.json"], dir.path());
    assert!(first.status.success());
    assert_eq!(stdout(&first), stdout(&second));
    let report: serde_json::Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert!(report["pairwise_accuracy"].as_f64().is_some());
    assert!(report["ranking"]["mrr"].as_f64().unwrap() > 0.0);
    assert!(report["ranking"]["per_arity"]["2"].is_object());
}

#[test]
fn refine_and_logic_output_formats() {
    let dir = tempfile::tempdir().unwrap();
    small_suite(dir.path());
    let inst = std::fs::read_dir(dir.path().join("hc/train")).unwrap().next().unwrap().unwrap().path();
    let inst = inst.to_str().unwrap();

    let o = hcnet(&["refine", "--data", inst, "--rounds", "2"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 3));
    assert_eq!(rows[0][0], "0");
    assert_eq!(rows.last().unwrap()[0], "2");

    let o = hcnet(&["refine", "--data", inst, "--query", "r0 x0 ?", "--rounds", "3"], dir.path());
    assert!(o.status.success());
    let last: Vec<(String, String)> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("3\t"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].to_string(), f[2].to_string())
        })
        .collect();
    let color = |n: &str| last.iter().find(|(m, _)| m == n).unwrap().1.clone();
    assert_ne!(color("x0"), color("x1"));

    let o = hcnet(&["refine", "--data", inst, "--query", "r0 x0 x1"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = hcnet(&["logic", "eval", "--data", inst, "--formula", "exists>=1 r1@1 [2:color(default)]"], dir.path());
    assert!(o.status.success());
    // Even-indexed nodes start an r1 edge.
    assert!(stdout(&o).lines().any(|l| l == "x0\ttrue"));
    assert!(stdout(&o).lines().any(|l| l == "x1\tfalse"));

    let o = hcnet(&["logic", "compile", "--data", inst, "--formula", "not color(default)", "--run"], dir.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["dim"], 2);
    assert_eq!(v["outputs"]["x0"], serde_json::json!([1, 0]));

    let o = hcnet(&["logic", "eval", "--data", inst, "--formula", "exists>=1 r1@9 []"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcnet(&["gradcheck", "--instances", "2", "--seed", "3"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("[PASS]"));
}

#[test]
fn theorem_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcnet(&["theorem-suite", "--seed", "7", "--json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: Vec<serde_json::Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.len() >= 7);
    assert!(v.iter().all(|c| c["passed"] == true));
}
