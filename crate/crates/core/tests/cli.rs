use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semanticfl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn train_evaluate_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = cli(&["train", "--preset", "smoke", "--out", run.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let final_acc = summary["final_acc"].as_f64().unwrap();

    let model = run.join("model");
    let o = cli(&["evaluate", "--preset", "smoke", "--checkpoint", model.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["test_acc"].as_f64().unwrap(), final_acc);

    let o = cli(&["plot", "--dir", run.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    for f in ["accuracy.svg", "tsne.svg", "tsne.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn partition_and_extract_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let part = dir.path().join("p.json");
    let o = cli(
        &["partition", "--preset", "smoke", "--scenario", "extreme", "--classes-per-client", "2", "--out", part.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["label_support"], serde_json::json!([2, 2]));
    assert!(part.is_file());

    let store = dir.path().join("store");
    let o = cli(&["extract-features", "--preset", "smoke", "--out", store.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    assert!(store.join("manifest.json").is_file());
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["train", "--preset", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("smoke"), "{}", text(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nunknown_key = 1\n").unwrap();
    let o = cli(&["show-config", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let o = cli(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["plot", "--dir", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).contains("metrics.csv"));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["show-config", "--preset", "desk", "--seed", "3"], dir.path());
    assert!(o.status.success());
    let path = dir.path().join("desk.toml");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = cli(&["show-config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(again.stdout, o.stdout);
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed = 3"));
}
