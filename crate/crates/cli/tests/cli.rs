use std::path::Path;
use std::process::{Command, Output};

fn egoscale(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_egoscale"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn last_stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

const TINY: &str = r#"
world_classes = 4
world_scenes = 3
frame_size = 24
eval_world_scenes = 4
eval_horizon_s = 2000.0
stream_duration_s = 40.0
fractions = [1.0, 0.5, 0.25]
repeats = 1
input_size = 16
embed_dim = 16
batch_size = 8
epochs = 1
protocols = ["fewshot_1pct"]
few_shot_per_class = 2
test_per_class = 3
practice_per_class = 2
finetune_epochs = 1
finetune_batch_size = 4
"#;

#[test]
fn reference_tables_print_and_write_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("tables.json");
    let out = egoscale(&["repro-paper", "--json", json.to_str().unwrap()], &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("years"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    assert!(v.is_object());
}

#[test]
fn failures_exit_nonzero_with_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = egoscale(&["run", "--config", missing.to_str().unwrap()], &[]);
    assert!(!out.status.success());
    let err = last_stderr_json(&out);
    assert!(err["error"].as_str().unwrap().contains("nope.toml"));
    assert!(err["causes"].is_array());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "fractions = [0.1, 1.0]\n").unwrap();
    let out = egoscale(&["train", "--config", bad.to_str().unwrap()], &[]);
    assert!(!out.status.success());
    let err = last_stderr_json(&out);
    let all = format!("{} {}", err["error"], err["causes"]);
    assert!(all.contains("descending"), "{all}");
}

#[test]
fn default_config_round_trips() {
    let out = egoscale(&["default-config"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = egoscale::experiment::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, egoscale::experiment::ExperimentConfig::default());
}

#[test]
fn run_then_fit_and_report_from_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let runs = dir.path().join("runs");
    let out = egoscale(
        &["run", "--config", cfg.to_str().unwrap()],
        &[("EGOSCALE_OUTPUT_DIR", &runs)],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results = runs.join("results.csv");
    let text = std::fs::read_to_string(&results).unwrap();
    assert_eq!(text.lines().count(), 4);

    let out = egoscale(
        &[
            "fit",
            "--input",
            results.to_str().unwrap(),
            "--threshold",
            "90",
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap();

    let figs = dir.path().join("figs");
    let out = egoscale(&["report", "--out", figs.to_str().unwrap()], &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(figs.join("summary.json").is_file());
}

#[test]
fn gen_data_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("frames");
    let out = egoscale(
        &[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--limit",
            "5",
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let pngs = std::fs::read_dir(out_dir.join("frames"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(pngs, 5);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
}
