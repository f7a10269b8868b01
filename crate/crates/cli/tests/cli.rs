use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
geometry.cells = 1,1,4
geometry.length = 0.4
env.m = 2
db.grid = 2,2,1
db.settle_vel_tol = 1e-4
agent.hidden = 8,8
agent.batch_size = 4
agent.buffer_capacity = 200
eval.episodes = 6
";

fn dlo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlo"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_prints_usage_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlo(dir.path(), &["train", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_file_is_reported_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlo(dir.path(), &["eval", "--checkpoint", "nope.ddpg", "--db", "nope.db"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope") && err.contains("Usage"), "{err}");
    let out = dlo(dir.path(), &["--config", "absent.cfg", "export-mesh"]);
    assert!(!out.status.success());
}

#[test]
fn gen_db_small_box_uses_preset_extents() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    ok(&dlo(dir.path(), &["--config", cfg, "gen-db", "--box", "small", "--out", "small.db"]));
    let m = manifest(&dir.path().join("small.db.manifest.json"));
    assert_eq!(m["outputs"]["extents_m"], serde_json::json!([0.15, 0.5, 0.25]));
    assert_eq!(m["outputs"]["records"], 4);
    assert_eq!(m["command"], "gen-db");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn train_eval_replay_pipeline() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(&dlo(d, &["--config", cfg, "--seed", "3", "gen-db", "--out", "g.db"]));
    ok(&dlo(d, &["--config", cfg, "--seed", "3", "train", "--db", "g.db", "--workers", "1", "--episodes", "2", "--steps", "10", "--out-dir", "t"]));
    let curve = std::fs::read_to_string(d.join("t/learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "{curve}");
    let m = manifest(&d.join("t/manifest.json"));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"]["transitions"], 20);
    assert!(d.join("t/final.ddpg").exists());

    let stdout = ok(&dlo(
        d,
        &["--config", cfg, "eval", "--checkpoint", "t/final.ddpg", "--db", "g.db", "--threshold", "0.03", "--no-reinit", "--trace", "2", "--out-dir", "e"],
    ));
    assert!(stdout.contains(" no "), "{stdout}");
    let report = std::fs::read_to_string(d.join("e/report.txt")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(report.lines().find(|l| l.starts_with('{')).unwrap()).unwrap();
    assert_eq!(summary["threshold_m"], 0.03);
    assert_eq!(summary["reinitialize"], false);
    assert_eq!(std::fs::read_to_string(d.join("e/episodes.csv")).unwrap().lines().count(), 7);

    let out = ok(&dlo(d, &["--config", cfg, "replay", "--trajectory", "e/trajectory.csv", "--no-reinit", "--out", "r.csv"]));
    let dev: f64 = manifest(&d.join("r.csv.manifest.json"))["outputs"]["max_deviation_m"].as_f64().unwrap();
    assert_eq!(dev, 0.0, "{out}");
    assert!(std::fs::read_to_string(d.join("r.csv")).unwrap().starts_with("episode,step,node,x,y,z"));
}

#[test]
fn export_mesh_writes_versioned_dump() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    ok(&dlo(dir.path(), &["--config", cfg, "export-mesh", "--out", "m.txt"]));
    let text = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
    assert!(text.starts_with("tetmesh v1 20 "), "{}", &text[..40]);
}
