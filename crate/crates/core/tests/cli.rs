use std::path::Path;
use std::process::Command;

use varhorizon::config::Manifest;

const TINY: &str = r#"
seed = 5

[data]
episodes = 12

[lp.arch]
rff_features = 8
hidden = 16

[lp.curriculum]
batch = 8

[planner]
t_diff = 6
batch = 2
steps = 4
log_every = 2

[planner.arch]
channels = 8
blocks = 1
kernel = 3
groups = 2
time_dim = 8
dilations = [1]

[eval.exec]
step_budget = 120
"#;

fn run(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_varhorizon"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_command_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();

    run(d, &["dump-maze"]);
    let maze = std::fs::read_to_string(d.join("maze.txt")).unwrap();
    assert_eq!(maze.lines().count(), 30);

    run(d, &["gen-data"]);
    let m = Manifest::read(&d.join("manifest_gen-data.json")).unwrap();
    assert_eq!(m.config.data.episodes, 12);
    assert_eq!(m.artifacts[0].sha256.len(), 64);
    let first = std::fs::read(d.join("dataset.vhd")).unwrap();
    run(d, &["gen-data"]);
    assert_eq!(std::fs::read(d.join("dataset.vhd")).unwrap(), first);

    run(d, &["train-lp", "--data", &p("dataset.vhd"), "--steps", "30"]);
    run(d, &["train-planner", "--data", &p("dataset.vhd")]);
    run(d, &["train-planner", "--data", &p("dataset.vhd"), "--fixed", "64"]);
    assert!(d.join("planner_vhd.vhdc").exists() && d.join("planner_fh64.vhdc").exists());

    run(d, &["plan", "--planner", &p("planner_vhd.vhdc"), "--lp", &p("lp.vhdc"), "--start", "3.6,3.6", "--goal", "8.4,3.6"]);
    let plan = std::fs::read_to_string(d.join("plan.csv")).unwrap();
    let rows: Vec<&str> = plan.lines().collect();
    assert_eq!(rows[0], "index,x,y,vx,vy");
    assert!(rows[1].starts_with("0,3.6"));
    assert!((17..=193).contains(&rows.len()));

    run(d, &["audit-lp", "--lp", &p("lp.vhdc"), "--pairs", "5", "--held-out", &p("dataset.vhd")]);
    let audit = std::fs::read_to_string(d.join("audit_lp.csv")).unwrap();
    assert!(audit.starts_with("sx,sy,gx,gy,oracle_steps,oracle_norm,predicted,horizon"));
    assert_eq!(audit.lines().count(), 6);
    assert!(d.join("calibration.json").exists());

    let fh = format!("64={}", p("planner_fh64.vhdc"));
    run(
        d,
        &[
            "eval", "--lp", &p("lp.vhdc"), "--vhd", &p("planner_vhd.vhdc"), "--fh", &fh, "--fh-lp", "64",
            "--instances", "3", "--traces",
        ],
    );
    let results = std::fs::read_to_string(d.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3 * 2);
    assert!(d.join("table.txt").exists() && d.join("traces").is_dir());
    let m = Manifest::read(&d.join("manifest_eval.json")).unwrap();
    assert_eq!(m.config.n_test, 3);
    assert!(m.artifacts.iter().any(|a| a.name == "vhd"));
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "fixed_horizons = [64, 32, 16]\n").unwrap();
    let status = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_varhorizon"))
            .arg("--out")
            .arg(d)
            .args(args)
            .env("RUST_LOG", "off")
            .output()
            .unwrap()
            .status
    };
    assert!(!status(&["--config", d.join("bad.toml").to_str().unwrap(), "dump-maze"]).success());
    assert!(!status(&["train-lp", "--data", d.join("missing.vhd").to_str().unwrap()]).success());
    assert!(!status(&["eval", "--fh-lp", "64"]).success());
    assert!(status(&["--seed", "3", "dump-maze"]).success());
}
