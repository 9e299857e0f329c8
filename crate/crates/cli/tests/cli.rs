use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pyramid-flow"))
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out-dir").arg(out).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let o = bin().output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_one() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn schedule_csv() {
    let o = bin().args(["schedule", "--stages", "3"]).output().unwrap();
    assert!(o.status.success());
    assert_eq!(stdout(&o), "k,divisor,s,e\n0,1,0.6667,1.0\n1,2,0.3333,0.8\n2,4,0.0,0.5\n");
    let one = bin().args(["schedule", "--stages", "1"]).output().unwrap();
    assert_eq!(stdout(&one), "k,divisor,s,e\n0,1,0.0,1.0\n");
    let bad = bin().args(["schedule", "--stages", "0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let bad_gamma = bin().args(["schedule", "--gamma", "0.5"]).output().unwrap();
    assert_eq!(bad_gamma.status.code(), Some(1));
}

#[test]
fn verify_renoise_example() {
    let o = bin()
        .args(["verify-renoise", "--gamma", "-0.3333", "--s", "0.6667", "--samples", "1000000", "--seed", "7"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let pass = text.lines().last().unwrap();
    assert!(pass.starts_with("PASS"), "{pass}");
    let off: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("offdiag_covariance,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((-0.343..=-0.323).contains(&off), "{off}");
}

#[test]
fn tokens_default_video() {
    let o = bin().arg("tokens").output().unwrap();
    let text = stdout(&o);
    assert!(text.contains("full_tokens,119040\n"));
    assert!(text.contains("pyramid_tokens,11760\n"));
    let bad = bin().args(["tokens", "--frames", "240"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn mask_is_block_causal() {
    let o = bin()
        .args(["mask", "--frames", "3", "--height", "2", "--width", "2", "--stages", "2"])
        .output()
        .unwrap();
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    // history divisors 2 then 1: one token, four tokens, then four current
    assert_eq!(rows[0], "query,frame,k0,k1,k2,k3,k4,k5,k6,k7,k8");
    assert_eq!(rows[1], "0,0,1,0,0,0,0,0,0,0,0");
    assert_eq!(rows[2], "1,1,1,1,1,1,1,0,0,0,0");
    assert_eq!(rows[9], "8,2,1,1,1,1,1,1,1,1,1");
    assert_eq!(rows.len(), 10);
}

#[test]
fn config_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, "[schedule]\nstages = 2\n").unwrap();
    let from_cfg = bin().arg("--config").arg(&cfg).arg("schedule").output().unwrap();
    assert_eq!(stdout(&from_cfg).lines().count(), 3);
    let flag = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["schedule", "--stages", "4"])
        .output()
        .unwrap();
    assert_eq!(stdout(&flag).lines().count(), 5);
    std::fs::write(&cfg, "[schedule]\nstagez = 2\n").unwrap();
    let bad = bin().arg("--config").arg(&cfg).arg("schedule").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn toy_training_writes_artifacts_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["train-toy2d", "--steps", "20", "--batch", "16", "--eval-samples", "3"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["ours", "random"] {
        for suffix in ["_metrics.csv", "_model.pyrm", "_trajectories.csv", ".svg"] {
            assert!(dir.path().join(format!("toy2d_{mode}{suffix}")).exists(), "{mode}{suffix}");
        }
    }
    let metrics = std::fs::read_to_string(dir.path().join("toy2d_ours_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);

    let model = dir.path().join("toy2d_ours_model.pyrm");
    let s = run(dir.path(), &["sample", "--model", model.to_str().unwrap(), "--steps", "4"]);
    assert!(s.status.success());
    let traj = std::fs::read_to_string(dir.path().join("sample_trajectory.csv")).unwrap();
    assert!(traj.starts_with("step,t,stage,v0,v1\n"));
    assert_eq!(traj.lines().count(), 1 + 10);

    let p = run(dir.path(), &["plot", dir.path().join("sample_trajectory.csv").to_str().unwrap()]);
    assert!(p.status.success());
    assert!(dir.path().join("sample_trajectory.svg").exists());
}

#[test]
fn image_training_and_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["train-image", "--pixel-budget", "5000", "--eval-samples", "4", "--dataset-size", "8", "--hidden", "8"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = dir.path().join("image_k3_model.pyrm");
    let s = run(dir.path(), &["sample", "--model", model.to_str().unwrap(), "--steps", "2,3,4"]);
    assert!(s.status.success());
    let grid = std::fs::read(dir.path().join("sample.pyrg")).unwrap();
    let g = pyramid_flow::LatentGrid::read_from(&grid[..]).unwrap();
    assert_eq!(g.shape(), pyramid_flow::Shape::new(16, 16, 1));
    let traj = std::fs::read_to_string(dir.path().join("sample_trajectory.csv")).unwrap();
    assert!(traj.starts_with("step,t,stage,mean,std,min,max\n"));
    // stage starts plus every Euler step
    assert_eq!(traj.lines().count(), 1 + 3 + 9);

    let bad = run(dir.path(), &["sample", "--model", model.to_str().unwrap(), "--steps", "2,3"]);
    assert_eq!(bad.status.code(), Some(1));
    let plot = run(dir.path(), &["plot", dir.path().join("sample_trajectory.csv").to_str().unwrap()]);
    assert_eq!(plot.status.code(), Some(1));
}

#[test]
fn plot_empty_file_gives_axes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.csv");
    std::fs::write(&input, "").unwrap();
    let o = run(dir.path(), &["plot", input.to_str().unwrap(), "--output", "axes.svg"]);
    assert!(o.status.success());
    let svg = std::fs::read_to_string(dir.path().join("axes.svg")).unwrap();
    assert!(svg.contains("<line") && !svg.contains("<polyline"));
}

#[test]
fn bad_model_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("junk.pyrm");
    std::fs::write(&m, b"nope").unwrap();
    let o = run(dir.path(), &["sample", "--model", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["train-toy2d", "--steps", "50", "--lr", "1e12", "--batch", "8", "--eval-samples", "2", "--coupling", "ours"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
