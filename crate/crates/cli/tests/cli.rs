use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{Rotation3, Vector3};
use simgraph::evaluation::{read_tum, write_tum};
use simgraph::experiments::Scenario;
use simgraph::fusion::read_ply;
use simgraph::pose_graph::PoseGraph;
use simgraph::sim3::Sim3;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[scene]
preset = "circle"
num_views = 30
num_landmarks = 300

[loops.proposal]
min_index_gap = 5
"#;

const SMALL_ZERO_NOISE: &str = r#"
[scene]
preset = "circle"
num_views = 30
num_landmarks = 300

[noise]
sigma_rot = 0.0
sigma_trans = 0.0
sigma_scale = 0.0
sigma_point = 0.0

[loops.proposal]
min_index_gap = 5
"#;

fn simgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario_file(dir: &Path, text: &str) -> String {
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn key(text: &str, k: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{k}=")))
        .unwrap_or_else(|| panic!("no {k}= in {text}"))
        .to_string()
}

#[test]
fn run_writes_artifacts_that_parse_back() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = simgraph(&["run", "--scenario", &sc, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    for name in ["traj_est.txt", "traj_gt.txt", "cloud.ply", "report.txt", "metrics.txt", "graph.txt"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let est = read_tum(&fs::read_to_string(out.join("traj_est.txt")).unwrap()).unwrap();
    let gt = read_tum(&fs::read_to_string(out.join("traj_gt.txt")).unwrap()).unwrap();
    assert_eq!(est.len(), 30);
    assert_eq!(gt.len(), 30);
    let cloud = read_ply(fs::File::open(out.join("cloud.ply")).unwrap()).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert_eq!(cloud.len().to_string(), key(&metrics, "points"));
    let graph = PoseGraph::load(&fs::read_to_string(out.join("graph.txt")).unwrap()).unwrap();
    assert_eq!(graph.views().count(), 30);
    let echoed = Scenario::load(&out.join("scenario.toml")).unwrap();
    assert_eq!(echoed.seed, 3);
    assert_eq!(stdout(&o), metrics);
}

#[test]
fn zero_noise_run_is_exact() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL_ZERO_NOISE);
    let out = tmp.path().join("out");
    let o = simgraph(&["run", "--scenario", &sc, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    let ate: f64 = key(&metrics, "ate_rmse").parse().unwrap();
    assert!(ate < 1e-6, "ate {ate}");
}

#[test]
fn no_loop_closure_reports_zero_loop_edges() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL);
    let with = tmp.path().join("with");
    let without = tmp.path().join("without");
    assert!(simgraph(&["run", "--scenario", &sc, "--out", with.to_str().unwrap()]).status.success());
    let o = simgraph(&["run", "--scenario", &sc, "--no-loop-closure", "--out", without.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(without.join("report.txt")).unwrap();
    assert_eq!(key(&report, "loop_edges"), "0");
    let report = fs::read_to_string(with.join("report.txt")).unwrap();
    assert_ne!(key(&report, "loop_edges"), "0");
}

#[test]
fn flags_override_scenario_file() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = simgraph(&[
        "run", "--scenario", &sc, "--out", out.to_str().unwrap(), "--seed", "11", "--N", "3", "--tau-p", "0.5",
        "--variant", "no_loops", "--align", "se3", "--loop-mode", "incremental",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = Scenario::load(&out.join("scenario.toml")).unwrap();
    assert_eq!(s.seed, 11);
    assert_eq!(s.graph.neighbors, 3);
    assert_eq!(s.graph.loop_threshold, 0.5);
    assert_eq!(s.variant.name(), "no_loops");
    assert_eq!(s.evaluation.align.to_string(), "se3");
    assert_eq!(s.scene.num_views, 30);
    assert_eq!(key(&stdout(&o), "seed"), "11");
}

#[test]
fn same_seed_gives_identical_output() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(simgraph(&["run", "--scenario", &sc, "--out", a.to_str().unwrap()]).status.success());
    assert!(simgraph(&["run", "--scenario", &sc, "--out", b.to_str().unwrap()]).status.success());
    for name in ["traj_est.txt", "metrics.txt", "cloud.ply", "graph.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn variant_shortcuts() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL);
    for (flag, name, has_graph) in [("--no-pgo", "no_pgo", false), ("--single-node", "single_node", false)] {
        let out = tmp.path().join(name);
        let o = simgraph(&["run", "--scenario", &sc, flag, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(key(&stdout(&o), "variant"), name);
        assert_eq!(out.join("graph.txt").exists(), has_graph);
    }
    let report = fs::read_to_string(tmp.path().join("no_pgo").join("report.txt")).unwrap();
    assert!(report.starts_with("optimization disabled"));
}

#[test]
fn bad_invocations_fail_loudly() {
    let o = simgraph(&["run", "--out", "x", "--no-pgo", "--single-node"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cannot be used with"));

    let o = simgraph(&["run", "--out", "x", "--frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--frobnicate"));

    let o = simgraph(&["run", "--out", "x", "--variant", "turbo"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("turbo"));

    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), "[scene]\nnum_view = 3\n");
    let o = simgraph(&["run", "--scenario", &sc, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("experiments:"), "{}", stderr(&o));
    assert!(stderr(&o).contains("num_view"), "{}", stderr(&o));

    let sc = scenario_file(tmp.path(), "[graph]\nloop_threshold = 1.5\n");
    let o = simgraph(&["run", "--scenario", &sc, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("pose_graph:"), "{}", stderr(&o));
}

#[test]
fn help_documents_every_flag() {
    let help = stdout(&simgraph(&["run", "--help"]));
    for flag in [
        "--scenario", "--out", "--seed", "--N", "--tau-p", "--no-loop-closure", "--no-pgo", "--single-node",
        "--variant", "--align", "--loop-mode",
    ] {
        assert!(help.contains(flag), "run --help lacks {flag}");
    }
    let help = stdout(&simgraph(&["eval", "--help"]));
    for flag in ["--est", "--ref", "--align", "--tolerance"] {
        assert!(help.contains(flag), "eval --help lacks {flag}");
    }
    let help = stdout(&simgraph(&["ablate", "--help"]));
    for flag in ["--scenario", "--variant", "--seeds", "--out"] {
        assert!(help.contains(flag), "ablate --help lacks {flag}");
    }
}

fn eval(est: &Path, reference: &Path, align: &str) -> Output {
    simgraph(&["eval", "--est", est.to_str().unwrap(), "--ref", reference.to_str().unwrap(), "--align", align])
}

fn sample_trajectory(dir: &Path) -> std::path::PathBuf {
    let sc = scenario_file(dir, SMALL);
    let out = dir.join("run");
    assert!(simgraph(&["run", "--scenario", &sc, "--out", out.to_str().unwrap()]).status.success());
    out.join("traj_gt.txt")
}

#[test]
fn eval_identical_files_is_zero() {
    let tmp = TempDir::new().unwrap();
    let gt = sample_trajectory(tmp.path());
    for align in ["sim3", "se3", "none"] {
        let o = eval(&gt, &gt, align);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(key(&stdout(&o), "ate_rmse"), "0.000000");
        assert_eq!(key(&stdout(&o), "matched"), "30");
    }
}

#[test]
fn eval_removes_a_pure_similarity() {
    let tmp = TempDir::new().unwrap();
    let gt_path = sample_trajectory(tmp.path());
    let gt = read_tum(&fs::read_to_string(&gt_path).unwrap()).unwrap();
    let g = Sim3::new(
        Rotation3::from_scaled_axis(Vector3::new(0.3, -1.1, 0.7)),
        Vector3::new(4.0, -2.0, 9.5),
        2.7,
    );
    let moved = tmp.path().join("moved.txt");
    fs::write(&moved, write_tum(&gt.transformed(&g))).unwrap();

    let o = eval(&moved, &gt_path, "sim3");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(key(&stdout(&o), "ate_rmse"), "0.000000");

    let o = eval(&moved, &gt_path, "none");
    let unaligned: f64 = key(&stdout(&o), "ate_rmse").parse().unwrap();
    assert!(unaligned > 1.0);
}

#[test]
fn eval_names_the_malformed_line() {
    let tmp = TempDir::new().unwrap();
    let gt = sample_trajectory(tmp.path());
    let text = fs::read_to_string(&gt).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    // line 1 is the header comment
    let mut fields: Vec<&str> = lines[6].split_whitespace().collect();
    fields[5] = "nan?";
    lines[6] = fields.join(" ");
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, lines.join("\n")).unwrap();

    let o = eval(&bad, &gt, "sim3");
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("line 7"), "{err}");
    assert!(err.contains("bad.txt"), "{err}");
}

#[test]
fn ablate_writes_plot_data() {
    let tmp = TempDir::new().unwrap();
    let sc = scenario_file(tmp.path(), SMALL);
    let out = tmp.path().join("plots");
    let o = simgraph(&[
        "ablate", "--scenario", &sc, "--variant", "full,no_pgo", "--seeds", "0..3", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
    let stats = fs::read_to_string(out.join("statistics.csv")).unwrap();
    assert_eq!(stats.lines().count(), 3);
    for seed in 0..3 {
        let t = fs::read_to_string(out.join(format!("traj_full_{seed}.txt"))).unwrap();
        assert_eq!(read_tum(&t).unwrap().len(), 30);
    }
    assert!(out.join("xy_single_node.csv").is_file());
}
