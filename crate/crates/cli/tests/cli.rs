use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mvess(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvess"))
        .args(args)
        .env("MVESS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Value of the `key value` line in a report.
fn field(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{key}` in\n{}", stdout(o)))
}

struct Dir(TempDir);

impl Dir {
    fn new() -> Dir {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn records(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().skip(1).count()
}

fn synth(d: &Dir, extra: &[&str]) -> Output {
    let m = d.arg("m.txt");
    let g = d.arg("gt.txt");
    let mut args = vec!["synth", "--measurements", &m, "--poses", &g];
    args.extend_from_slice(extra);
    mvess(&args)
}

#[test]
fn synth_record_counts() {
    let d = Dir::new();
    assert_eq!(code(&synth(&d, &["-n", "5"])), 0);
    assert_eq!(records(&d.path("m.txt")), 10);
    assert_eq!(records(&d.path("gt.txt")), 5);
    assert_eq!(code(&synth(&d, &["-n", "10", "--missing", "0.2", "--seed", "3"])), 0);
    assert_eq!(records(&d.path("m.txt")), 36);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let d = Dir::new();
    let args = ["-n", "8", "--sigma-r", "0.02", "--sigma-t", "0.02", "--seed", "11"];
    synth(&d, &args);
    let first = std::fs::read(d.path("m.txt")).unwrap();
    synth(&d, &args);
    assert_eq!(std::fs::read(d.path("m.txt")).unwrap(), first);
}

#[test]
fn synth_rejects_invalid_spec() {
    let d = Dir::new();
    assert_eq!(code(&synth(&d, &["-n", "2"])), 2);
    assert_eq!(code(&synth(&d, &["--missing", "1.5"])), 2);
    assert_eq!(code(&mvess(&["synth"])), 2);
}

#[test]
fn check_consistent_file() {
    let d = Dir::new();
    synth(&d, &["-n", "6"]);
    for mode in ["strict", "scaled"] {
        let o = mvess(&["check", &d.arg("m.txt"), "--mode", mode]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        assert_eq!(field(&o, "essential_consistent"), "true");
    }
}

#[test]
fn check_counterexample_is_essential_inconsistent() {
    let d = Dir::new();
    for seed in ["0", "7"] {
        let o = mvess(&["counterexample", "--seed", seed, "--out", &d.arg("ce.txt")]);
        assert_eq!(code(&o), 0);
        let o = mvess(&["check", &d.arg("ce.txt")]);
        assert_eq!(code(&o), 11, "{}", stdout(&o));
        assert_eq!(field(&o, "fundamental_consistent"), "true");
        assert_eq!(field(&o, "pairing_holds"), "true");
    }
}

#[test]
fn check_rejects_rank_three_block() {
    let d = Dir::new();
    let text = "MVESS/1 measurements n=3\n\
                0 1 1 0 0 0 1 0 0 0 1 1\n\
                0 2 0 -1 0 1 0 0 0 0 0 1\n\
                1 2 0 0 1 0 0 0 -1 0 0 1\n";
    std::fs::write(d.path("bad.txt"), text).unwrap();
    assert_eq!(code(&mvess(&["check", &d.arg("bad.txt")])), 4);
}

#[test]
fn check_incomplete_and_malformed() {
    let d = Dir::new();
    synth(&d, &["-n", "10", "--missing", "0.2"]);
    assert_eq!(code(&mvess(&["check", &d.arg("m.txt")])), 5);
    std::fs::write(d.path("junk.txt"), "hello\n").unwrap();
    assert_eq!(code(&mvess(&["check", &d.arg("junk.txt")])), 4);
    assert_eq!(code(&mvess(&["check", &d.arg("absent.txt")])), 3);
}

#[test]
fn average_clean_scene_matches_ground_truth() {
    let d = Dir::new();
    synth(&d, &["-n", "10", "--missing", "0.1", "--seed", "2"]);
    let o = mvess(&[
        "average",
        &d.arg("m.txt"),
        "--out",
        &d.arg("est.txt"),
        "--trace",
        &d.arg("trace.txt"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o, "posed_views"), "10");
    assert!(records(&d.path("trace.txt")) >= 1);
    let e = mvess(&["eval", &d.arg("est.txt"), &d.arg("gt.txt")]);
    assert_eq!(code(&e), 0);
    let rd: f64 = field(&e, "rotation_degrees_mean").parse().unwrap();
    assert!(rd < 1e-5, "{rd}");
}

#[test]
fn average_is_deterministic() {
    let d = Dir::new();
    synth(&d, &["-n", "9", "--sigma-r", "0.02", "--sigma-t", "0.02", "--seed", "5"]);
    let run = |name: &str| {
        let o = mvess(&["average", &d.arg("m.txt"), "--out", &d.arg(name)]);
        assert!(matches!(code(&o), 0 | 6));
        std::fs::read(d.path(name)).unwrap()
    };
    assert_eq!(run("a.txt"), run("b.txt"));
}

#[test]
fn average_reports_non_convergence_but_writes_poses() {
    let d = Dir::new();
    synth(&d, &["-n", "10", "--sigma-r", "0.05", "--sigma-t", "0.05", "--seed", "1"]);
    let o = mvess(&["average", &d.arg("m.txt"), "--out", &d.arg("est.txt"), "--max-iters", "2"]);
    assert_eq!(code(&o), 6);
    assert_eq!(field(&o, "converged"), "false");
    assert!(records(&d.path("est.txt")) > 0);
}

#[test]
fn average_rejects_disconnected_graph() {
    let d = Dir::new();
    synth(&d, &["-n", "6"]);
    let text = std::fs::read_to_string(d.path("m.txt")).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| {
            let mut t = l.split_whitespace();
            let (i, j) = (t.next().unwrap(), t.next().unwrap_or(""));
            !(i == "5" || j == "5")
        })
        .collect();
    std::fs::write(d.path("cut.txt"), kept.join("\n")).unwrap();
    let o = mvess(&["average", &d.arg("cut.txt"), "--out", &d.arg("est.txt")]);
    assert_eq!(code(&o), 7);
    assert!(!d.path("est.txt").exists());
}

#[test]
fn recover_consistent_matrix() {
    let d = Dir::new();
    synth(&d, &["-n", "7", "--layout", "box"]);
    let o = mvess(&["recover", &d.arg("m.txt"), "--out", &d.arg("rec.txt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e = mvess(&["eval", &d.arg("rec.txt"), &d.arg("gt.txt")]);
    let rd: f64 = field(&e, "rotation_degrees_mean").parse().unwrap();
    let rc: f64 = field(&e, "relative_center_error_mean").parse().unwrap();
    assert!(rd < 1e-6 && rc < 1e-8, "{rd} {rc}");
}

#[test]
fn eval_identical_and_perturbed() {
    let d = Dir::new();
    synth(&d, &["-n", "10"]);
    let gt = d.arg("gt.txt");
    let same = mvess(&["eval", &gt, &gt]);
    assert_eq!(code(&same), 0);
    let rd: f64 = field(&same, "rotation_degrees_mean").parse().unwrap();
    assert!(rd < 1e-9);

    // Rotate view 0 by 1 degree about z: R <- Rz R.
    let text = std::fs::read_to_string(d.path("gt.txt")).unwrap();
    let (c, s) = (1f64.to_radians().cos(), 1f64.to_radians().sin());
    let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let v: Vec<f64> = lines[1].split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[3 * i + j] = (0..3).map(|k| rz[i][k] * v[3 * k + j]).sum();
        }
    }
    let mut row = vec!["0".to_string()];
    row.extend(r.iter().chain(&v[9..]).map(|x| x.to_string()));
    lines[1] = row.join(" ");
    std::fs::write(d.path("pert.txt"), lines.join("\n")).unwrap();
    let o = mvess(&["eval", &d.arg("pert.txt"), &gt]);
    let rd: f64 = field(&o, "rotation_degrees_mean").parse().unwrap();
    assert!((rd - 0.1).abs() < 1e-6, "{rd}");
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_mvess"))
        .args(["counterexample", "--out", "/nonexistent/x"])
        .env("MVESS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
