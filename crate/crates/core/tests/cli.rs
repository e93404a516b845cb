//! Runs the built binary and checks exit codes, outputs and determinism.

use std::path::Path;
use std::process::{Command, Output};

use frpcag::matrix::{load_matrix, save_dense, MatrixFormat};
use frpcag::pgm;
use frpcag::solver::sylvester_solve;
use frpcag::graph::SparseGraph;
use frpcag::synth::moving_square_video;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frpcag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frpcag")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_random_csv(path: &Path, p: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
    save_dense(path, &m, MatrixFormat::Csv).unwrap();
    m
}

fn build_graphs(dir: &Path, input: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (g1, g2) = (dir.join("g1.coo"), dir.join("g2.coo"));
    for (over, out) in [("samples", &g1), ("features", &g2)] {
        let o = frpcag(&["graph", "--input", s(input), "--k", "3", "--over", over, "--output", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    (g1, g2)
}

#[test]
fn graph_command_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    write_random_csv(&x, 5, 12, 1);
    let (a, b) = (dir.path().join("a.coo"), dir.path().join("b.coo"));
    let o = frpcag(&["graph", "--input", s(&x), "--k", "4", "--sigma2", "auto", "--output", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("vertices 12") && out.contains("sigma2"), "{out}");
    frpcag(&["graph", "--input", s(&x), "--k", "4", "--sigma2", "auto", "--output", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(SparseGraph::load_coo(&a).unwrap().vertex_count(), 12);
}

#[test]
fn graph_command_errors() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    write_random_csv(&x, 5, 6, 2);
    let out = dir.path().join("g.coo");
    let o = frpcag(&["graph", "--input", s(&x), "--k", "6", "--output", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"));
    let o = frpcag(&["graph", "--input", s(&dir.path().join("missing.csv")), "--output", s(&out)]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&frpcag(&["graph", "--bogus"])), 2);
    assert_eq!(code(&frpcag(&[])), 2);
    assert_eq!(code(&frpcag(&["--help"])), 0);
}

#[test]
fn solve_identity_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    let m = write_random_csv(&x, 6, 9, 3);
    let (g1, g2) = build_graphs(dir.path(), &x);
    let (u, trace) = (dir.path().join("u.bin"), dir.path().join("trace.csv"));

    let o = frpcag(&[
        "solve", "--input", s(&x), "--graph1", s(&g1), "--graph2", s(&g2),
        "--gamma1", "0", "--gamma2", "0", "--output-u", s(&u), "--output-trace", s(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("iterations 1"));
    assert_eq!(load_matrix(&u, MatrixFormat::BinaryF64).unwrap().values(), &m);
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("iteration,objective\n1,"));

    let o = frpcag(&[
        "solve", "--input", s(&x), "--graph1", s(&g1), "--graph2", s(&g2), "--loss", "frobenius_sq",
        "--gamma1", "2", "--gamma2", "3", "--epsilon", "1e-24", "--max-iters", "20000", "--output-u", s(&u),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got = load_matrix(&u, MatrixFormat::BinaryF64).unwrap();
    let xm = load_matrix(&x, MatrixFormat::Csv).unwrap();
    let oracle = sylvester_solve(
        &xm,
        &SparseGraph::load_coo(&g1).unwrap(),
        &SparseGraph::load_coo(&g2).unwrap(),
        2.0,
        3.0,
    )
    .unwrap();
    assert!((got.values() - oracle.values()).norm() <= 1e-6 * oracle.values().norm());
}

#[test]
fn solve_errors() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    write_random_csv(&x, 6, 9, 4);
    let (g1, g2) = build_graphs(dir.path(), &x);
    let u = dir.path().join("u.bin");
    // Graphs swapped: 9 vs 6 vertices.
    let o = frpcag(&["solve", "--input", s(&x), "--graph1", s(&g2), "--graph2", s(&g1), "--output-u", s(&u)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = frpcag(&[
        "solve", "--input", s(&x), "--graph1", s(&g1), "--graph2", s(&g2), "--step", "1e6", "--output-u", s(&u),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let cfg = dir.path().join("solver.toml");
    std::fs::write(&cfg, "gamma1 = 2\nmax_iter = 5\n").unwrap();
    let o = frpcag(&["solve", "--input", s(&x), "--graph1", s(&g1), "--graph2", s(&g2), "--config", s(&cfg), "--output-u", s(&u)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("max_iter"), "{}", stderr(&o));
}

#[test]
fn background_command() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, out) = (dir.path().join("frames"), dir.path().join("out"));
    let v = moving_square_video(12, 16, 30, 3, true, 4).unwrap();
    pgm::write_frames(&frames, "frame", v.frames.values(), 12, 16).unwrap();
    let o = frpcag(&["background", "--frames", s(&frames), "--k", "10", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(pgm::frame_paths(&out).unwrap().len(), 60);
    let bg = pgm::read(out.join("background_0000.pgm")).unwrap();
    assert_eq!((bg.height, bg.width), (12, 16));

    let still = moving_square_video(12, 16, 10, 3, false, 4).unwrap();
    let still_dir = dir.path().join("still");
    pgm::write_frames(&still_dir, "frame", still.frames.values(), 12, 16).unwrap();
    let o = frpcag(&["background", "--frames", s(&still_dir), "--k", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fg = pgm::read(out.join("foreground_0003.pgm")).unwrap();
    let x_mass: f64 = still.frames.values().column(3).iter().sum();
    let s_mass: f64 = fg.pixels.iter().sum();
    assert!(s_mass <= 0.01 * x_mass, "{s_mass} vs {x_mass}");

    pgm::write(frames.join("zz.pgm"), &pgm::Frame { height: 2, width: 2, pixels: vec![0.0; 4] }).unwrap();
    assert_eq!(code(&frpcag(&["background", "--frames", s(&frames), "--out", s(&out)])), 4);
    assert_eq!(code(&frpcag(&["background", "--frames", s(&dir.path().join("none")), "--out", s(&out)])), 1);
}

fn without_timings(jsonl: &str) -> Vec<serde_json::Value> {
    jsonl
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timings_ms");
            v
        })
        .collect()
}

#[test]
fn experiment_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/two_gaussians.toml");
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let o = frpcag(&["experiment", cfg, "--output", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 7, "{table}");
    let records = without_timings(&std::fs::read_to_string(&a).unwrap());
    assert_eq!(records.len(), 6);
    let ranks: Vec<u64> = records[..3].iter().map(|r| r["rank"].as_u64().unwrap()).collect();
    assert!(ranks.windows(2).all(|w| w[1] <= w[0]), "{ranks:?}");

    frpcag(&["experiment", cfg, "--output", s(&b)]);
    assert_eq!(records, without_timings(&std::fs::read_to_string(&b).unwrap()));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "data = \"two_gaussians\"\ngama = [1]\n").unwrap();
    let o = frpcag(&["experiment", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));
}

#[test]
fn thread_variable_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_frpcag"))
        .args(["graph", "--help"])
        .env("FRPCAG_THREADS", "zero")
        .output()
        .unwrap();
    // Help short-circuits before the pool is configured.
    assert_eq!(code(&o), 0);
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    write_random_csv(&x, 3, 5, 5);
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_frpcag"))
            .args(["graph", "--input", s(&x), "--k", "2", "--output", s(&dir.path().join("g.coo"))])
            .env("FRPCAG_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("zero")), 2);
    assert_eq!(code(&run("2")), 0);
}
