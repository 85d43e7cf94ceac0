use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use rank1glm::pipeline::io::{read_matrix, write_matrix};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rank1glm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = bin(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path, spec: &str, format: &str) {
    std::fs::write(dir.join("spec.txt"), spec).unwrap();
    ok(&["simulate", "--spec", "spec.txt", "--out", "data", "--format", format], dir);
}

const SPEC: &str = "n = 150\np = 3\nvoxels = 5\nsessions = 3\ntrue_hrf = shifted:1.0\nsnr = 2\nseed = 9\n";

fn key(text: &str, name: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.split_once(" = ").filter(|(k, _)| *k == name).map(|(_, v)| v.to_string()))
}

#[test]
fn simulate_then_validate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), SPEC, "csv");
    ok(
        &["validate", "--data", "data", "--basis", "fir:16", "--out", "report", "--workers", "2"],
        dir.path(),
    );
    let tests = std::fs::read_to_string(dir.path().join("report/tests.txt")).unwrap();
    assert_eq!(key(&tests, "voxels").as_deref(), Some("5"));
    assert!(key(&tests, "wilcoxon_p_greater").is_some());
    let ll = std::fs::read_to_string(dir.path().join("report/loglik.csv")).unwrap();
    assert_eq!(ll.lines().count(), 1 + 5 * 3);
    let mean = read_matrix(&dir.path().join("report/mean_hrf.csv")).unwrap();
    assert_eq!(mean.shape(), (16, 4));
    let hrfs = read_matrix(&dir.path().join("report/hrfs.csv")).unwrap();
    assert_eq!(hrfs.shape(), (16, 5));
}

#[test]
fn simulation_is_reproducible_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), SPEC, "npy");
    simulate(b.path(), SPEC, "npy");
    for file in ["session00/bold.npy", "session02/bold.npy", "session01/events.tsv", "truth.txt", "truth_beta.csv"] {
        let x = std::fs::read(a.path().join("data").join(file)).unwrap();
        let y = std::fs::read(b.path().join("data").join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn fit_writes_hrf_beta_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), SPEC, "npy");
    ok(
        &[
            "fit",
            "--bold",
            "data/session00/bold.npy",
            "data/session01/bold.npy",
            "--events",
            "data/session00/events.tsv",
            "data/session01/events.tsv",
            "--confounds",
            "data/session00/confounds.csv",
            "data/session01/confounds.csv",
            "--tr",
            "1",
            "--basis",
            "canonical:2",
            "--whiten",
            "ar1",
            "--out",
            "fit",
        ],
        dir.path(),
    );
    let h = read_matrix(&dir.path().join("fit/hrf.csv")).unwrap();
    let beta = read_matrix(&dir.path().join("fit/beta.csv")).unwrap();
    assert_eq!(h.shape(), (32, 5));
    assert_eq!(beta.shape(), (3, 5));
    for j in 0..5 {
        assert_eq!(h.column(j).amax(), h.column(j).max());
        assert_eq!(h.column(j).max(), 1.0);
    }
    let diag = std::fs::read_to_string(dir.path().join("fit/diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 6);
    assert!(diag.starts_with("voxel,objective,grad_norm,iterations,converged,degenerate,peak_time\n"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &SPEC.replace("sessions = 3", "sessions = 1"), "csv");
    std::fs::write(dir.path().join("bad.csv"), "v0,v1\n1,2\n3,oops\n").unwrap();

    let format = bin(
        &["fit", "--bold", "bad.csv", "--events", "data/session00/events.tsv", "--tr", "1", "--basis", "fir:4", "--out", "o"],
        dir.path(),
    );
    assert_eq!(format.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&format.stderr).contains("line 3"));

    let single = bin(&["validate", "--data", "data", "--basis", "fir:8", "--out", "r"], dir.path());
    assert_eq!(single.status.code(), Some(4));

    let usage = bin(&["fit", "--no-such-flag"], dir.path());
    assert_eq!(usage.status.code(), Some(1));

    let infeasible = bin(&["simulate", "--spec", "spec2.txt", "--out", "x"], dir.path());
    assert_eq!(infeasible.status.code(), Some(2), "missing spec file is an I/O error");
    std::fs::write(dir.path().join("spec2.txt"), "n = 60\nhrf_length = 16\np = 10\nevents_per_condition = 5\n").unwrap();
    let infeasible = bin(&["simulate", "--spec", "spec2.txt", "--out", "x"], dir.path());
    assert_eq!(infeasible.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&infeasible.stderr).contains("at most"));
}

#[test]
fn encode_writes_scatter_of_top_voxels() {
    let dir = tempfile::tempdir().unwrap();
    let (trials, features, voxels) = (40, 3, 12);
    let x = DMatrix::from_fn(trials, features, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
    let map = DMatrix::from_fn(features, voxels, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
    let noise = DMatrix::from_fn(trials, voxels, |i, j| (((i * 31 + j * 17) % 13) as f64 - 6.0) * 0.8);
    let clean = &x * &map;
    let rank1 = &clean + &noise * 0.5;
    let canonical = &clean * 0.6 + &noise;
    let names = |k: usize| (0..k).map(|j| format!("c{j}")).collect::<Vec<_>>();
    write_matrix(&dir.path().join("x.csv"), &x, &names(features)).unwrap();
    write_matrix(&dir.path().join("bc.npy"), &canonical, &[]).unwrap();
    write_matrix(&dir.path().join("br.csv"), &rank1, &names(voxels)).unwrap();
    let folds: String = (0..trials).map(|i| format!("{}\n", i % 5)).collect();
    std::fs::write(dir.path().join("folds.txt"), format!("fold\n{folds}")).unwrap();
    let out = ok(
        &[
            "encode",
            "--features",
            "x.csv",
            "--betas-canonical",
            "bc.npy",
            "--betas-rank1",
            "br.csv",
            "--folds",
            "folds.txt",
            "--top-k",
            "8",
            "--out",
            "scatter.csv",
        ],
        dir.path(),
    );
    let summary = String::from_utf8(out.stdout).unwrap();
    assert_eq!(key(&summary, "voxels_selected").as_deref(), Some("8"));
    let scatter = std::fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
    assert!(scatter.starts_with("voxel_id,score_canonical,score_rank1\n"));
    assert_eq!(scatter.lines().count(), 9);
}
