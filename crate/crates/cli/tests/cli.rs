use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmm_mcl::datasets::{self, SequenceManifest};
use gmm_mcl::gmm_map::{GmmComponent, GmmMap, MAX_HEADER_BYTES};
use gmm_mcl::projection::{CameraIntrinsics, Pose};
use gmm_mcl::sim::{TimedPose, Trajectory};
use nalgebra::{Matrix3, Vector3};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gmm-mcl"));
    c.env_remove("GMM_MCL_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_exit(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Simulates a short corridor flight and fits a small map to its cloud.
fn small_world(dir: &Path) -> PathBuf {
    let sim = write(
        dir,
        "sim.cfg",
        "seed = 3\n\
         scene.preset = corridor\n\
         scene.length = 5\n\
         trajectory.kind = corridor\n\
         trajectory.start = 0.8 0 1\n\
         trajectory.end = 2.0 0 1\n\
         camera.width = 64\n\
         camera.height = 48\n\
         cloud.density = 60\n\
         cloud.jitter = 0.02\n\
         out.dir = seq\n",
    );
    let o = run(&["simulate", sim.to_str().unwrap()]);
    assert_exit(&o, 0);
    let seq = dir.join("seq");
    let map = seq.join("map.gmm");
    let o = run(&[
        "fit-map",
        "--cloud",
        seq.join("cloud.xyz").to_str().unwrap(),
        "--components",
        "120",
        "--seed",
        "1",
        "--out",
        map.to_str().unwrap(),
        "--max-iters",
        "30",
    ]);
    assert_exit(&o, 0);
    seq
}

fn localize_cfg(dir: &Path, seq: &Path, tag: &str) -> PathBuf {
    write(
        dir,
        &format!("{tag}.cfg"),
        &format!(
            "seed = 11\n\
             map = {seq}/map.gmm\n\
             manifest = {seq}/manifest.txt\n\
             filter.particles = 64\n\
             filter.groups = 8\n\
             filter.patch_size = 16\n\
             filter.stride = 4\n\
             init.extent = 0.1 0.1 0.1\n\
             init.yaw_range = 0.1\n\
             out.trajectory = {tag}.tum\n\
             out.metrics = {tag}.csv\n",
            seq = seq.display()
        ),
    )
}

#[test]
fn simulate_fit_localize_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let seq = small_world(tmp.path());
    for f in ["scene.txt", "groundtruth.txt", "manifest.txt", "cloud.xyz", "depth/000000.png"] {
        assert!(seq.join(f).exists(), "{f} missing");
    }
    let manifest = SequenceManifest::read(seq.join("manifest.txt")).unwrap();
    let truth = datasets::read_trajectory(seq.join("groundtruth.txt")).unwrap();
    assert_eq!(manifest.frames.len(), truth.len());

    let cfg = localize_cfg(tmp.path(), &seq, "a");
    let o = run(&["localize", cfg.to_str().unwrap()]);
    assert_exit(&o, 0);
    let out = stdout(&o);
    assert!(out.contains(&format!("steps {}", truth.len())), "{out}");
    let rmse: f64 = out.lines().find_map(|l| l.strip_prefix("rmse ")).expect("rmse line").trim().parse().unwrap();
    assert!(rmse < 0.2, "tracking from a tight start drifted: {rmse}");

    let est = tmp.path().join("a.tum");
    let estimates = datasets::read_trajectory(&est).unwrap();
    assert_eq!(estimates.len(), truth.len());
    let metrics = std::fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    assert_eq!(metrics.lines().count(), truth.len() + 1);
    assert!(metrics.starts_with("index,timestamp,x,y,z,yaw,"));

    let o = run(&["eval", "--est", est.to_str().unwrap(), "--truth", seq.join("groundtruth.txt").to_str().unwrap()]);
    assert_exit(&o, 0);
    let printed: f64 = stdout(&o).lines().find_map(|l| l.strip_prefix("rmse ")).unwrap().trim().parse().unwrap();
    assert!((printed - rmse).abs() < 1e-5, "eval {printed} vs localize {rmse}");
}

#[test]
fn localize_is_byte_identical_across_runs_and_workers() {
    let tmp = TempDir::new().unwrap();
    let seq = small_world(tmp.path());
    let mut outputs = Vec::new();
    for (tag, workers) in [("one", "1"), ("two", "2"), ("again", "2")] {
        let cfg = localize_cfg(tmp.path(), &seq, tag);
        let o = bin().arg("localize").arg(&cfg).env("GMM_MCL_WORKERS", workers).output().unwrap();
        assert_exit(&o, 0);
        let read = |ext: &str| std::fs::read(tmp.path().join(format!("{tag}.{ext}"))).unwrap();
        outputs.push((read("tum"), read("csv")));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn zero_length_sequence_writes_headers_only() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let c = GmmComponent::new(1.0, Vector3::new(0.0, 0.0, 2.0), Matrix3::identity() * 0.01).unwrap();
    GmmMap::new(vec![c], "world").unwrap().write_file(dir.join("map.gmm")).unwrap();
    datasets::write_trajectory(&Trajectory::new(vec![]).unwrap(), dir.join("gt.txt")).unwrap();
    let intr = CameraIntrinsics::from_fov(32, 24, 1.5).unwrap();
    SequenceManifest::new(vec![], Some(dir.join("gt.txt")), 5000.0, intr)
        .unwrap()
        .write(dir.join("manifest.txt"))
        .unwrap();
    let cfg = write(
        dir,
        "loc.cfg",
        "seed = 1\nmap = map.gmm\nmanifest = manifest.txt\nout.trajectory = est.tum\nout.metrics = m.csv\n",
    );
    let o = run(&["localize", cfg.to_str().unwrap()]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("steps 0"));
    assert_eq!(std::fs::read_to_string(dir.join("est.tum")).unwrap().lines().count(), 1);
    assert_eq!(std::fs::read_to_string(dir.join("m.csv")).unwrap().lines().count(), 1);
}

#[test]
fn config_and_usage_errors_exit_2_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let missing = dir.join("nope.xyz");
    let out = dir.join("map.gmm");
    let o = run(&[
        "fit-map",
        "--cloud",
        missing.to_str().unwrap(),
        "--components",
        "3",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&o, 2);
    assert!(!out.exists());

    let o = run(&["fit-map", "--components", "3"]);
    assert_exit(&o, 2);

    let cfg = write(dir, "bad.cfg", "seed = 1\nmap = missing.gmm\nout.trajectory = t\nout.metrics = m\n");
    assert_exit(&run(&["localize", cfg.to_str().unwrap()]), 2);

    // A typo'd key is rejected before any file is written.
    let seq = small_world(dir);
    let cfg = localize_cfg(dir, &seq, "typo");
    let o = run(&["localize", cfg.to_str().unwrap(), "--set", "filter.partcles=10"]);
    assert_exit(&o, 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("filter.partcles"));
    assert!(!dir.join("typo.tum").exists());

    let o = run(&["localize", cfg.to_str().unwrap(), "--set", "filter.particles=0"]);
    assert_exit(&o, 2);
    let o = bin().arg("localize").arg(&cfg).env("GMM_MCL_WORKERS", "0").output().unwrap();
    assert_exit(&o, 2);
}

#[test]
fn fit_map_three_clusters_writes_120_payload_bytes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut text = String::new();
    for (k, c) in [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 1.0]].iter().enumerate() {
        for i in 0..200 {
            // Deterministic spread on a small lattice around each center.
            let d = |j: usize| ((i * (j + 3) + k * 7) % 11) as f64 * 0.02 - 0.1;
            text += &format!("{} {} {}\n", c[0] + d(0), c[1] + d(1), c[2] + d(2));
        }
    }
    let cloud = write(dir, "cloud.xyz", &text);
    let out = dir.join("map.gmm");
    let o = run(&[
        "fit-map",
        "--cloud",
        cloud.to_str().unwrap(),
        "--components",
        "3",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&o, 0);
    let bytes = std::fs::read(&out).unwrap();
    let map = GmmMap::deserialize(&bytes).unwrap();
    assert_eq!(map.len(), 3);
    assert_eq!(map.memory_footprint(), 120);
    assert!(bytes.len() - 120 <= MAX_HEADER_BYTES);
    assert!(stdout(&o).contains("payload bytes 120"), "{}", stdout(&o));
}

#[test]
fn eval_reports_zero_and_constant_offset() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let traj = |dx: f64| {
        Trajectory::new(
            (0..20)
                .map(|k| TimedPose {
                    timestamp: k as f64 * 0.1,
                    pose: Pose::new(Vector3::new(k as f64 * 0.1 + dx, 1.0, 2.0), 0.3, 0.0, 0.0),
                })
                .collect(),
        )
        .unwrap()
    };
    datasets::write_trajectory(&traj(0.0), dir.join("truth.txt")).unwrap();
    datasets::write_trajectory(&traj(1.0), dir.join("shifted.txt")).unwrap();
    let truth = dir.join("truth.txt");
    let o = run(&["eval", "--est", truth.to_str().unwrap(), "--truth", truth.to_str().unwrap()]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("rmse 0.000000"), "{}", stdout(&o));

    let per_step = dir.join("steps.csv");
    let o = run(&[
        "eval",
        "--est",
        dir.join("shifted.txt").to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--out",
        per_step.to_str().unwrap(),
    ]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("rmse 1.000000"), "{}", stdout(&o));
    assert_eq!(std::fs::read_to_string(per_step).unwrap().lines().count(), 21);

    // Disjoint timestamps cannot be aligned.
    let late = Trajectory::new(vec![TimedPose { timestamp: 100.0, pose: Pose::identity() }]).unwrap();
    datasets::write_trajectory(&late, dir.join("late.txt")).unwrap();
    let o = run(&["eval", "--est", dir.join("late.txt").to_str().unwrap(), "--truth", truth.to_str().unwrap()]);
    assert_exit(&o, 1);
}

#[test]
fn sweep_emits_one_row_per_particle_count() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let seq = small_world(dir);
    let cfg = write(
        dir,
        "sweep.cfg",
        &format!(
            "seed = 5\n\
             map = {seq}/map.gmm\n\
             manifest = {seq}/manifest.txt\n\
             filter.groups = 8\n\
             filter.patch_size = 16\n\
             filter.stride = 8\n\
             init.extent = 0.05 0.05 0.05\n\
             init.yaw_range = 0.05\n\
             sweep.particles = 128 1068\n\
             sweep.reference_particles = 1068\n\
             sweep.trials = 2\n\
             sweep.convergence_trace = 1.0\n\
             out.csv = sweep.csv\n",
            seq = seq.display()
        ),
    );
    let o = run(&["sweep", cfg.to_str().unwrap()]);
    assert_exit(&o, 0);
    let mut reader = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[0], "n_particles");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "128");
    assert_eq!(&rows[1][0], "1068");
    assert!(rows.iter().all(|r| r[7].is_empty()), "{rows:?}");
}

#[test]
fn bench_stages_account_for_total_time() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let seq = small_world(dir);
    let cfg = write(
        dir,
        "bench.cfg",
        &format!(
            "seed = 2\n\
             map = {seq}/map.gmm\n\
             manifest = {seq}/manifest.txt\n\
             filter.patch_size = 16\n\
             bench.particles = 32 64\n\
             bench.steps = 100\n\
             bench.poses = 4\n\
             bench.repeats = 2\n\
             out.csv = bench.csv\n",
            seq = seq.display()
        ),
    );
    let o = run(&["bench", cfg.to_str().unwrap()]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("likelihood evaluations 8"), "{}", stdout(&o));
    let mut reader = csv::Reader::from_path(dir.join("bench.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        reader.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let (stages, total) = (r[2] + r[3] + r[4] + r[5], r[6]);
        assert!(stages >= 0.9 * total && stages <= total * 1.0001, "stages {stages} total {total}");
        assert_eq!(r[1], 100.0);
    }
}
