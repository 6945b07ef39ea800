use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adasfm_cli::commands::files;
use adasfm_cli::io;
use adasfm_core::pipeline::{run_pipeline, PipelineConfig};
use adasfm_core::synth::{evaluate, generate_scene, SceneSpec};

fn adasfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adasfm"))
        .args(args)
        .env("ADASFM_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_spec(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("spec.toml");
    fs::write(&p, body).unwrap();
    p
}

fn metric(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .to_string()
}

const RING: &str = "trajectory = \"ring\"\nnum_cameras = 24\nnum_points = 1500\nnoise_px = 0.5\n";

#[test]
fn synth_writes_reloadable_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), RING);
    let out = tmp.path().join("scene");
    let o = adasfm(&["synth", "--config", path(&spec), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 5);

    let expect = generate_scene(&SceneSpec {
        num_cameras: 24,
        num_points: 1500,
        noise_px: 0.5,
        ..Default::default()
    })
    .unwrap();
    let g = io::load(&out.join(files::GRAPH), io::parse_view_graph).unwrap();
    assert_eq!(g, expect.graph);
    assert_eq!(io::load(&out.join(files::KEYPOINTS), io::parse_keypoints).unwrap(), expect.keypoints);
    assert_eq!(io::load(&out.join(files::PRIORS), io::parse_priors).unwrap(), expect.priors);
    assert_eq!(io::load(&out.join(files::TRUTH), io::parse_truth).unwrap(), expect.truth);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), RING);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert!(adasfm(&["synth", "--config", path(&spec), "--seed", "5", "--out", path(dir)]).status.success());
    }
    for name in [files::GRAPH, files::KEYPOINTS, files::PRIORS, files::TRUTH, files::SCENE_SPEC] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn bad_fraction_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "outlier_edge_fraction = 1.5\n");
    let o = adasfm(&["synth", "--config", path(&spec), "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outlier_edge_fraction"));

    let spec = write_spec(tmp.path(), "num_camras = 4\n");
    let o = adasfm(&["synth", "--config", path(&spec), "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_camras"));
}

#[test]
fn missing_scene_is_an_io_error_and_bad_graph_a_stage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = adasfm(&["pipeline", "--scene", path(&tmp.path().join("nowhere")), "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(4));

    let scene = tmp.path().join("empty");
    fs::create_dir_all(&scene).unwrap();
    fs::write(scene.join(files::GRAPH), "adasfm-viewgraph 1\n").unwrap();
    fs::write(scene.join(files::KEYPOINTS), "adasfm-keypoints 1\n").unwrap();
    let o = adasfm(&["global", "--scene", path(&scene), "--out", path(&tmp.path().join("w"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exact_ring_pipeline_registers_every_image() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "num_cameras = 60\nnum_points = 4000\n");
    let scene = tmp.path().join("scene");
    assert!(adasfm(&["synth", "--config", path(&spec), "--out", path(&scene)]).status.success());
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[partition]\nmax_partition_size = 25\n").unwrap();
    let out = tmp.path().join("run");
    let o = adasfm(&["pipeline", "--scene", path(&scene), "--config", path(&cfg), "--out", path(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join(files::METRICS)).unwrap();
    assert_eq!(metric(&metrics, "num_registered"), "60");
    let echo = fs::read_to_string(out.join(files::CONFIG)).unwrap();
    assert!(echo.contains("max_partition_size = 25") && echo.contains("workers = 2"), "{echo}");
    for name in [files::POSES, files::POINTS, files::RECONSTRUCTION, files::PARTITIONS, files::TIMINGS] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn outlier_edges_are_counted_in_the_global_report() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "num_cameras = 40\nnum_points = 3000\noutlier_edge_fraction = 0.3\n");
    let scene = tmp.path().join("scene");
    assert!(adasfm(&["synth", "--config", path(&spec), "--out", path(&scene)]).status.success());
    let out = tmp.path().join("run");
    let o = adasfm(&["pipeline", "--scene", path(&scene), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = io::load(&scene.join(files::TRUTH), io::parse_truth).unwrap();
    let planted = truth.outlier_edges.len() as f64;
    let report = fs::read_to_string(out.join(files::GLOBAL_REPORT)).unwrap();
    let removed: f64 = metric(&report, "removed_edges").parse().unwrap();
    assert!((removed - planted).abs() <= 0.05 * planted, "removed {removed}, planted {planted}");
}

#[test]
fn missing_priors_file_is_tolerated() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), RING);
    let scene = tmp.path().join("scene");
    assert!(adasfm(&["synth", "--config", path(&spec), "--out", path(&scene)]).status.success());
    fs::remove_file(scene.join(files::PRIORS)).unwrap();
    let out = tmp.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_adasfm"))
        .args(["pipeline", "--scene", path(&scene), "--out", path(&out)])
        .env("ADASFM_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("augmentation skipped"));
}

#[test]
fn eval_reports_truth_and_empty_reconstructions() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), RING);
    let scene = tmp.path().join("scene");
    assert!(adasfm(&["synth", "--config", path(&spec), "--out", path(&scene)]).status.success());
    let truth = io::load(&scene.join(files::TRUTH), io::parse_truth).unwrap();
    let mut recon = adasfm_core::scene::Reconstruction::new(adasfm_core::scene::Frame::Global);
    recon.poses = truth.poses.clone();
    let recon_path = tmp.path().join("truth_recon.txt");
    fs::write(&recon_path, io::format_reconstruction(&recon)).unwrap();

    let mut reports = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("eval{k}"));
        let o = adasfm(&["eval", "--scene", path(&scene), "--reconstruction", path(&recon_path), "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(fs::read(out.join(files::METRICS)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let text = String::from_utf8(reports[0].clone()).unwrap();
    assert!(metric(&text, "ate").parse::<f64>().unwrap() < 1e-9);

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "adasfm-reconstruction 1\nframe global\n").unwrap();
    let out = tmp.path().join("eval_empty");
    assert!(adasfm(&["eval", "--scene", path(&scene), "--reconstruction", path(&empty), "--out", path(&out)]).status.success());
    let text = fs::read_to_string(out.join(files::METRICS)).unwrap();
    assert_eq!(metric(&text, "num_registered"), "0");
    assert_eq!(metric(&text, "ate"), "undefined");
}

#[test]
fn stages_run_one_by_one_match_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        "num_cameras = 36\nnum_points = 2500\nnoise_px = 0.5\noutlier_match_fraction = 0.1\nsensor_rotation_noise_deg = 0.3\n",
    );
    let scene = tmp.path().join("scene");
    assert!(adasfm(&["synth", "--config", path(&spec), "--out", path(&scene)]).status.success());
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[partition]\nmax_partition_size = 15\n").unwrap();

    let whole = tmp.path().join("whole");
    assert!(adasfm(&["pipeline", "--scene", path(&scene), "--config", path(&cfg), "--out", path(&whole)]).status.success());
    let staged = tmp.path().join("staged");
    for stage in ["global", "refine", "partition", "local", "align"] {
        let o = adasfm(&[stage, "--scene", path(&scene), "--config", path(&cfg), "--out", path(&staged)]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read_to_string(whole.join(files::METRICS)).unwrap();
    let b = fs::read_to_string(staged.join(files::METRICS)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(whole.join(files::RECONSTRUCTION)).unwrap(),
        fs::read(staged.join(files::RECONSTRUCTION)).unwrap()
    );

    let bundle = adasfm_cli::commands::load_scene(&scene).unwrap();
    let mut config = PipelineConfig::default();
    config.partition.max_partition_size = 15;
    let mem = run_pipeline(&bundle.graph, &bundle.priors, &bundle.keypoints, &config).unwrap();
    let m = evaluate(&mem.reconstruction, bundle.truth.as_ref().unwrap(), &bundle.graph, &bundle.keypoints);
    assert_eq!(m.to_text(), a);
}
