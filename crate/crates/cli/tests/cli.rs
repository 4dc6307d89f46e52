use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbf_core::metrics::{compute_metrics, EvalReport};
use nbf_core::Recording;
use tempfile::TempDir;

fn nbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbf"))
        .args(args)
        .env("NBF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nbf(args);
    assert!(
        out.status.success(),
        "nbf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "field": {
    "sources": [
      {"center": [0.03, 0.0, 0.08], "spatial_sigma": 0.05, "amplitude": 3e-5, "frequency": 1.0, "phase": 0.0},
      {"center": [-0.04, 0.03, 0.07], "spatial_sigma": 0.06, "amplitude": 2e-5, "frequency": 0.5, "phase": 1.0}
    ],
    "noise_sigma": 0.0,
    "seed": 3
  },
  "montage": {"fibonacci": {"n": 16, "radius": 0.09}},
  "sample_rate": 16.0,
  "duration": 9.0
}"#;

const SMALL_CONFIG: &str = r#"{
  "depth": 3, "width": 32, "m": 16, "sigma_b": 0.3, "pe_time_scale": 4.0,
  "dropout": 0.1, "learning_rate": 0.001,
  "epochs_first_window": 150, "epochs_subsequent": 60, "seed": 11
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("spec.json"), SMALL_SPEC).unwrap();
        std::fs::write(dir.path().join("config.json"), SMALL_CONFIG).unwrap();
        let f = Fixture { dir };
        ok(&["gen-synthetic", "--spec", s(&f.p("spec.json")), "--out", s(&f.p("rec.nbr"))]);
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "train",
            "--recording",
            s(&self.p("rec.nbr")).to_owned().leak(),
            "--config",
            s(&self.p("config.json")).to_owned().leak(),
            "--out",
            s(&self.p(out)).to_owned().leak(),
        ];
        args.extend_from_slice(extra);
        nbf(&args)
    }
}

#[test]
fn gen_default_bench_shape_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.nbr");
    let b = dir.path().join("b.nbr");
    let out = ok(&["gen-synthetic", "--spec", "default-bench", "--out", s(&a), "--seed", "4"]);
    ok(&["gen-synthetic", "--spec", "default-bench", "--out", s(&b), "--seed", "4"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("clean-sha256 "));
    let rec = Recording::load(&a).unwrap();
    assert_eq!((rec.n_channels(), rec.n_samples(), rec.sample_rate()), (64, 1152, 128.0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.montage.json").exists());
    assert!(dir.path().join("a.manifest.json").exists());
}

#[test]
fn gen_rejects_bad_spec() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SMALL_SPEC.replace("\"spatial_sigma\": 0.05", "\"spatial_sigma\": -0.05")).unwrap();
    let out = nbf(&["gen-synthetic", "--spec", s(&spec), "--out", s(&dir.path().join("r.nbr"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("spatial_sigma"));
    std::fs::write(&spec, SMALL_SPEC.replace("\"seed\": 3", "\"seed\": 3, \"sede\": 1")).unwrap();
    let out = nbf(&["gen-synthetic", "--spec", s(&spec), "--out", s(&dir.path().join("r.nbr"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_synthesize_render_pipeline() {
    let f = Fixture::new();
    let out = f.train("run", &["--holdout", "S005"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..3 {
        assert!(f.p("run").join(format!("window_{k:05}.nbfm")).exists());
    }
    assert!(!f.p("run").join("window_00003.nbfm").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(f.p("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["windows"].as_array().unwrap().len(), 3);
    assert!(report["windows"][0]["validation"]["S005"]["r2"].is_number());

    // Virtual electrodes at the training positions agree with the recording.
    ok(&["synthesize", "--checkpoints", s(&f.p("run")), "--positions", s(&f.p("rec.montage.json")), "--out", s(&f.p("self.nbr"))]);
    let syn = Recording::load(f.p("self.nbr")).unwrap();
    let rec = Recording::load(f.p("rec.nbr")).unwrap();
    assert_eq!((syn.n_channels(), syn.n_samples()), (16, rec.n_samples()));
    for label in rec.layout().labels() {
        if label == "S005" {
            continue;
        }
        let m = compute_metrics(syn.channel_by_label(label).unwrap(), rec.channel_by_label(label).unwrap()).unwrap();
        assert!(m.r2_raw > 0.9, "{label}: {}", m.r2_raw);
    }

    // Five virtual positions over three windows.
    let virt = r#"[{"label":"V1","pos":[0.0,0.0,0.09]},{"label":"V2","pos":[0.02,0.01,0.085]},
        {"label":"V3","pos":[-0.03,0.02,0.08]},{"label":"V4","pos":[0.05,-0.03,0.06]},{"label":"V5","pos":[0.0,0.06,0.065]}]"#;
    std::fs::write(f.p("virt.json"), virt).unwrap();
    ok(&["synthesize", "--checkpoints", s(&f.p("run")), "--positions", s(&f.p("virt.json")), "--out", s(&f.p("virt.nbr"))]);
    let v = Recording::load(f.p("virt.nbr")).unwrap();
    assert_eq!((v.n_channels(), v.n_samples()), (5, rec.n_samples()));
    assert_eq!(v.layout().labels(), vec!["V1", "V2", "V3", "V4", "V5"]);

    std::fs::write(f.p("empty.json"), "[]").unwrap();
    let out = nbf(&["synthesize", "--checkpoints", s(&f.p("run")), "--positions", s(&f.p("empty.json")), "--out", s(&f.p("e.nbr"))]);
    assert_eq!(code(&out), 2);

    // Rendering.
    let frames = f.p("frames");
    ok(&["render", "--checkpoints", s(&f.p("run")), "--resolution", "64", "--times", "0:8:4", "--out", s(&frames)]);
    for k in 0..3 {
        let text = std::fs::read_to_string(frames.join(format!("frame_{k:05}.pgm"))).unwrap();
        assert!(text.starts_with("P2\n64 64\n255\n"));
    }
    assert!(!frames.join("frame_00003.pgm").exists());
    let csv = f.p("csv");
    ok(&["render", "--checkpoints", s(&f.p("run")), "--resolution", "16", "--times", "2.5,2.5", "--out", s(&csv), "--format", "csv"]);
    let a = std::fs::read(csv.join("frame_00000.csv")).unwrap();
    let b = std::fs::read(csv.join("frame_00001.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let first_row: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(first_row.len(), 16);
    assert_eq!(first_row[0], "");
    assert!(text.lines().nth(8).unwrap().split(',').nth(8).unwrap().parse::<f64>().is_ok());
    let out = nbf(&["render", "--checkpoints", s(&f.p("run")), "--times", "20", "--out", s(&f.p("x"))]);
    assert_eq!(code(&out), 4);

    // A gap in the window sequence.
    std::fs::remove_file(f.p("run/window_00001.nbfm")).unwrap();
    let out = nbf(&["synthesize", "--checkpoints", s(&f.p("run")), "--positions", s(&f.p("virt.json")), "--out", s(&f.p("g.nbr"))]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("window 1"));
}

#[test]
fn train_rejects_unknown_holdout_and_config_keys() {
    let f = Fixture::new();
    let out = f.train("bad", &["--holdout", "Cz"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Cz"));
    std::fs::write(f.p("config.json"), r#"{"dpeth": 3}"#).unwrap();
    assert_eq!(code(&f.train("bad2", &[])), 2);
}

#[test]
fn train_failure_keeps_partial_checkpoints() {
    let dir = TempDir::new().unwrap();
    // The second 3 s window is flat, so its normalization fails.
    let layout = nbf_core::synthetic::fibonacci_montage(8, [0.0; 3], 0.09).unwrap();
    let rows = (0..8)
        .map(|c| (0..96).map(|i| if i < 48 { 1e-6 * ((c + 1) * i) as f64 } else { 0.0 }).collect())
        .collect();
    let rec = Recording::new(layout, 16.0, 0.0, rows).unwrap();
    rec.save(dir.path().join("flat.nbr")).unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"depth": 2, "width": 8, "m": 4, "epochs_first_window": 5, "epochs_subsequent": 2}"#).unwrap();
    let out = nbf(&[
        "train",
        "--recording",
        s(&dir.path().join("flat.nbr")),
        "--config",
        s(&dir.path().join("c.json")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(dir.path().join("run/window_00000.nbfm").exists());
    assert!(!dir.path().join("run/window_00001.nbfm").exists());
    let report = std::fs::read_to_string(dir.path().join("run/report.json")).unwrap();
    assert!(report.contains("degenerate signal"));
}

#[test]
fn evaluate_reports_each_method() {
    let f = Fixture::new();
    let out_path = f.p("eval.json");
    ok(&[
        "evaluate",
        "--recording",
        s(&f.p("rec.nbr")),
        "--holdout",
        "S003,S009",
        "--methods",
        "nbf,ssi,rbf",
        "--config",
        s(&f.p("config.json")),
        "--out",
        s(&out_path),
    ]);
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(report.methods.keys().collect::<Vec<_>>(), vec!["nbf", "rbf", "ssi"]);
    report.verify_aggregates().unwrap();
    assert_eq!(report.protocol.held_out, vec!["S003", "S009"]);

    let out = nbf(&["evaluate", "--recording", s(&f.p("rec.nbr")), "--holdout", "S003", "--methods", "svm", "--out", s(&out_path)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_constant_recording_with_ssi() {
    let dir = TempDir::new().unwrap();
    let layout = nbf_core::synthetic::fibonacci_montage(10, [0.0; 3], 0.09).unwrap();
    let rec = Recording::new(layout, 10.0, 0.0, vec![vec![7e-6; 30]; 10]).unwrap();
    rec.save(dir.path().join("c.nbr")).unwrap();
    let out_path = dir.path().join("eval.json");
    ok(&["evaluate", "--recording", s(&dir.path().join("c.nbr")), "--holdout", "S002", "--methods", "ssi", "--out", s(&out_path)]);
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    let ssi = &report.methods["ssi"];
    assert_eq!(ssi.channels[0].metrics.r2, 1.0);
    assert!(ssi.channels[0].metrics.degenerate_variance);
    assert_eq!(ssi.excluded.len(), 1);
}
