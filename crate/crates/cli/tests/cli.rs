use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mexgan::checkpoint::Checkpoint;
use mexgan::data::{color_encode, ColorPalette, LabelMap, RgbImage};
use serde_json::Value;

fn mexgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mexgan")).args(args).output().unwrap()
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

const TINY: &str = r#"{
  "epochs": 2, "decay_start": 1, "batch_size": 4, "disc_width": 4,
  "generator": {"downsamples": 1, "res_blocks": 1, "base_width": 4},
  "weights": {"schedule": {"q": 1, "alpha": 2, "beta": 2}}
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(images: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut args = vec!["synth-data", "--out", s(&data), "--train", "8", "--test", "4", "--height", "24", "--width", "24"];
        if images {
            args.push("--images");
        }
        let o = mexgan(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (config, data, out) = (self.path("tiny.json"), self.path("data"), self.path(out));
        let mut args = vec!["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        mexgan(&args)
    }
}

#[test]
fn train_without_config_is_a_usage_error() {
    let o = mexgan(&["train", "--out", "/nonexistent"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--config"));
    assert_eq!(code(&mexgan(&["train", "--config", "x.json", "--bogus"])), 2);
    assert_eq!(code(&mexgan(&["frobnicate"])), 2);
}

#[test]
fn bad_config_exits_2() {
    let f = Fixture::new(false);
    std::fs::write(f.path("bad.json"), r#"{"epochz": 3}"#).unwrap();
    let o = mexgan(&["train", "--config", s(&f.path("bad.json")), "--data", s(&f.path("data"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"));
    std::fs::write(f.path("neg.json"), r#"{"lr": -1.0}"#).unwrap();
    assert_eq!(code(&mexgan(&["train", "--config", s(&f.path("neg.json"))])), 2);
    assert_eq!(code(&mexgan(&["train", "--config", s(&f.path("missing.json"))])), 2);
}

#[test]
fn smoke_train_writes_run_dir_and_evaluates() {
    let f = Fixture::new(false);
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for rel in ["run/config.json", "run/log.jsonl", "run/checkpoints/epoch_2"] {
        assert!(f.path(rel).exists(), "{rel}");
    }
    let log = std::fs::read_to_string(f.path("run/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let ck = f.path("run/checkpoints/epoch_2");
    let report = f.path("report.json");
    let o = mexgan(&["evaluate", "--checkpoint", s(&ck), "--data", s(&f.path("data")), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["variant"], "mex");
    assert_eq!(v["seed"], 679);
    for k in ["tiou_mean", "hamm_mean", "fid"] {
        assert!(v[k].is_number(), "{k}");
    }
    assert!(v["ssim_mean"].is_null());
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new(false);
    let o = f.train("run", &["--variant", "a-mex", "--q", "2", "--alpha", "3", "--beta", "1", "--seed", "9", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&f.path("run/checkpoints/epoch_1")).unwrap();
    let c = &ck.config;
    assert_eq!(c.variant.name(), "a-mex");
    assert_eq!((c.weights.schedule.q, c.weights.schedule.alpha, c.weights.schedule.beta), (2, 3, 1));
    assert_eq!((c.seed, c.epochs, c.decay_start, c.disc_width), (9, 1, 1, 4));
}

#[test]
fn gl_equals_mex_with_q0() {
    let f = Fixture::new(false);
    assert_eq!(code(&f.train("gl", &["--variant", "gl"])), 0);
    assert_eq!(code(&f.train("mex", &["--variant", "mex", "--q", "0"])), 0);
    let a = Checkpoint::load(&f.path("gl/checkpoints/epoch_2")).unwrap();
    let b = Checkpoint::load(&f.path("mex/checkpoints/epoch_2")).unwrap();
    assert_eq!(a.tensors.len(), b.tensors.len());
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    let la = std::fs::read_to_string(f.path("gl/log.jsonl")).unwrap();
    let lb = std::fs::read_to_string(f.path("mex/log.jsonl")).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn sequential_flag_matches_parallel() {
    let f = Fixture::new(false);
    assert_eq!(code(&f.train("par", &["--epochs", "1"])), 0);
    assert_eq!(code(&f.train("seq", &["--epochs", "1", "--sequential"])), 0);
    let a = std::fs::read_to_string(f.path("par/log.jsonl")).unwrap();
    let b = std::fs::read_to_string(f.path("seq/log.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_continues_to_the_same_weights() {
    let f = Fixture::new(false);
    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["checkpoint_every"] = 1.into();
    std::fs::write(f.path("every.json"), cfg.to_string()).unwrap();
    let data = f.path("data");
    let o = mexgan(&["train", "--config", s(&f.path("every.json")), "--data", s(&data), "--out", s(&f.path("a"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mexgan(&["train", "--resume", s(&f.path("a/checkpoints/epoch_1")), "--data", s(&data), "--out", s(&f.path("b"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = Checkpoint::load(&f.path("a/checkpoints/epoch_2")).unwrap();
    let b = Checkpoint::load(&f.path("b/checkpoints/epoch_2")).unwrap();
    assert_eq!(a.step, b.step);
    assert_eq!(a.tensors.len(), b.tensors.len());
    for ((n, x), (_, y)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(x.data(), y.data(), "{n}");
    }
}

#[test]
fn edit_is_deterministic_and_preserves_context() {
    let f = Fixture::new(false);
    assert_eq!(code(&f.train("run", &["--epochs", "1"])), 0);
    let ck = f.path("run/checkpoints/epoch_1");
    let map = f.path("data/test/labels/00000.png");
    let palette = ColorPalette::load(&f.path("data/palette.json")).unwrap();
    let target = palette.editable_ids()[0].to_string();
    let run = |out: &str, bbox: &str, target: &str| {
        mexgan(&[
            "edit", "--checkpoint", s(&ck), "--label-map", s(&map), "--box", bbox, "--target", target,
            "--out", s(&f.path(out)),
        ])
    };
    assert_eq!(code(&run("e1", "3,4,12,15", &target)), 0);
    assert_eq!(code(&run("e2", "3,4,12,15", &target)), 0);
    for file in ["color.png", "labels.png"] {
        let a = std::fs::read(f.path("e1").join(file)).unwrap();
        let b = std::fs::read(f.path("e2").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let input = LabelMap::load_png(&map).unwrap();
    let rendering = color_encode(&input, &palette).unwrap();
    let color = RgbImage::load_png(&f.path("e1/color.png")).unwrap();
    let labels = LabelMap::load_png(&f.path("e1/labels.png")).unwrap();
    for r in 0..24 {
        for c in 0..24 {
            if !((3..=12).contains(&r) && (4..=15).contains(&c)) {
                assert_eq!(color.pixel(r, c), rendering.pixel(r, c));
                assert_eq!(labels.get(r, c), input.get(r, c));
            }
        }
    }

    assert_eq!(code(&run("bad", "5,5,4,9", &target)), 2);
    assert_eq!(code(&run("bad", "0,0,24,5", &target)), 2);
    assert_eq!(code(&run("bad", "-1,0,3,5", &target)), 2);
    assert_eq!(code(&run("bad", "1,2,3", &target)), 2);
    assert_eq!(code(&run("bad", "1,2,3,4", "0")), 2);
    assert_eq!(code(&run("bad", "1,2,3,4", "250")), 2);
    assert!(!f.path("bad").exists());
}

#[test]
fn inpaint_smoke_reports_image_metrics() {
    let f = Fixture::new(true);
    std::fs::write(
        f.path("inp.json"),
        r#"{"decay_start": 1, "batch_size": 4, "disc_width": 4,
            "generator": {"downsamples": 1, "res_blocks": 1, "base_width": 4}}"#,
    )
    .unwrap();
    for variant in ["gl-a-mex", "gl"] {
        let out = f.path(variant);
        let o = mexgan(&[
            "inpaint", "--variant", variant, "--config", s(&f.path("inp.json")), "--data", s(&f.path("data")),
            "--epochs", "2", "--masks-per-image", "2", "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        for k in ["ssim_mean", "l1_mean", "fid"] {
            assert!(v[k].is_number(), "{variant} {k}");
        }
        assert!(v["tiou_mean"].is_null());
        assert_eq!(v["n_samples"], 8);
        let ck = Checkpoint::load(&out.join("checkpoints/epoch_2")).unwrap();
        let sch = ck.config.weights.schedule;
        assert_eq!((sch.q, sch.alpha, sch.beta), (4, 4, 4));
    }
}

#[test]
fn q_sweep_writes_csv() {
    let f = Fixture::new(false);
    let out = f.path("sweep.csv");
    let o = mexgan(&[
        "q-sweep", "--config", s(&f.path("tiny.json")), "--data", s(&f.path("data")), "--qs", "0,2",
        "--epochs", "1", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "q,tiou,hamm");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("2,"));
}

#[test]
fn non_finite_loss_exits_3_with_abort_snapshot() {
    let f = Fixture::new(false);
    std::fs::write(
        f.path("boom.json"),
        r#"{"epochs": 2, "decay_start": 2, "lr": 1e300, "disc_width": 4,
            "generator": {"downsamples": 1, "res_blocks": 1, "base_width": 4}}"#,
    )
    .unwrap();
    let o = mexgan(&["train", "--config", s(&f.path("boom.json")), "--data", s(&f.path("data")), "--out", s(&f.path("nan"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let aborts: Vec<_> = std::fs::read_dir(f.path("nan/checkpoints"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("abort_step_"))
        .collect();
    assert_eq!(aborts.len(), 1);
}
