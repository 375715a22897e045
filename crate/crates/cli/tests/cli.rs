//! Black-box tests against the built binary: golden help output, exit codes,
//! and the file-level behavior of every subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cpgan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_output_matches_golden_files() {
    let cases: &[(&str, Option<&str>)] = &[
        ("help.txt", None),
        ("help_train.txt", Some("train")),
        ("help_eval.txt", Some("eval")),
        ("help_pseudolabel.txt", Some("pseudolabel")),
        ("help_composite.txt", Some("composite")),
        ("help_synth-data.txt", Some("synth-data")),
        ("help_plot.txt", Some("plot")),
    ];
    for (file, sub) in cases {
        let out = match sub {
            Some(s) => run(&[s, "--help"]),
            None => run(&["--help"]),
        };
        assert!(out.status.success(), "{:?} --help failed", sub);
        let golden_path = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(file);
        let golden = std::fs::read_to_string(&golden_path).expect("golden file present");
        assert_eq!(stdout(&out), golden, "help text drifted for {:?}", sub);
    }
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = run(&["composite", "--nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error-code: 1:"), "{}", stderr(&out));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "composite",
        "--fg",
        "/nonexistent/fg.png",
        "--bg",
        "/nonexistent/bg.png",
        "--mask",
        "/nonexistent/m.png",
        "--out",
        dir.path().join("o.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error-code: 2:"));
}

fn write_png_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
    img.save(path).unwrap();
}

#[test]
fn composite_with_white_mask_returns_foreground() {
    let dir = tempfile::tempdir().unwrap();
    let fg = dir.path().join("fg.png");
    let bg = dir.path().join("bg.png");
    let mask = dir.path().join("mask.png");
    let out_path = dir.path().join("out.png");
    write_png_rgb(&fg, 24, 24, |x, y| [(x * 10) as u8, (y * 10) as u8, 77]);
    write_png_rgb(&bg, 24, 24, |_, _| [0, 255, 0]);
    let white = image::GrayImage::from_pixel(24, 24, image::Luma([255]));
    white.save(&mask).unwrap();

    let out = run(&[
        "composite",
        "--fg",
        fg.to_str().unwrap(),
        "--bg",
        bg.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let a = image::open(&fg).unwrap().into_rgb8();
    let b = image::open(&out_path).unwrap().into_rgb8();
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            assert!(
                (pa.0[c] as i16 - pb.0[c] as i16).abs() <= 1,
                "channel diff beyond quantization"
            );
        }
    }
}

#[test]
fn composite_rejects_mismatched_mask_size() {
    let dir = tempfile::tempdir().unwrap();
    let fg = dir.path().join("fg.png");
    let bg = dir.path().join("bg.png");
    let mask = dir.path().join("mask.png");
    write_png_rgb(&fg, 16, 16, |_, _| [10, 10, 10]);
    write_png_rgb(&bg, 16, 16, |_, _| [20, 20, 20]);
    let small = image::GrayImage::from_pixel(8, 8, image::Luma([255]));
    small.save(&mask).unwrap();
    let out = run(&[
        "composite",
        "--fg",
        fg.to_str().unwrap(),
        "--bg",
        bg.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--out",
        dir.path().join("o.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_data_writes_the_folder_layout_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("d1");
    let out2 = dir.path().join("d2");
    for out_dir in [&out1, &out2] {
        let out = run(&[
            "synth-data",
            "--seed",
            "5",
            "--count",
            "4",
            "--resolution",
            "32",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for sub in ["foreground", "background", "masks"] {
        let n1 = std::fs::read_dir(out1.join(sub)).unwrap().count();
        assert_eq!(n1, 4, "{} should hold 4 files", sub);
    }
    let f1 = std::fs::read(out1.join("foreground/00002.png")).unwrap();
    let f2 = std::fs::read(out2.join("foreground/00002.png")).unwrap();
    assert_eq!(f1, f2, "same seed gives identical bytes");
}

#[test]
fn pseudolabel_processes_a_folder() {
    let dir = tempfile::tempdir().unwrap();
    let in_dir = dir.path().join("in");
    let out_dir = dir.path().join("out");
    std::fs::create_dir_all(&in_dir).unwrap();
    // separable image: bright square on dark background
    write_png_rgb(&in_dir.join("a.png"), 48, 48, |x, y| {
        if (12..36).contains(&x) && (12..36).contains(&y) {
            [230, 40, 40]
        } else {
            [20, 20, 120]
        }
    });
    let out = run(&[
        "pseudolabel",
        "--in",
        in_dir.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mask = image::open(out_dir.join("a.png")).unwrap().into_luma8();
    assert_eq!(mask.dimensions(), (48, 48));
    let fg = mask.pixels().filter(|p| p.0[0] > 128).count();
    let frac = fg as f64 / (48.0 * 48.0);
    assert!((0.15..0.4).contains(&frac), "square covers ~25%, got {}", frac);
}

#[test]
fn plot_renders_a_small_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    std::fs::write(
        &csv,
        "step,L_D,L_G,L_ss,lambda,schedule_iou,proxy_fid,miou,fg_iou,degenerate_frac,wall_ms\n\
         1,1.5,0.7,0.6,0.5,0.1,,,,,12\n\
         2,1.2,0.8,0.5,0.1,0.5,0.9,0.4,0.3,0.0,11\n\
         3,1.0,0.9,0.4,0,0.85,,,,,10\n",
    )
    .unwrap();
    let out_png = dir.path().join("plot.png");
    let out = run(&[
        "plot",
        "--metrics",
        csv.to_str().unwrap(),
        "--out",
        out_png.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let img = image::open(&out_png).unwrap();
    assert!(img.width() > 100 && img.height() > 100);
}

#[test]
fn train_rejects_bad_config_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"dataset":"synthetic://1/8","resolution":32,"batch_size":0,"total_steps":4}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("batch_size"),
        "error names the offending field: {}",
        stderr(&out)
    );
}

#[test]
fn train_then_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let runs = dir.path().join("runs");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{
  "dataset": "synthetic://9/12",
  "resolution": 32,
  "batch_size": 4,
  "total_steps": 4,
  "eval_every": 2,
  "checkpoint_every": 2,
  "seed": 1,
  "gen_base_width": 4,
  "disc_base_width": 4,
  "pseudo_cache_dir": {:?},
  "run_name": "t"
}}"#,
            dir.path().join("cache")
        ),
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run_dir = PathBuf::from(stdout(&out).trim());
    assert!(run_dir.join("metrics.csv").exists());
    let ckpt = run_dir.join("checkpoints/step_4.ckpt");
    assert!(ckpt.exists());

    let report_path = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "synthetic://9/12",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["n_images"], 12);
    assert!(report["proxy_fid"].as_f64().unwrap() >= 0.0);
    assert!(report["miou"].as_f64().is_some());
    assert_eq!(report["extractor_seed"], 90210);
}

#[test]
fn numeric_blowup_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{
  "dataset": "synthetic://2/8",
  "resolution": 32,
  "batch_size": 4,
  "total_steps": 50,
  "seed": 3,
  "lr": 1e32,
  "gen_base_width": 4,
  "disc_base_width": 4,
  "pseudo_cache_dir": {:?},
  "out_dir": {:?},
  "run_name": "blowup"
}}"#,
            dir.path().join("cache"),
            dir.path().join("runs")
        ),
    )
    .unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error-code: 3:"));
}
