use std::path::Path;
use std::process::{Command, Output};

use huegan::colorspace::RgbImage;
use huegan::synthetic::write_corpus;
use tempfile::TempDir;

const TINY: [&str; 18] = [
    "--image_size",
    "32",
    "--batch_size",
    "2",
    "--base_width",
    "4",
    "--critic_width",
    "4",
    "--inject_channels",
    "2",
    "--noise_channels",
    "4",
    "--window",
    "2",
    "--heads",
    "2",
    "--mlp_ratio",
    "2",
];

fn huegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_huegan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(data: &Path, out: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        s(data),
        s(out),
        "--steps",
        steps,
        "--single-threaded",
    ];
    args.extend(TINY);
    args.extend(extra);
    huegan(&args)
}

fn corpus(n: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), n, 40, 11).unwrap();
    dir
}

#[test]
fn missing_data_dir_exits_2_and_names_it() {
    let out = tempfile::tempdir().unwrap();
    let missing = out.path().join("no-such-dir");
    let o = train_tiny(&missing, &out.path().join("run"), "1", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no-such-dir"), "{}", stderr(&o));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let data = corpus(4);
    let out = tempfile::tempdir().unwrap();
    let o = train_tiny(data.path(), out.path(), "1", &["--ablation", "bogus"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bogus"));

    let cfg = out.path().join("cfg.toml");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = huegan(&[
        "train",
        s(data.path()),
        s(&out.path().join("r")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_colorize_evaluate_round_trip() {
    let data = corpus(6);
    let work = tempfile::tempdir().unwrap();
    let run = work.path().join("run");
    let o = train_tiny(data.path(), &run, "1", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(run.join("checkpoint/manifest.json")).unwrap();
    assert!(manifest.contains("\"step\": 1"), "{manifest}");
    assert!(run.join("loss_log.csv").exists());
    assert!(run.join("config.toml").exists());

    // colorize keeps the input size; the seed decides the output
    let input = work.path().join("in.png");
    RgbImage::from_fn(40, 24, |x, y| [(x * 6) as u8, (y * 10) as u8, 90])
        .write_png(&input)
        .unwrap();
    let paint = |seed: &str, name: &str| {
        let dst = work.path().join(name);
        let o = huegan(&["colorize", s(&run), s(&input), s(&dst), "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(&dst).unwrap()
    };
    let a = paint("3", "a.png");
    let b = paint("3", "b.png");
    let c = paint("4", "c.png");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let img = RgbImage::read(work.path().join("a.png")).unwrap();
    assert_eq!((img.width(), img.height()), (40, 24));

    // evaluate: five summary keys, one CSV row per test image, reproducible
    let eval = |dir: &str| {
        let dst = work.path().join(dir);
        let o = huegan(&["evaluate", s(&run), s(data.path()), "--out", s(&dst)]);
        assert!(o.status.success(), "{}", stderr(&o));
        dst
    };
    let e1 = eval("e1");
    let e2 = eval("e2");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e1.join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 5, "{keys:?}");
    for k in [
        "psnr_db",
        "ssim",
        "colorfulness_pred",
        "colorfulness_gt",
        "delta_colorfulness",
    ] {
        assert!(summary[k].is_number(), "{k}");
    }
    let csv1 = std::fs::read_to_string(e1.join("metrics.csv")).unwrap();
    let csv2 = std::fs::read_to_string(e2.join("metrics.csv")).unwrap();
    assert_eq!(csv1, csv2);
    let test_size =
        huegan::pipeline::load_dataset(data.path(), huegan::pipeline::Split::Test, 0, 0.2)
            .unwrap()
            .len();
    assert_eq!(csv1.lines().count(), 1 + test_size);

    // resume continues the same run; other overrides are refused
    let o = huegan(&["train", s(data.path()), s(&run), "--resume", "--steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(run.join("checkpoint/manifest.json")).unwrap();
    assert!(manifest.contains("\"step\": 2"), "{manifest}");
    let o = huegan(&[
        "train",
        s(data.path()),
        s(&run),
        "--resume",
        "--lr_g",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unet_ablation_checkpoint_has_no_bottleneck_modules() {
    let data = corpus(4);
    let out = tempfile::tempdir().unwrap();
    let o = train_tiny(data.path(), out.path(), "1", &["--ablation", "unet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.path().join("checkpoint/manifest.json")).unwrap();
    assert!(manifest.contains("\"ablation\": \"unet\""), "{manifest}");
    for gone in ["color_encoder.", "fusion.", "transformer."] {
        assert!(!manifest.contains(gone), "{gone} present");
    }
    assert!(manifest.contains("decoder.head.weight"));
}

#[test]
fn evaluate_on_empty_dir_exits_2() {
    let data = corpus(4);
    let work = tempfile::tempdir().unwrap();
    let run = work.path().join("run");
    assert!(train_tiny(data.path(), &run, "0", &[]).status.success());
    let empty = work.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = huegan(&["evaluate", s(&run), s(&empty)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_catches_a_corrupted_backward() {
    let o = huegan(&["selftest"]);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "{stdout}{}", stderr(&o));
    assert!(
        stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 6,
        "{stdout}"
    );

    let o = huegan(&["selftest", "--inject-fault", "conv-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gradient checks"), "{}", stderr(&o));
}
