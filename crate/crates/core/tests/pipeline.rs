use std::collections::BTreeSet;
use std::path::PathBuf;

use huegan::colorspace::{denormalize_lab, lab_to_srgb, NormalizedLab, RgbImage};
use huegan::metrics::PSNR_CAP;
use huegan::model::Ablation;
use huegan::pipeline::{
    self, evaluate_with, load_dataset, Checkpoint, Split, TrainConfig, TrainState,
};
use huegan::synthetic::write_corpus;
use huegan::Error;

fn tiny(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        image_size: 32,
        batch_size: 2,
        base_width: 8,
        critic_width: 8,
        inject_channels: 4,
        noise_channels: 8,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        ablation,
        single_threaded: true,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    }
}

fn names(paths: &[PathBuf]) -> BTreeSet<String> {
    paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect()
}

#[test]
fn ten_images_split_eight_two_and_stay_put() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10, 24, 1).unwrap();
    let train = load_dataset(dir.path(), Split::Train, 5, 0.2).unwrap();
    let test = load_dataset(dir.path(), Split::Test, 5, 0.2).unwrap();
    let all = load_dataset(dir.path(), Split::All, 5, 0.2).unwrap();
    assert_eq!((train.len(), test.len(), all.len()), (8, 2, 10));
    let (tr, te) = (names(train.paths()), names(test.paths()));
    assert!(tr.is_disjoint(&te));
    assert_eq!(
        tr.union(&te).cloned().collect::<BTreeSet<_>>(),
        names(all.paths())
    );

    let again = load_dataset(dir.path(), Split::Test, 5, 0.2).unwrap();
    assert_eq!(again.paths(), test.paths());
    let other: Vec<BTreeSet<String>> = (6..12)
        .map(|seed| {
            names(
                load_dataset(dir.path(), Split::Test, seed, 0.2)
                    .unwrap()
                    .paths(),
            )
        })
        .collect();
    assert!(other.iter().any(|s| *s != te), "split ignores the seed");
}

#[test]
fn voc_layout_uses_the_official_lists() {
    let dir = tempfile::tempdir().unwrap();
    let jpeg = dir.path().join("JPEGImages");
    std::fs::create_dir_all(&jpeg).unwrap();
    let lists = dir.path().join("ImageSets/Main");
    std::fs::create_dir_all(&lists).unwrap();
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        huegan::synthetic::scene(16, i as u64)
            .to_image()
            .save(jpeg.join(format!("{name}.jpg")))
            .unwrap();
    }
    std::fs::write(lists.join("train.txt"), "a\nc\n").unwrap();
    std::fs::write(lists.join("val.txt"), "b\n").unwrap();
    let train = load_dataset(dir.path(), Split::Train, 0, 0.5).unwrap();
    let test = load_dataset(dir.path(), Split::Test, 0, 0.5).unwrap();
    assert_eq!(
        names(train.paths()),
        BTreeSet::from(["a.jpg".to_string(), "c.jpg".to_string()])
    );
    assert_eq!(names(test.paths()), BTreeSet::from(["b.jpg".to_string()]));
}

#[test]
fn grayscale_and_broken_files_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 3, 16, 2).unwrap();
    RgbImage::from_fn(16, 16, |x, _| [x as u8 * 9; 3])
        .write_png(dir.path().join("gray.png"))
        .unwrap();
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    match load_dataset(dir.path(), Split::All, 0, 0.2) {
        Err(Error::Dataset(msg)) => {
            assert!(msg.contains("gray.png"), "{msg}");
            assert!(msg.contains("broken.png"), "{msg}");
        }
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn missing_or_empty_directories_are_dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&dir.path().join("nope"), Split::All, 0, 0.2).unwrap_err();
    assert!(err.is_usage() && err.to_string().contains("nope"), "{err}");
    let err = load_dataset(dir.path(), Split::All, 0, 0.2).unwrap_err();
    assert!(err.is_usage(), "{err}");
}

#[test]
fn batches_have_network_shapes_and_round_trip_to_rgb() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 3, 40, 3).unwrap();
    let ds = load_dataset(dir.path(), Split::All, 0, 0.2).unwrap();
    let b = ds.make_batch(&[0, 2], 32).unwrap();
    assert_eq!(b.ln.shape(), &[2, 1, 32, 32]);
    assert_eq!(b.ab.shape(), &[2, 2, 32, 32]);
    assert!(b.ln.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let plane = 32 * 32;
    for (k, rgb) in b.rgb.iter().enumerate() {
        let n = NormalizedLab {
            width: 32,
            height: 32,
            l: b.ln.data()[k * plane..(k + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            a: b.ab.data()[2 * k * plane..(2 * k + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            b: b.ab.data()[(2 * k + 1) * plane..(2 * k + 2) * plane]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        };
        let back = lab_to_srgb(&denormalize_lab(&n));
        let worst = back
            .data()
            .iter()
            .zip(rgb.data())
            .map(|(&x, &y)| x.abs_diff(y))
            .max()
            .unwrap();
        assert!(worst <= 1, "round trip off by {worst}");
    }
}

#[test]
fn l1_alone_fits_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 2, 32, 4).unwrap();
    let cfg = TrainConfig {
        lambda_g: 0.0,
        lambda_p: 0.0,
        lambda_c: 0.0,
        lambda_l1: 10.0,
        test_fraction: 0.0,
        ..tiny(Ablation::Full)
    };
    let data = load_dataset(dir.path(), Split::Train, cfg.seed, cfg.test_fraction).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    state.run(&data, 300, None, &mut |_| {}).unwrap();
    let tail: Vec<f64> = state.log.iter().rev().take(10).map(|r| r.l1).collect();
    let l1 = tail.iter().sum::<f64>() / tail.len() as f64;
    let first = state.log[0].l1;
    assert!(l1 < 0.5 * first, "L1 {first} -> {l1} after 300 steps");
}

#[test]
fn zero_steps_writes_the_initial_checkpoint_only() {
    let data = tempfile::tempdir().unwrap();
    write_corpus(data.path(), 4, 32, 5).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: Some(0),
        ..tiny(Ablation::Full)
    };
    let state = pipeline::train(&cfg, data.path(), out.path(), &mut |_| {}).unwrap();
    assert_eq!(state.step, 0);
    assert!(state.log.is_empty());
    let ck = Checkpoint::load(&out.path().join("checkpoint")).unwrap();
    assert_eq!(ck.step, 0);
    assert!(ck.loss_log.is_empty());
    let fresh = TrainState::new(cfg).unwrap();
    for (name, p) in fresh.g_params.iter() {
        assert_eq!(&ck.tensors[name], &p.value, "{name}");
    }
}

#[test]
fn unet_checkpoint_holds_only_unet_parameters() {
    let data = tempfile::tempdir().unwrap();
    write_corpus(data.path(), 4, 32, 6).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: Some(1),
        ..tiny(Ablation::Unet)
    };
    pipeline::train(&cfg, data.path(), out.path(), &mut |_| {}).unwrap();
    let manifest = Checkpoint::read_manifest(&out.path().join("checkpoint")).unwrap();
    let got: BTreeSet<String> = manifest
        .entries
        .iter()
        .map(|e| e.name.clone())
        .filter(|n| !n.starts_with("adam."))
        .collect();
    assert!(manifest
        .entries
        .iter()
        .any(|e| e.name == "adam.generator.m.decoder.head.weight"));
    let full = TrainState::new(tiny(Ablation::Full)).unwrap();
    let expected: BTreeSet<String> = full
        .to_checkpoint()
        .names()
        .into_iter()
        .filter(|n| !n.starts_with("adam."))
        .filter(|n| {
            !["color_encoder.", "fusion.", "transformer."]
                .iter()
                .any(|m| n.starts_with(m))
        })
        .map(String::from)
        .collect();
    assert_eq!(got, expected);
    assert_eq!(manifest.config.unwrap().ablation, Ablation::Unet);
}

#[test]
fn ground_truth_bypass_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 5, 24, 7).unwrap();
    let ds = load_dataset(dir.path(), Split::All, 0, 0.2).unwrap();
    let report = evaluate_with(&ds, &TrainConfig::desk(), |_, gt| Ok(gt.clone())).unwrap();
    assert_eq!(report.rows.len(), 5);
    assert_eq!(report.summary.psnr_db, PSNR_CAP);
    assert!((report.summary.ssim - 1.0).abs() < 1e-12);
    assert_eq!(report.summary.delta_colorfulness, 0.0);
}

#[test]
fn evaluation_is_reproducible_and_covers_the_test_split() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10, 32, 8).unwrap();
    let cfg = TrainConfig {
        test_fraction: 0.3,
        ..tiny(Ablation::Full)
    };
    let colorizer = huegan::pipeline::Colorizer::from(TrainState::new(cfg.clone()).unwrap());
    let ds = load_dataset(dir.path(), Split::Test, cfg.seed, cfg.test_fraction).unwrap();
    let a = pipeline::evaluate(&colorizer, &ds).unwrap();
    let b = pipeline::evaluate(&colorizer, &ds).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
}
