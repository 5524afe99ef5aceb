use tempfile::TempDir;

use semifragile_core::dataset::{ingest, write_synthetic_corpus, DatasetManifest, Split};
use semifragile_core::detector::{bitwise_accuracy, detect, DetectionProfile, Verdict};
use semifragile_core::eval::{
    adaptive_attack_eval, calibrate_on, fragility_probe, publish, random_watermarks, robustness_sweep,
    ManipulationProxy,
};
use semifragile_core::imaging::{load_image, save_image, Image};
use semifragile_core::models::{Checkpoint, ModelBundle};
use semifragile_core::postprocess::full_grid;
use semifragile_core::trainer::{train, TrainArtifacts, TrainingConfig};
use semifragile_core::Error;

fn tiny_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        epochs: 2,
        batch_size: 3,
        width: 4,
        image_size: 32,
        val_images: 2,
        seed,
        ..TrainingConfig::default()
    }
}

struct Corpus {
    _dir: TempDir,
    manifest: DatasetManifest,
}

fn corpus(count: usize) -> Corpus {
    let dir = TempDir::new().unwrap();
    write_synthetic_corpus(dir.path(), count, 32, 4).unwrap();
    let (manifest, skipped) = ingest(dir.path(), 9).unwrap();
    assert!(skipped.is_empty());
    Corpus { _dir: dir, manifest }
}

#[test]
fn train_save_load_embed_detect() {
    let c = corpus(12);
    let train_set = c.manifest.load_split(Split::Train, 32).unwrap();
    let val = c.manifest.load_split(Split::Val, 32).unwrap();
    let test = c.manifest.load_split(Split::Test, 32).unwrap();
    let cfg = tiny_config(3);

    let out_dir = TempDir::new().unwrap();
    let artifacts = TrainArtifacts { dir: out_dir.path().to_path_buf() };
    let out = train(&train_set, &val, &cfg, Some(&artifacts)).unwrap();
    for f in [artifacts.best_checkpoint(), artifacts.last_checkpoint(), artifacts.log_path(), artifacts.report_path()] {
        assert!(f.exists(), "{} missing", f.display());
    }

    let loaded = Checkpoint::load(&artifacts.best_checkpoint()).unwrap();
    assert_eq!(loaded.config_hash(), cfg.hash());
    assert_eq!(loaded.bundle, out.best);

    let wm = random_watermarks(1, 30, 1).remove(0);
    let a = out.best.embed(&test[0], &wm).unwrap();
    let b = loaded.bundle.embed(&test[0], &wm).unwrap();
    assert_eq!(a, b);

    let (tau, negatives) = calibrate_on(&loaded.bundle, &val, 5, 0.01).unwrap();
    assert_eq!(negatives.len(), val.len() * full_grid().len());
    let profile = DetectionProfile::calibrate("p", wm.clone(), &negatives, 0.01, cfg.hash()).unwrap();
    assert_eq!(profile.threshold, tau);
    let d = detect(&a, &profile, &loaded.bundle).unwrap();
    let expect = if d.bitacc < tau { Verdict::Fake } else { Verdict::Real };
    assert_eq!(d.verdict, expect);
    assert_eq!(d.bitacc, bitwise_accuracy(&d.extracted, &wm).unwrap());

    assert!(matches!(profile.check_hash("other"), Err(Error::ConfigMismatch { .. })));
}

#[test]
fn png_publication_matches_in_memory_quantization() {
    let models = ModelBundle::<f32>::init(tiny_config(0).arch(), 2);
    let images: Vec<Image> = (0..3).map(|i| semifragile_core::dataset::synthetic_image(i, 32)).collect();
    let marks = random_watermarks(3, 30, 8);
    let published = publish(&models, &images, &marks).unwrap();
    let dir = TempDir::new().unwrap();
    for (i, (img, wm)) in images.iter().zip(&marks).enumerate() {
        let path = dir.path().join(format!("{i}.png"));
        save_image(&models.embed(img, wm).unwrap(), &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), published[i]);
    }
}

#[test]
fn reports_cover_the_grid_and_label_proxies() {
    let c = corpus(10);
    let test = c.manifest.load_split(Split::Train, 32).unwrap();
    let models = ModelBundle::<f32>::init(tiny_config(0).arch(), 6);
    let marks = random_watermarks(test.len(), 30, 2);

    let sweep = robustness_sweep(&models, &test, &marks, Some(0.9), "h").unwrap();
    assert_eq!(sweep.rows.len(), full_grid().len());
    assert_eq!(sweep.jpeg_curve().len(), 10);
    assert!(sweep.rows.iter().all(|r| r.detection_rate.is_some()));

    let probe = fragility_probe(&models, &test, &marks, ManipulationProxy::RegionReplace { fraction: 1.0 }, None, None, 1)
        .unwrap();
    assert!(probe.note.contains("proxies"));
    assert_eq!(probe.bitaccs.len(), test.len());

    let attacker = ModelBundle::<f32>::init(tiny_config(0).arch(), 7);
    let report = adaptive_attack_eval(
        &models,
        &attacker,
        &test,
        &marks,
        ManipulationProxy::RegionReplace { fraction: 0.6 },
        0.9,
        2,
        3,
    )
    .unwrap();
    assert_eq!(report.metrics.negatives, test.len() * full_grid().len());
    assert!(report.note.contains("proxies"));
}

#[test]
fn foreign_reencode_uses_the_other_model() {
    let c = corpus(10);
    let test = c.manifest.load_split(Split::Train, 32).unwrap();
    let models = ModelBundle::<f32>::init(tiny_config(0).arch(), 6);
    let foreign = ModelBundle::<f32>::init(tiny_config(0).arch(), 8);
    let marks = random_watermarks(test.len(), 30, 2);
    let proxy = ManipulationProxy::ForeignReencode;
    assert!(fragility_probe(&models, &test, &marks, proxy, None, None, 1).is_err());
    let probe = fragility_probe(&models, &test, &marks, proxy, None, Some(&foreign), 1).unwrap();
    assert_eq!(probe.bitaccs.len(), test.len());
}
