//! End-to-end command tests: preparation determinism, training artifacts,
//! prediction-set evaluation, dynamic-window inspection, and preset parsing.

use gscreen_core::cli::{
    cmd_dwm_debug, cmd_eval, cmd_prepare, cmd_train, cmd_tsne, PredRecord,
};
use gscreen_core::config::RunConfig;
use gscreen_core::data::SynthDatasetSpec;
use gscreen_core::model::Network;
use gscreen_core::Error;
use std::fs;
use std::path::Path;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::desk_default();
    cfg.data.synthetic = Some(SynthDatasetSpec {
        n_per_class: 6,
        image_size: 64,
        seed: 3,
        noise_sigma: 3.0,
        train_frac: 0.5,
        val_frac: 0.25,
    });
    cfg.model.backbone.stage_channels = [4, 8, 8, 16];
    cfg.model.backbone.embed_dim = 8;
    cfg.model.backbone.gn_groups = 2;
    cfg.model.backbone.reduction = 2;
    cfg.model.backbone.d_rf = 16;
    cfg.model.dwm.top_p = 2;
    cfg.train.iterations = 2;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 1;
    cfg.train.checkpoint_every = 100;
    cfg.eval.tsne.iterations = 60;
    cfg.eval.cam_count = 1;
    cfg
}

#[test]
fn prepare_writes_images_manifest_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.synthetic.as_mut().unwrap().n_per_class = 20;
    let out = dir.path().join("prep");
    let summary = cmd_prepare(&cfg, &out).unwrap();
    assert_eq!(summary.n_samples, 60);
    let images: Vec<_> = fs::read_dir(out.join("images")).unwrap().collect();
    assert_eq!(images.len(), 60);
    assert!(summary.manifest.exists());
    assert!(summary.prior_cache.exists());
    assert!(out.join("run.json").exists());

    let manifest = gscreen_core::data::load_manifest(&summary.manifest).unwrap();
    assert_eq!(manifest.class_counts.len(), 3);
    assert!(manifest.counts_consistent());
}

#[test]
fn prepare_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    cmd_prepare(&cfg, &out_a).unwrap();
    cmd_prepare(&cfg, &out_b).unwrap();
    let bytes = |p: &Path| fs::read(p.join("manifest.csv")).unwrap();
    assert_eq!(bytes(&out_a), bytes(&out_b));
    // a sampled image file is also identical
    let img = |p: &Path| fs::read(p.join("images/synth_0.png")).unwrap();
    assert_eq!(img(&out_a), img(&out_b));
}

#[test]
fn zero_lr_training_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.lr = 0.0;
    let out = dir.path().join("train");
    let summary = cmd_train(&cfg, &out).unwrap();
    assert!(summary.checkpoint.exists());
    assert!(summary.history.exists());

    let init_path = dir.path().join("init.gsar");
    Network::new(cfg.model.clone(), cfg.seed)
        .unwrap()
        .save(&init_path)
        .unwrap();
    assert_eq!(
        fs::read(&summary.checkpoint).unwrap(),
        fs::read(&init_path).unwrap()
    );

    // history is one JSON object per step
    let lines: Vec<String> = fs::read_to_string(&summary.history)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn eval_scores_perfect_prediction_set_at_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let preds: Vec<PredRecord> = (0..12)
        .map(|i| {
            let label = i % 3;
            let mut probs = vec![0.05, 0.05, 0.05];
            probs[label] = 0.9;
            PredRecord {
                id: Some(format!("s{i}")),
                label,
                probs,
            }
        })
        .collect();
    let pred_path = dir.path().join("preds.json");
    fs::write(&pred_path, serde_json::to_string(&preds).unwrap()).unwrap();

    let out = dir.path().join("eval");
    let summary = cmd_eval(&cfg, None, Some(&pred_path), &out).unwrap();
    assert_eq!(summary.accuracy, 1.0);
    assert!(out.join("metrics.json").exists());
    assert!(out.join("metrics_roc.png").exists());
    assert!(out.join("metrics_confusion.png").exists());
    // tri-class input also yields the merged binary view
    assert!(out.join("metrics_binary.json").exists());
}

#[test]
fn eval_requires_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let err = cmd_eval(&cfg, None, None, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn train_then_eval_tsne_and_dwm_debug_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.synthetic.as_mut().unwrap().n_per_class = 8;
    cfg.train.iterations = 3;
    let train_out = dir.path().join("train");
    let summary = cmd_train(&cfg, &train_out).unwrap();

    let eval_out = dir.path().join("eval");
    let eval = cmd_eval(&cfg, Some(&summary.checkpoint), None, &eval_out).unwrap();
    assert!(eval.n_samples > 0);
    assert!(eval_out.join("predictions.json").exists());

    let tsne_out = dir.path().join("tsne");
    let tsne = cmd_tsne(&cfg, &summary.checkpoint, &tsne_out).unwrap();
    let csv = fs::read_to_string(&tsne.csv).unwrap();
    assert!(csv.starts_with("id,x,y,label"));
    assert_eq!(csv.lines().count(), tsne.n_samples + 1);

    let dwm_out = dir.path().join("dwm");
    let dwm = cmd_dwm_debug(&cfg, Some(&summary.checkpoint), 0, &dwm_out).unwrap();
    let selections: Vec<gscreen_core::dwm::WindowSelection> =
        serde_json::from_str(&fs::read_to_string(&dwm.selections).unwrap()).unwrap();
    assert!(!selections.is_empty());
    assert!(selections.len() <= cfg.model.dwm.top_p);
    assert!(dwm.overlay.exists());
}

#[test]
fn dwm_debug_selection_matches_brute_force_and_hits_bright_blob() {
    // one sample whose only bright structure is the disc; the top window of
    // an exhaustive search must contain it, and the command must agree with
    // that search on the same feature map
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();

    // single test image: bright disc/cup blob at (28, 30) on a dark field
    let sample = gscreen_core::data::generate_synthetic(&gscreen_core::data::SyntheticSpec {
        image_size: 64,
        disc_radius_frac: 0.2,
        cdr: 0.85,
        noise_sigma: 1.0,
        seed: 4,
        disc_center: Some((28, 30)),
    })
    .unwrap();
    let gscreen_core::data::ImageRef::Memory(img) = &sample.image_ref else {
        panic!()
    };
    img.save(dir.path().join("blob.png")).unwrap();
    let gscreen_core::data::MaskRef::Memory(mask) = sample.roi_mask_ref.as_ref().unwrap() else {
        panic!()
    };
    mask.save(dir.path().join("blob_mask.png")).unwrap();
    fs::write(
        dir.path().join("manifest.csv"),
        "image_path,label,split,mask_path\nblob.png,1,test,blob_mask.png\n",
    )
    .unwrap();
    cfg.data.synthetic = None;
    cfg.data.manifest = Some(dir.path().join("manifest.csv"));
    cfg.eval.split = gscreen_core::data::Split::Test;

    let out = dir.path().join("dwm");
    let summary = cmd_dwm_debug(&cfg, None, 0, &out).unwrap();
    let selections: Vec<gscreen_core::dwm::WindowSelection> =
        serde_json::from_str(&fs::read_to_string(&summary.selections).unwrap()).unwrap();

    // rebuild the same network and inputs to recover the scored feature map
    let ds = gscreen_core::cli::load_dataset(&cfg).unwrap();
    let priors = gscreen_core::cli::build_priors(&cfg, &ds).unwrap();
    let net = Network::new(cfg.model.clone(), cfg.seed).unwrap();
    let test_idx = ds.indices_for(gscreen_core::data::Split::Test);
    let pipeline = gscreen_core::training::InputPipeline {
        input_size: cfg.preprocess.input_size,
        roi_scale: cfg.preprocess.roi_scale,
        normalize: cfg.preprocess.normalize.clone(),
        augment: None,
    };
    let batch = pipeline
        .build(&ds, &test_idx[..1], priors.as_ref(), 0)
        .unwrap();
    let pred = net
        .predict(&batch.x_global, &batch.x_roi, batch.priors.as_ref())
        .unwrap();
    assert_eq!(pred.selections[0], selections);

    // the disc centroid (mask centroid scaled to input size) falls inside
    // the top selection's crop rectangle
    let sample = &ds.samples[test_idx[0]];
    let mask = sample.mask.as_ref().unwrap();
    let (mut sr, mut sc, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y, px) in mask.enumerate_pixels() {
        if px[0] > 127 {
            sr += y as f64;
            sc += x as f64;
            n += 1;
        }
    }
    let scale = cfg.preprocess.input_size as f64 / sample.image.height() as f64;
    let (cy, cx) = (sr / n as f64 * scale, sc / n as f64 * scale);
    let (r0, c0, h, w) = selections[0].crop_rect;
    assert!(
        cy >= r0 as f64 && cy <= (r0 + h) as f64 && cx >= c0 as f64 && cx <= (c0 + w) as f64,
        "disc centroid ({cy:.1},{cx:.1}) outside top crop {:?}",
        selections[0].crop_rect
    );
}

#[test]
fn all_shipped_presets_parse_and_validate() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            let cfg = RunConfig::load(&path)
                .unwrap_or_else(|e| panic!("{} failed: {e}", path.display()));
            assert_eq!(cfg.schema_version, 1);
            count += 1;
        }
    }
    assert!(count >= 5, "expected at least 5 presets, found {count}");
}
