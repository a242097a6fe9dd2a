//! Command implementations behind the `gscreen` binary: data preparation,
//! training, evaluation, saliency, embedding export, and dynamic-window
//! inspection. Every command writes its outputs under one directory plus a
//! machine-readable `run.json` summary (no timestamps, so reruns with the
//! same seed produce identical trees).

use crate::attention::prior::{write_prior_cache, PriorEncoder};
use crate::config::RunConfig;
use crate::data::{
    load_manifest, synthetic_dataset, write_manifest, Dataset, FundusSample, ImageRef, Label,
    Manifest, MaskRef, Split,
};
use crate::error::{Error, Result};
use crate::evaluation::plots::{
    render_confusion, render_dwm_overlay, render_roc, render_saliency_overlay,
};
use crate::evaluation::{compute_metrics, default_layer, grad_cam_pp, tsne_export, MetricsReport};
use crate::model::{to_binary, HeadMode, Network};
use crate::preprocess::{
    apply_clahe, bilinear_resize_rgb, extract_crop, knowledge_enhance, locate_roi,
    AugmentationPolicy,
};
use crate::training::{train, InputPipeline, TrainData};
use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_summary(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    outputs: serde_json::Value,
) -> Result<()> {
    let summary = serde_json::json!({
        "command": command,
        "schema_version": cfg.schema_version,
        "seed": cfg.seed,
        "outputs": outputs,
    });
    write_json(&out.join("run.json"), &summary)
}

/// Loads the dataset named by the config (manifest file or synthetic recipe).
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.data.manifest {
        let manifest = load_manifest(path)?;
        Dataset::from_manifest(&manifest)
    } else if let Some(spec) = &cfg.data.synthetic {
        synthetic_dataset(spec)
    } else {
        Err(Error::Config("no data source configured".into()))
    }
}

/// Prior-embedding matrix aligned with dataset order, when the model needs
/// one: served from the configured cache file, otherwise computed by the
/// configured encoder over (optionally knowledge-enhanced) images.
pub fn build_priors(cfg: &RunConfig, ds: &Dataset) -> Result<Option<Array2<f64>>> {
    if !cfg.model.needs_prior() {
        return Ok(None);
    }
    let d_rf = cfg.model.backbone.d_rf;
    let encoder: Box<dyn PriorEncoder> = match &cfg.data.prior_cache {
        Some(path) => crate::attention::prior::PriorEncoderSpec::FileLookup { path: path.clone() }
            .build(d_rf)?,
        None => cfg.data.prior.build(d_rf)?,
    };
    let lookup = cfg.data.prior_cache.is_some();
    let mut priors = Array2::<f64>::zeros((ds.samples.len(), d_rf));
    for (i, sample) in ds.samples.iter().enumerate() {
        let embedding = if lookup {
            // cached entries were built from already-enhanced images
            encoder.embed(&sample.id, &sample.image)?
        } else if cfg.data.prior_enhance {
            let enhanced = knowledge_enhance(&sample.image, &cfg.preprocess.knowledge, i as u64)?;
            encoder.embed(&sample.id, &enhanced)?
        } else {
            encoder.embed(&sample.id, &sample.image)?
        };
        priors.row_mut(i).assign(&embedding);
    }
    Ok(Some(priors))
}

fn eval_pipeline(cfg: &RunConfig) -> InputPipeline {
    InputPipeline {
        input_size: cfg.preprocess.input_size,
        roi_scale: cfg.preprocess.roi_scale,
        normalize: cfg.preprocess.normalize.clone(),
        augment: None,
    }
}

fn train_pipeline(cfg: &RunConfig) -> InputPipeline {
    InputPipeline {
        augment: Some(AugmentationPolicy {
            p_apply: cfg.train.aug_probability,
            ops: cfg.preprocess.augment_ops.clone(),
            seed: cfg.seed,
        }),
        ..eval_pipeline(cfg)
    }
}

/// Base image for overlays: the sample resized to the model input size.
fn overlay_base(cfg: &RunConfig, img: &RgbImage) -> RgbImage {
    bilinear_resize_rgb(img, cfg.preprocess.input_size, cfg.preprocess.input_size)
}

/// Nearest-equivalent binary mask resize (bilinear then threshold).
fn resize_mask(mask: &image::GrayImage, size: usize) -> image::GrayImage {
    let rgb = RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let v = mask.get_pixel(x, y)[0];
        image::Rgb([v, v, v])
    });
    let resized = bilinear_resize_rgb(&rgb, size, size);
    image::GrayImage::from_fn(resized.width(), resized.height(), |x, y| {
        image::Luma([if resized.get_pixel(x, y)[0] > 127 { 255 } else { 0 }])
    })
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Debug, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub n_samples: usize,
    pub manifest: PathBuf,
    pub prior_cache: PathBuf,
}

/// Field-crops and contrast-enhances every sample, writes PNGs, the manifest
/// CSV, and the prior-embedding cache.
pub fn cmd_prepare(cfg: &RunConfig, out: &Path) -> Result<PrepareSummary> {
    let ds = load_dataset(cfg)?;
    ensure_dir(&out.join("images"))?;
    ensure_dir(&out.join("masks"))?;

    let encoder = cfg.data.prior.build(cfg.model.backbone.d_rf)?;
    let mut rows = Vec::with_capacity(ds.samples.len());
    let mut cache_entries = Vec::new();
    for (i, sample) in ds.samples.iter().enumerate() {
        let crop = locate_roi(
            &sample.image,
            sample.mask.as_ref(),
            cfg.preprocess.prepare_roi_scale,
        )?;
        let size = cfg.preprocess.prepare_size;
        let cropped = bilinear_resize_rgb(&extract_crop(&sample.image, &crop), size, size);
        let enhanced = apply_clahe(&cropped, &cfg.preprocess.clahe)?;

        let img_rel = format!("images/{}.png", sample.id);
        let img_path = out.join(&img_rel);
        enhanced
            .save(&img_path)
            .map_err(|e| Error::Image { path: img_path.clone(), source: e })?;

        let mask_ref = match &sample.mask {
            Some(mask) => {
                let (r0, c0, h, w) = crop.rect();
                let cropped_mask =
                    image::imageops::crop_imm(mask, c0 as u32, r0 as u32, w as u32, h as u32)
                        .to_image();
                let cropped_mask = resize_mask(&cropped_mask, size);
                let mask_rel = format!("masks/{}.png", sample.id);
                let mask_path = out.join(&mask_rel);
                cropped_mask
                    .save(&mask_path)
                    .map_err(|e| Error::Image { path: mask_path.clone(), source: e })?;
                Some(MaskRef::Path(mask_path))
            }
            None => None,
        };
        rows.push(FundusSample {
            image_ref: ImageRef::Path(img_path),
            label: sample.label,
            roi_mask_ref: mask_ref,
            split: sample.split,
        });

        let prior_input = if cfg.data.prior_enhance {
            knowledge_enhance(&enhanced, &cfg.preprocess.knowledge, i as u64)?
        } else {
            enhanced
        };
        cache_entries.push((sample.id.clone(), encoder.embed(&sample.id, &prior_input)?));
    }

    let manifest_path = out.join("manifest.csv");
    write_manifest(&Manifest::from_samples(rows), &manifest_path)?;
    let cache_path = out.join("prior_cache.gsar");
    write_prior_cache(
        &cache_path,
        &encoder.identity(),
        cfg.model.backbone.d_rf,
        &cache_entries,
    )?;

    let summary = PrepareSummary {
        n_samples: ds.samples.len(),
        manifest: manifest_path,
        prior_cache: cache_path,
    };
    write_run_summary(
        out,
        "prepare",
        cfg,
        serde_json::to_value(&summary).unwrap(),
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub best_val_metric: f64,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    ensure_dir(out)?;
    let checkpoints = out.join("checkpoints");
    ensure_dir(&checkpoints)?;
    let ds = load_dataset(cfg)?;
    let priors = build_priors(cfg, &ds)?;
    let data = TrainData {
        train_idx: ds.indices_for(Split::Train),
        val_idx: ds.indices_for(Split::Val),
        ds: &ds,
        priors,
    };
    if data.val_idx.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let mut net = Network::new(cfg.model.clone(), cfg.seed)?;
    let history_path = out.join("history.jsonl");
    let mut history_file = fs::File::create(&history_path)
        .map_err(|e| Error::io(&history_path, e))?;

    let outcome = train(
        &mut net,
        &data,
        &cfg.train,
        &train_pipeline(cfg),
        &eval_pipeline(cfg),
        Some(&checkpoints),
        |record| {
            let line = serde_json::to_string(record).expect("history record serializes");
            let _ = writeln!(history_file, "{line}");
            true
        },
    )?;

    net.params = outcome.best_params.clone();
    let model_path = out.join("model.gsar");
    net.save(&model_path)?;

    let summary = TrainSummary {
        steps: outcome.state.step,
        best_step: outcome.state.best_step,
        best_val_metric: outcome.state.best_val_metric,
        checkpoint: model_path,
        history: history_path,
    };
    write_run_summary(out, "train", cfg, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Serialize, Deserialize)]
pub struct PredRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub label: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub metrics: PathBuf,
}

struct SplitPredictions {
    ids: Vec<String>,
    labels: Vec<usize>,
    raw_labels: Vec<Label>,
    probs: Array2<f64>,
    embeddings: Array2<f64>,
}

fn predict_split(
    cfg: &RunConfig,
    net: &Network,
    ds: &Dataset,
    idxs: &[usize],
    priors: Option<&Array2<f64>>,
) -> Result<SplitPredictions> {
    let pipeline = eval_pipeline(cfg);
    let k = net.cfg.num_classes();
    let d = net.cfg.f_final_dim();
    let mut probs = Vec::new();
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    let mut raw_labels = Vec::new();
    let mut ids = Vec::new();
    for chunk in idxs.chunks(16) {
        let batch = pipeline.build(ds, chunk, priors, 0)?;
        let pred = net.predict(&batch.x_global, &batch.x_roi, batch.priors.as_ref())?;
        probs.extend(pred.probs.iter().copied());
        embeddings.extend(pred.embeddings.f_final.data.iter().copied());
        labels.extend(net.targets(&batch.labels));
        raw_labels.extend(batch.labels.iter().copied());
        ids.extend(chunk.iter().map(|&i| ds.samples[i].id.clone()));
    }
    let n = ids.len();
    Ok(SplitPredictions {
        ids,
        labels,
        raw_labels,
        probs: Array2::from_shape_vec((n, k), probs)
            .map_err(|e| Error::ShapeError(e.to_string()))?,
        embeddings: Array2::from_shape_vec((n, d), embeddings)
            .map_err(|e| Error::ShapeError(e.to_string()))?,
    })
}

fn write_metric_outputs(report: &MetricsReport, out: &Path, stem: &str) -> Result<PathBuf> {
    let metrics_path = out.join(format!("{stem}.json"));
    write_json(&metrics_path, report)?;
    render_roc(report, &out.join(format!("{stem}_roc.png")))?;
    render_confusion(report, &out.join(format!("{stem}_confusion.png")))?;
    Ok(metrics_path)
}

/// Evaluates a checkpoint on the configured split, or scores a stored
/// prediction set. Tri-class runs additionally report the merged
/// referable-vs-non-referable view.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
) -> Result<EvalSummary> {
    ensure_dir(out)?;
    let (labels, probs, ids): (Vec<usize>, Array2<f64>, Vec<String>) =
        match (checkpoint, predictions) {
            (Some(ckpt), None) => {
                let net = Network::load(ckpt)?;
                let ds = load_dataset(cfg)?;
                let priors = build_priors(cfg, &ds)?;
                let idxs = ds.indices_for(cfg.eval.split);
                let sp = predict_split(cfg, &net, &ds, &idxs, priors.as_ref())?;
                let records: Vec<PredRecord> = sp
                    .ids
                    .iter()
                    .zip(&sp.labels)
                    .zip(sp.probs.rows())
                    .map(|((id, &label), row)| PredRecord {
                        id: Some(id.clone()),
                        label,
                        probs: row.to_vec(),
                    })
                    .collect();
                write_json(&out.join("predictions.json"), &records)?;
                (sp.labels, sp.probs, sp.ids)
            }
            (None, Some(path)) => {
                if !path.exists() {
                    return Err(Error::MissingFile(path.to_path_buf()));
                }
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let records: Vec<PredRecord> = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("bad predictions file: {e}")))?;
                if records.is_empty() {
                    return Err(Error::TooFewSamples { got: 0, need: 1 });
                }
                let k = records[0].probs.len();
                let mut probs = Array2::<f64>::zeros((records.len(), k));
                let mut labels = Vec::new();
                let mut ids = Vec::new();
                for (i, r) in records.iter().enumerate() {
                    if r.probs.len() != k {
                        return Err(Error::DimMismatch(format!(
                            "prediction {i} has {} probs, expected {k}",
                            r.probs.len()
                        )));
                    }
                    for (j, &p) in r.probs.iter().enumerate() {
                        probs[(i, j)] = p;
                    }
                    labels.push(r.label);
                    ids.push(r.id.clone().unwrap_or_else(|| format!("row_{i}")));
                }
                (labels, probs, ids)
            }
            _ => {
                return Err(Error::Config(
                    "eval needs exactly one of --checkpoint or --predictions".into(),
                ))
            }
        };

    let mode = if probs.dim().1 == 3 {
        HeadMode::TriClass
    } else {
        HeadMode::Binary
    };
    let report = compute_metrics(&labels, &probs, mode)?;
    let metrics_path = write_metric_outputs(&report, out, "metrics")?;
    if mode == HeadMode::TriClass {
        let merged_labels: Vec<usize> = labels.iter().map(|&l| usize::from(l != 0)).collect();
        let merged = compute_metrics(&merged_labels, &to_binary(&probs), HeadMode::Binary)?;
        write_metric_outputs(&merged, out, "metrics_binary")?;
    }

    let summary = EvalSummary {
        n_samples: ids.len(),
        accuracy: report.accuracy,
        macro_auc: report.macro_auc,
        metrics: metrics_path,
    };
    write_run_summary(out, "eval", cfg, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// cam

#[derive(Debug, Serialize, Deserialize)]
pub struct CamSummary {
    pub rendered: usize,
    pub layer: String,
}

/// Saliency overlays for the first `eval.cam_count` samples of the eval
/// split, one image per configured target class.
pub fn cmd_cam(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<CamSummary> {
    ensure_dir(out)?;
    let net = Network::load(checkpoint)?;
    let ds = load_dataset(cfg)?;
    let priors = build_priors(cfg, &ds)?;
    let idxs = ds.indices_for(cfg.eval.split);
    let layer = cfg
        .eval
        .cam_layer
        .clone()
        .unwrap_or_else(|| default_layer(&net));
    let pipeline = eval_pipeline(cfg);

    let mut rendered = 0usize;
    for &i in idxs.iter().take(cfg.eval.cam_count) {
        let batch = pipeline.build(&ds, &[i], priors.as_ref(), 0)?;
        let base = overlay_base(cfg, &ds.samples[i].image);
        for &class in &cfg.eval.cam_classes {
            if class >= net.cfg.num_classes() {
                return Err(Error::Config(format!(
                    "cam class {class} outside 0..{}",
                    net.cfg.num_classes()
                )));
            }
            let sal = grad_cam_pp(
                &net,
                &batch.x_global,
                &batch.x_roi,
                batch.priors.as_ref(),
                class,
                &layer,
            )?;
            let path = out.join(format!("cam_{}_class{class}.png", ds.samples[i].id));
            render_saliency_overlay(&base, &sal, &path)?;
            rendered += 1;
        }
    }
    let summary = CamSummary {
        rendered,
        layer,
    };
    write_run_summary(out, "cam", cfg, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// tsne

#[derive(Debug, Serialize, Deserialize)]
pub struct TsneSummary {
    pub n_samples: usize,
    pub csv: PathBuf,
}

/// Projects fused embeddings of the eval split to 2-D and writes
/// `id,x,y,label` rows.
pub fn cmd_tsne(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<TsneSummary> {
    ensure_dir(out)?;
    let net = Network::load(checkpoint)?;
    let ds = load_dataset(cfg)?;
    let priors = build_priors(cfg, &ds)?;
    let idxs = ds.indices_for(cfg.eval.split);
    let sp = predict_split(cfg, &net, &ds, &idxs, priors.as_ref())?;
    let coords = tsne_export(&sp.embeddings, &cfg.eval.tsne)?;

    let csv_path = out.join("tsne.csv");
    let mut file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(file, "id,x,y,label").map_err(|e| Error::io(&csv_path, e))?;
    for (i, id) in sp.ids.iter().enumerate() {
        writeln!(
            file,
            "{id},{},{},{}",
            coords[(i, 0)],
            coords[(i, 1)],
            sp.raw_labels[i].index()
        )
        .map_err(|e| Error::io(&csv_path, e))?;
    }
    let summary = TsneSummary {
        n_samples: sp.ids.len(),
        csv: csv_path,
    };
    write_run_summary(out, "tsne", cfg, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// dwm-debug

#[derive(Debug, Serialize, Deserialize)]
pub struct DwmDebugSummary {
    pub sample_id: String,
    pub selections: PathBuf,
    pub overlay: PathBuf,
}

/// Dumps the dynamic window selections of one eval-split sample as JSON plus
/// a rectangle overlay. Without a checkpoint a freshly initialized network
/// (config seed) supplies the feature maps.
pub fn cmd_dwm_debug(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    index: usize,
    out: &Path,
) -> Result<DwmDebugSummary> {
    ensure_dir(out)?;
    let net = match checkpoint {
        Some(path) => Network::load(path)?,
        None => Network::new(cfg.model.clone(), cfg.seed)?,
    };
    if !net.cfg.use_dynamic_branch {
        return Err(Error::Config("dynamic branch is disabled in this config".into()));
    }
    let ds = load_dataset(cfg)?;
    let priors = build_priors(cfg, &ds)?;
    let idxs = ds.indices_for(cfg.eval.split);
    let &sample_idx = idxs
        .get(index)
        .ok_or_else(|| Error::TooFewSamples { got: idxs.len(), need: index + 1 })?;

    let pipeline = eval_pipeline(cfg);
    let batch = pipeline.build(&ds, &[sample_idx], priors.as_ref(), 0)?;
    let pred = net.predict(&batch.x_global, &batch.x_roi, batch.priors.as_ref())?;
    let selections = &pred.selections[0];

    let json_path = out.join("dwm_selections.json");
    write_json(&json_path, selections)?;
    let overlay_path = out.join("dwm_overlay.png");
    render_dwm_overlay(
        &overlay_base(cfg, &ds.samples[sample_idx].image),
        selections,
        &overlay_path,
    )?;

    let summary = DwmDebugSummary {
        sample_id: ds.samples[sample_idx].id.clone(),
        selections: json_path,
        overlay: overlay_path,
    };
    write_run_summary(out, "dwm-debug", cfg, serde_json::to_value(&summary).unwrap())?;
    Ok(summary)
}
