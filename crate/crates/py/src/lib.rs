//! Python bindings for the main screening-pipeline types and operations.
//!
//! Images cross the boundary as flat RGB byte buffers with explicit
//! dimensions; feature maps and embeddings as nested float lists. Reports
//! are returned as JSON strings so callers can `json.loads` them.

use gscreen_core::backbone::{FeatureMap, Provenance};
use gscreen_core::config::RunConfig;
use gscreen_core::data::{generate_synthetic, ImageRef, Label, LoadedSample, SyntheticSpec};
use gscreen_core::dwm::{self, DwmConfig};
use gscreen_core::evaluation::{compute_metrics, tsne_export, TsneConfig};
use gscreen_core::model::{HeadMode, Network};
use gscreen_core::preprocess::{apply_clahe, locate_roi, ClaheParams};
use gscreen_core::training::InputPipeline;
use image::RgbImage;
use ndarray::{Array2, Array4};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image_from_bytes(pixels: &[u8], height: usize, width: usize) -> PyResult<RgbImage> {
    if pixels.len() != height * width * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} bytes for {height}x{width}x3, got {}",
            height * width * 3,
            pixels.len()
        )));
    }
    RgbImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| PyValueError::new_err("bad image buffer"))
}

/// Render a synthetic fundus image; returns (pixels, height, width, label).
#[pyfunction]
#[pyo3(signature = (image_size, disc_radius_frac, cdr, noise_sigma, seed, disc_center=None))]
fn synthesize_fundus(
    image_size: usize,
    disc_radius_frac: f64,
    cdr: f64,
    noise_sigma: f64,
    seed: u64,
    disc_center: Option<(usize, usize)>,
) -> PyResult<(Vec<u8>, usize, usize, u8)> {
    let sample = generate_synthetic(&SyntheticSpec {
        image_size,
        disc_radius_frac,
        cdr,
        noise_sigma,
        seed,
        disc_center,
    })
    .map_err(err)?;
    let ImageRef::Memory(img) = sample.image_ref else {
        unreachable!()
    };
    let (w, h) = img.dimensions();
    Ok((
        img.into_raw(),
        h as usize,
        w as usize,
        sample.label.index() as u8,
    ))
}

/// Contrast-limited adaptive histogram equalization on the luminance channel.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, clip_limit=2.0, tile_grid=(8, 8)))]
fn clahe(
    pixels: Vec<u8>,
    height: usize,
    width: usize,
    clip_limit: f64,
    tile_grid: (usize, usize),
) -> PyResult<Vec<u8>> {
    let img = image_from_bytes(&pixels, height, width)?;
    let out = apply_clahe(
        &img,
        &ClaheParams {
            clip_limit,
            tile_grid,
        },
    )
    .map_err(err)?;
    Ok(out.into_raw())
}

/// Optic-disc ROI location; returns {"center": (r, c), "side", "rect"}.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, roi_scale=0.6))]
fn find_roi<'py>(
    py: Python<'py>,
    pixels: Vec<u8>,
    height: usize,
    width: usize,
    roi_scale: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let img = image_from_bytes(&pixels, height, width)?;
    let crop = locate_roi(&img, None, roi_scale).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("center", crop.center)?;
    out.set_item("side", crop.side)?;
    out.set_item("rect", crop.rect())?;
    Ok(out)
}

/// Normalized center of the window at score-map index (i, j).
#[pyfunction]
fn window_center(
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    i: usize,
    j: usize,
) -> (f64, f64) {
    dwm::window_center(h, w, hp, wp, i, j)
}

fn feature_from_nested(feature: Vec<Vec<Vec<f64>>>) -> PyResult<FeatureMap> {
    let c = feature.len();
    if c == 0 || feature[0].is_empty() || feature[0][0].is_empty() {
        return Err(PyValueError::new_err("feature map must be (C,H,W) non-empty"));
    }
    let (h, w) = (feature[0].len(), feature[0][0].len());
    let mut data = Array4::<f64>::zeros((1, c, h, w));
    for (ci, plane) in feature.iter().enumerate() {
        if plane.len() != h {
            return Err(PyValueError::new_err("ragged feature map"));
        }
        for (i, row) in plane.iter().enumerate() {
            if row.len() != w {
                return Err(PyValueError::new_err("ragged feature map"));
            }
            for (j, &v) in row.iter().enumerate() {
                data[(0, ci, i, j)] = v;
            }
        }
    }
    FeatureMap::new(data, Provenance::Global).map_err(err)
}

/// Sliding-window response map; returns (rows, window, source_dims).
#[pyfunction]
fn score_map(
    feature: Vec<Vec<Vec<f64>>>,
    hp: usize,
    wp: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let f = feature_from_nested(feature)?;
    let sm = dwm::score_map(&f, (hp, wp)).map_err(err)?;
    Ok(sm
        .data
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect())
}

/// Top-window selection over a (C,H,W) feature map; returns a list of dicts.
#[pyfunction]
#[pyo3(signature = (feature, window_sizes, top_p=3, suppress_overlap=0.5, image_dims=(64, 64)))]
fn select_windows<'py>(
    py: Python<'py>,
    feature: Vec<Vec<Vec<f64>>>,
    window_sizes: Vec<(usize, usize)>,
    top_p: usize,
    suppress_overlap: f64,
    image_dims: (usize, usize),
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let f = feature_from_nested(feature)?;
    let cfg = DwmConfig {
        window_sizes,
        top_p,
        suppress_overlap,
    };
    let sels = dwm::select_windows(&f, &cfg, image_dims).map_err(err)?;
    sels.iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("window", s.window)?;
            d.set_item("index", s.index)?;
            d.set_item("center", s.center)?;
            d.set_item("crop_rect", s.crop_rect)?;
            d.set_item("score", s.score)?;
            Ok(d)
        })
        .collect()
}

/// Full metrics report as a JSON string; mode is "tri_class" or "binary".
#[pyfunction]
fn metrics_report(labels: Vec<usize>, probs: Vec<Vec<f64>>, mode: &str) -> PyResult<String> {
    let head = match mode {
        "tri_class" => HeadMode::TriClass,
        "binary" => HeadMode::Binary,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be tri_class or binary, got {other:?}"
            )))
        }
    };
    let k = match head {
        HeadMode::TriClass => 3,
        HeadMode::Binary => 2,
    };
    let n = probs.len();
    let mut arr = Array2::<f64>::zeros((n, k));
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return Err(PyValueError::new_err(format!(
                "probs row {i} has {} entries, expected {k}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            arr[(i, j)] = v;
        }
    }
    let report = compute_metrics(&labels, &arr, head).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// 2-D embedding projection; returns one (x, y) pair per input row.
#[pyfunction]
#[pyo3(signature = (embeddings, perplexity=30.0, iterations=500, seed=0))]
fn tsne(
    embeddings: Vec<Vec<f64>>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<Vec<(f64, f64)>> {
    let n = embeddings.len();
    if n == 0 || embeddings[0].is_empty() {
        return Err(PyValueError::new_err("embeddings must be non-empty"));
    }
    let d = embeddings[0].len();
    let mut arr = Array2::<f64>::zeros((n, d));
    for (i, row) in embeddings.iter().enumerate() {
        if row.len() != d {
            return Err(PyValueError::new_err("ragged embeddings"));
        }
        for (j, &v) in row.iter().enumerate() {
            arr[(i, j)] = v;
        }
    }
    let cfg = TsneConfig {
        perplexity,
        iterations,
        seed,
        ..Default::default()
    };
    let y = tsne_export(&arr, &cfg).map_err(err)?;
    Ok((0..n).map(|i| (y[(i, 0)], y[(i, 1)])).collect())
}

/// Checkpointed network driven by a run config; classifies RGB images.
#[pyclass]
struct Predictor {
    cfg: RunConfig,
    net: Network,
}

#[pymethods]
impl Predictor {
    #[new]
    fn new(config_path: PathBuf, checkpoint_path: PathBuf) -> PyResult<Self> {
        let cfg = RunConfig::load(&config_path).map_err(err)?;
        let net = Network::load(&checkpoint_path).map_err(err)?;
        Ok(Predictor { cfg, net })
    }

    /// Number of output classes of the loaded head.
    fn num_classes(&self) -> usize {
        self.net.cfg.num_classes()
    }

    /// Class probabilities for one RGB image buffer.
    fn predict(&self, pixels: Vec<u8>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let img = image_from_bytes(&pixels, height, width)?;
        let sample = LoadedSample {
            id: "py_input".into(),
            image: img,
            mask: None,
            label: Label::Negative,
            split: gscreen_core::data::Split::Test,
        };
        let ds = gscreen_core::data::Dataset {
            samples: vec![sample],
        };
        let priors = gscreen_core::cli::build_priors(&self.cfg, &ds).map_err(err)?;
        let pipeline = InputPipeline {
            input_size: self.cfg.preprocess.input_size,
            roi_scale: self.cfg.preprocess.roi_scale,
            normalize: self.cfg.preprocess.normalize.clone(),
            augment: None,
        };
        let batch = pipeline.build(&ds, &[0], priors.as_ref(), 0).map_err(err)?;
        let pred = self
            .net
            .predict(&batch.x_global, &batch.x_roi, batch.priors.as_ref())
            .map_err(err)?;
        Ok(pred.probs.row(0).to_vec())
    }
}

#[pymodule]
fn gscreen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthesize_fundus, m)?)?;
    m.add_function(wrap_pyfunction!(clahe, m)?)?;
    m.add_function(wrap_pyfunction!(find_roi, m)?)?;
    m.add_function(wrap_pyfunction!(window_center, m)?)?;
    m.add_function(wrap_pyfunction!(score_map, m)?)?;
    m.add_function(wrap_pyfunction!(select_windows, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_report, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_class::<Predictor>()?;
    Ok(())
}
