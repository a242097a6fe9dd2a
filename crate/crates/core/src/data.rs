//! Dataset manifests, synthetic fundus generation, and class-balanced
//! resampling.

use crate::error::{Error, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative = 0,
    Positive = 1,
    Suspect = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Negative, Label::Positive, Label::Suspect];

    pub fn from_index(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            2 => Some(Label::Suspect),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Binary referral mapping: Positive and Suspect are referable.
    pub fn referable(self) -> bool {
        !matches!(self, Label::Negative)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Image payload: a file reference or an already-decoded image.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(RgbImage),
}

impl ImageRef {
    pub fn key(&self) -> String {
        match self {
            ImageRef::Path(p) => p.to_string_lossy().into_owned(),
            ImageRef::Memory(img) => format!("mem:{}x{}", img.width(), img.height()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum MaskRef {
    Path(PathBuf),
    Memory(GrayImage),
}

#[derive(Debug, Clone)]
pub struct FundusSample {
    pub image_ref: ImageRef,
    pub label: Label,
    pub roi_mask_ref: Option<MaskRef>,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub samples: Vec<FundusSample>,
    pub class_counts: BTreeMap<Label, usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Verify that referenced image/mask files exist on disk.
    pub check_paths: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { check_paths: true }
    }
}

impl Manifest {
    pub fn from_samples(samples: Vec<FundusSample>) -> Manifest {
        let mut class_counts = BTreeMap::new();
        for s in &samples {
            *class_counts.entry(s.label).or_insert(0) += 1;
        }
        Manifest {
            samples,
            class_counts,
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    /// Recount labels and compare against the stored map.
    pub fn counts_consistent(&self) -> bool {
        let recount = Manifest::from_samples(self.samples.clone()).class_counts;
        recount == self.class_counts
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Loads a `image_path,label,split[,mask_path]` CSV. Paths are resolved
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: LoadOptions) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?;
    {
        let headers = reader.headers().map_err(|e| Error::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?;
        let cols: Vec<&str> = headers.iter().collect();
        let ok = cols.len() >= 3
            && cols[0] == "image_path"
            && cols[1] == "label"
            && cols[2] == "split"
            && (cols.len() == 3 || (cols.len() == 4 && cols[3] == "mask_path"));
        if !ok {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("bad header {cols:?}, expected image_path,label,split[,mask_path]"),
            });
        }
    }

    let mut samples = Vec::new();
    let mut seen: HashSet<(Split, String)> = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: 0,
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();

        let image_path = field(0);
        if image_path.is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty image_path".into(),
            });
        }
        let label = field(1)
            .parse::<u8>()
            .ok()
            .and_then(Label::from_index)
            .ok_or_else(|| Error::MalformedRow {
                line,
                reason: format!("bad label {:?}", field(1)),
            })?;
        let split = Split::parse(&field(2)).ok_or_else(|| Error::MalformedRow {
            line,
            reason: format!("bad split {:?}", field(2)),
        })?;
        if !seen.insert((split, image_path.clone())) {
            return Err(Error::MalformedRow {
                line,
                reason: format!("duplicate image_path {image_path:?} within split"),
            });
        }
        let resolved = base.join(&image_path);
        if opts.check_paths && !resolved.exists() {
            return Err(Error::DanglingReference {
                line,
                path: resolved,
            });
        }
        let mask = match record.get(3).map(str::trim) {
            Some(m) if !m.is_empty() => {
                let mp = base.join(m);
                if opts.check_paths && !mp.exists() {
                    return Err(Error::DanglingReference { line, path: mp });
                }
                Some(MaskRef::Path(mp))
            }
            _ => None,
        };
        samples.push(FundusSample {
            image_ref: ImageRef::Path(resolved),
            label,
            roi_mask_ref: mask,
            split,
        });
    }
    Ok(Manifest::from_samples(samples))
}

/// Writes rows with paths relative to the output directory when possible.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;
    let has_masks = manifest.samples.iter().any(|s| s.roi_mask_ref.is_some());
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let header: &[&str] = if has_masks {
        &["image_path", "label", "split", "mask_path"]
    } else {
        &["image_path", "label", "split"]
    };
    w.write_record(header)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for s in &manifest.samples {
        let ip = match &s.image_ref {
            ImageRef::Path(p) => rel(p),
            ImageRef::Memory(_) => {
                return Err(Error::Config(
                    "cannot write manifest rows for in-memory images".into(),
                ))
            }
        };
        let mut row = vec![ip, s.label.index().to_string(), s.split.as_str().to_string()];
        if has_masks {
            row.push(match &s.roi_mask_ref {
                Some(MaskRef::Path(p)) => rel(p),
                _ => String::new(),
            });
        }
        w.write_record(&row)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Synthetic fundus generator parameters. Label thresholds on the cup-to-disc
/// ratio are generator policy, not literature values: >= 0.7 Positive,
/// [0.55, 0.7) Suspect, else Negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub disc_radius_frac: f64,
    pub cdr: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Fixed disc center (row, col); seeded placement when absent.
    #[serde(default)]
    pub disc_center: Option<(usize, usize)>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cdr) {
            return Err(Error::Config(format!("cdr {} outside [0,1]", self.cdr)));
        }
        if !(self.disc_radius_frac > 0.0 && self.disc_radius_frac < 0.5) {
            return Err(Error::Config(format!(
                "disc_radius_frac {} outside (0, 0.5)",
                self.disc_radius_frac
            )));
        }
        if self.image_size < 64 {
            return Err(Error::Config("image_size must be >= 64".into()));
        }
        Ok(())
    }
}

pub fn label_for_cdr(cdr: f64) -> Label {
    if cdr >= 0.7 {
        Label::Positive
    } else if cdr >= 0.55 {
        Label::Suspect
    } else {
        Label::Negative
    }
}

fn smooth_edge(dist: f64, radius: f64) -> f64 {
    // 1 inside, 0 outside, ~1.5px linear ramp at the rim
    ((radius + 0.75 - dist) / 1.5).clamp(0.0, 1.0)
}

/// Renders a synthetic fundus: dark circular field, bright optic disc, a
/// brighter concentric cup of radius cdr * disc_radius, a few vessel strokes,
/// and Gaussian pixel noise. Bitwise deterministic for a given spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FundusSample> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = size as f64;
    let field_r = 0.48 * s;
    let field_c = (s / 2.0, s / 2.0);
    let disc_r = spec.disc_radius_frac * s;

    let (dr, dc) = match spec.disc_center {
        Some((r, c)) => (r as f64, c as f64),
        None => {
            let margin = field_r - disc_r - 2.0;
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = rng.random_range(0.0..margin * 0.6);
            (field_c.0 + rad * ang.sin(), field_c.1 + rad * ang.cos())
        }
    };
    let cup_r = spec.cdr * disc_r;

    // vessel strokes: radial paths from the disc with sinusoidal wobble
    let n_vessels = 5;
    let vessel_params: Vec<(f64, f64, f64)> = (0..n_vessels)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(2.0..6.0),
                rng.random_range(0.05..0.25),
            )
        })
        .collect();
    let mut vessel_mask = vec![0.0f64; size * size];
    for &(ang, wobble, freq) in &vessel_params {
        let steps = (field_r * 2.0) as usize;
        for t in 0..steps {
            let rad = disc_r + (field_r - disc_r) * (t as f64 / steps as f64);
            let a = ang + wobble / rad * (freq * rad).sin();
            let py = dr + rad * a.sin();
            let px = dc + rad * a.cos();
            for oy in -1i64..=1 {
                for ox in -1i64..=1 {
                    let y = py.round() as i64 + oy;
                    let x = px.round() as i64 + ox;
                    if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                        let d2 = (py - y as f64).powi(2) + (px - x as f64).powi(2);
                        let v = (1.2 - d2 / 2.0).clamp(0.0, 1.0);
                        let cell = &mut vessel_mask[y as usize * size + x as usize];
                        *cell = cell.max(v);
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| {
        Error::Config(format!("bad noise sigma: {e}"))
    })?;

    let mut img = RgbImage::new(size as u32, size as u32);
    let mut mask = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64;
            let fx = x as f64;
            let d_field = ((fy - field_c.0).powi(2) + (fx - field_c.1).powi(2)).sqrt();
            let d_disc = ((fy - dr).powi(2) + (fx - dc).powi(2)).sqrt();

            let field_a = smooth_edge(d_field, field_r);
            let falloff = 1.0 - 0.35 * (d_field / field_r).clamp(0.0, 1.0).powi(2);
            let mut r = 118.0 * falloff * field_a;
            let mut g = 58.0 * falloff * field_a;
            let mut b = 38.0 * falloff * field_a;

            let vessel = vessel_mask[y * size + x] * field_a;
            r *= 1.0 - 0.55 * vessel;
            g *= 1.0 - 0.60 * vessel;
            b *= 1.0 - 0.40 * vessel;

            let disc_a = smooth_edge(d_disc, disc_r) * field_a;
            r = r * (1.0 - disc_a) + 225.0 * disc_a;
            g = g * (1.0 - disc_a) + 185.0 * disc_a;
            b = b * (1.0 - disc_a) + 120.0 * disc_a;

            let cup_a = smooth_edge(d_disc, cup_r) * field_a;
            r = r * (1.0 - cup_a) + 252.0 * cup_a;
            g = g * (1.0 - cup_a) + 240.0 * cup_a;
            b = b * (1.0 - cup_a) + 205.0 * cup_a;

            let px_noise = [
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            ];
            let quantize = |v: f64, n: f64| (v + n).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    quantize(r, px_noise[0]),
                    quantize(g, px_noise[1]),
                    quantize(b, px_noise[2]),
                ]),
            );
            if d_disc <= disc_r {
                mask.put_pixel(x as u32, y as u32, Luma([255]));
            }
        }
    }

    Ok(FundusSample {
        image_ref: ImageRef::Memory(img),
        label: label_for_cdr(spec.cdr),
        roi_mask_ref: Some(MaskRef::Memory(mask)),
        split: Split::Train,
    })
}

/// Fully decoded sample held in memory; desk-scale datasets fit comfortably.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: Option<GrayImage>,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    /// Decodes every manifest entry. Sample ids are file stems for on-disk
    /// images and positional ids for in-memory ones; prior-embedding caches
    /// are keyed by these ids.
    pub fn from_manifest(manifest: &Manifest) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for (i, s) in manifest.samples.iter().enumerate() {
            let (id, image) = match &s.image_ref {
                ImageRef::Path(p) => {
                    let img = image::open(p)
                        .map_err(|e| Error::Image {
                            path: p.clone(),
                            source: e,
                        })?
                        .to_rgb8();
                    let id = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| format!("sample_{i}"));
                    (id, img)
                }
                ImageRef::Memory(img) => (format!("sample_{i}"), img.clone()),
            };
            if image.width() < 64 || image.height() < 64 {
                return Err(Error::ShapeError(format!(
                    "image {id} is {}x{}, need at least 64x64",
                    image.height(),
                    image.width()
                )));
            }
            let mask = match &s.roi_mask_ref {
                Some(MaskRef::Path(p)) => Some(
                    image::open(p)
                        .map_err(|e| Error::Image {
                            path: p.clone(),
                            source: e,
                        })?
                        .to_luma8(),
                ),
                Some(MaskRef::Memory(m)) => Some(m.clone()),
                None => None,
            };
            samples.push(LoadedSample {
                id,
                image,
                mask,
                label: s.label,
                split: s.split,
            });
        }
        Ok(Dataset { samples })
    }

    pub fn indices_for(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<Label> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

/// Synthetic dataset recipe: `n_per_class` samples per class with
/// class-determined cup-to-disc ratio ranges, split per class by the given
/// fractions (remainder goes to test).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n_per_class: 200,
            image_size: 64,
            seed: 0,
            noise_sigma: 4.0,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

const CDR_RANGES: [(f64, f64); 3] = [(0.15, 0.45), (0.72, 0.95), (0.56, 0.68)];

/// Deterministic synthetic dataset; per-sample ids are `synth_<index>`.
pub fn synthetic_dataset(spec: &SynthDatasetSpec) -> Result<Dataset> {
    if spec.n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&(spec.train_frac + spec.val_frac)) {
        return Err(Error::Config("train_frac + val_frac must lie in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    let n_train = (spec.n_per_class as f64 * spec.train_frac).round() as usize;
    let n_val = (spec.n_per_class as f64 * spec.val_frac).round() as usize;
    for (class, &(lo, hi)) in CDR_RANGES.iter().enumerate() {
        for k in 0..spec.n_per_class {
            let cdr = rng.random_range(lo..hi);
            let sample_spec = SyntheticSpec {
                image_size: spec.image_size,
                disc_radius_frac: rng.random_range(0.16..0.22),
                cdr,
                noise_sigma: spec.noise_sigma,
                seed: rng.random(),
                disc_center: None,
            };
            let generated = generate_synthetic(&sample_spec)?;
            debug_assert_eq!(generated.label.index(), class);
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let ImageRef::Memory(image) = generated.image_ref else {
                unreachable!()
            };
            let Some(MaskRef::Memory(mask)) = generated.roi_mask_ref else {
                unreachable!()
            };
            samples.push(LoadedSample {
                id: format!("synth_{}", samples.len()),
                image,
                mask: Some(mask),
                label: generated.label,
                split,
            });
        }
    }
    Ok(Dataset { samples })
}

/// One epoch of class-balanced indices: every majority-class index appears
/// exactly once; each minority class keeps all of its indices once and is
/// topped up to the majority count by sampling with replacement. The result
/// is shuffled deterministically by `seed`.
pub fn resample_balanced(manifest: &Manifest, seed: u64) -> Result<Vec<usize>> {
    let labels: Vec<Label> = manifest.samples.iter().map(|s| s.label).collect();
    resample_balanced_labels(&labels, seed)
}

pub fn resample_balanced_labels(labels: &[Label], seed: u64) -> Result<Vec<usize>> {
    let mut per_class: BTreeMap<Label, Vec<usize>> =
        Label::ALL.iter().map(|&l| (l, Vec::new())).collect();
    for (i, &l) in labels.iter().enumerate() {
        per_class.get_mut(&l).unwrap().push(i);
    }
    for (&label, idxs) in &per_class {
        if idxs.is_empty() {
            return Err(Error::EmptyClass(label.index() as u8));
        }
    }
    let target = per_class.values().map(Vec::len).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = Vec::with_capacity(target * per_class.len());
    for idxs in per_class.values() {
        seq.extend_from_slice(idxs);
        for _ in idxs.len()..target {
            seq.push(idxs[rng.random_range(0..idxs.len())]);
        }
    }
    seq.shuffle(&mut rng);
    Ok(seq)
}
