//! Image pipeline: ROI extraction, luminance CLAHE, probabilistic
//! augmentation chains, and conversion to normalized model input.
//!
//! Every transform is deterministic: randomized policies derive their RNG
//! from (policy seed, sample index) via independent ChaCha streams, so
//! parallel workers never share state.

use crate::error::{Error, Result};
use image::{GrayImage, Rgb, RgbImage};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// types

/// Square crop centered on the optic disc (or its best estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCrop {
    /// (row, col) in pixels; fractional centroids are kept exact.
    pub center: (f64, f64),
    pub side: usize,
    pub source_size: (usize, usize),
}

impl RoiCrop {
    /// Crop rectangle (row0, col0, height, width) clipped to image bounds.
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        let (h, w) = self.source_size;
        let half = self.side as f64 / 2.0;
        let r0 = (self.center.0 - half).round().max(0.0) as usize;
        let c0 = (self.center.1 - half).round().max(0.0) as usize;
        let r1 = ((self.center.0 + half).round() as usize).min(h).max(r0 + 1);
        let c1 = ((self.center.1 + half).round() as usize).min(w).max(c0 + 1);
        let r0 = r0.min(h - 1);
        let c0 = c0.min(w - 1);
        (r0, c0, r1 - r0, c1 - c0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tile_grid: (usize, usize),
}

impl Default for ClaheParams {
    fn default() -> Self {
        // the common retinal-imaging setting; config-exposed
        ClaheParams {
            clip_limit: 2.0,
            tile_grid: (8, 8),
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.clip_limit <= 0.0 {
            return Err(Error::Config("clahe clip_limit must be > 0".into()));
        }
        if self.tile_grid.0 < 1 || self.tile_grid.1 < 1 {
            return Err(Error::Config("clahe tile_grid components must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Hflip,
    Vflip,
    ColorJitter,
    GaussianBlur,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub p_apply: f64,
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            p_apply: 0.5,
            ops: vec![
                AugmentOp::Hflip,
                AugmentOp::Vflip,
                AugmentOp::ColorJitter,
                AugmentOp::GaussianBlur,
            ],
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_apply) {
            return Err(Error::Config("p_apply must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One step of the prior-encoder enhancement chain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnowledgeStep {
    Clahe { clip_limit: f64, tile_grid: (usize, usize) },
    ContrastBrightness { contrast: f64, brightness: f64 },
    Sharpen { amount: f64 },
    Denoise,
    Gamma { gamma: f64 },
    ColorEnhance { saturation: f64 },
    EdgeEnhance { amount: f64 },
    MultiscaleFuse { weight: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KnowledgeStepSpec {
    #[serde(flatten)]
    pub step: KnowledgeStep,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeEnhancePolicy {
    pub steps: Vec<KnowledgeStepSpec>,
    pub seed: u64,
}

impl Default for KnowledgeEnhancePolicy {
    fn default() -> Self {
        let step = |step: KnowledgeStep| KnowledgeStepSpec {
            step,
            probability: 0.5,
        };
        KnowledgeEnhancePolicy {
            steps: vec![
                step(KnowledgeStep::Clahe {
                    clip_limit: 2.0,
                    tile_grid: (8, 8),
                }),
                step(KnowledgeStep::ContrastBrightness {
                    contrast: 1.1,
                    brightness: 5.0,
                }),
                step(KnowledgeStep::Sharpen { amount: 0.8 }),
                step(KnowledgeStep::Denoise),
                step(KnowledgeStep::Gamma { gamma: 0.9 }),
                step(KnowledgeStep::ColorEnhance { saturation: 1.2 }),
                step(KnowledgeStep::EdgeEnhance { amount: 0.5 }),
                step(KnowledgeStep::MultiscaleFuse { weight: 0.3 }),
            ],
            seed: 0,
        }
    }
}

impl KnowledgeEnhancePolicy {
    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::Config("step probability must lie in [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Per-channel standardization applied after the [0,1] rescale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Normalize {
    pub enabled: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalize {
    fn default() -> Self {
        Normalize {
            enabled: true,
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }
}

// ---------------------------------------------------------------------------
// resize

/// Bilinear sample positions with pixel-center alignment, clamped at borders.
fn bilinear_axis(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize_chw(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = (1.0 - fy) * ((1.0 - fx) * x[(ci, y0, x0)] + fx * x[(ci, y0, x1)])
                    + fy * ((1.0 - fx) * x[(ci, y1, x0)] + fx * x[(ci, y1, x1)]);
                out[(ci, oi, oj)] = v;
            }
        }
    }
    out
}

pub fn bilinear_resize_rgb(img: &RgbImage, oh: usize, ow: usize) -> RgbImage {
    let arr = rgb_to_chw(img);
    let resized = bilinear_resize_chw(&arr, oh, ow);
    chw_to_rgb(&resized)
}

pub fn rgb_to_chw(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px[c] as f64;
        }
    }
    out
}

pub fn chw_to_rgb(arr: &Array3<f64>) -> RgbImage {
    let (_, h, w) = arr.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                arr[(0, y, x)].round().clamp(0.0, 255.0) as u8,
                arr[(1, y, x)].round().clamp(0.0, 255.0) as u8,
                arr[(2, y, x)].round().clamp(0.0, 255.0) as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

// ---------------------------------------------------------------------------
// ROI location

fn luminance(px: &Rgb<u8>) -> u8 {
    (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8
}

fn median3x3(plane: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let h = plane.len();
    let w = plane[0].len();
    let mut out = vec![vec![0u8; w]; h];
    let mut buf = [0u8; 9];
    for i in 0..h {
        for j in 0..w {
            let mut n = 0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    buf[n] = plane[ii][jj];
                    n += 1;
                }
            }
            buf.sort_unstable();
            out[i][j] = buf[4];
        }
    }
    out
}

/// Locates the optic-disc ROI. With a mask the center is the mask centroid;
/// otherwise the centroid of the top-1% brightest green-channel pixels after
/// median smoothing. The crop side is `roi_scale * min(H, W)`.
pub fn locate_roi(img: &RgbImage, mask: Option<&GrayImage>, roi_scale: f64) -> Result<RoiCrop> {
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    let side = (roi_scale * h.min(w) as f64).round().max(1.0) as usize;

    let center = if let Some(m) = mask {
        let mut sum_r = 0.0;
        let mut sum_c = 0.0;
        let mut n = 0usize;
        for (x, y, px) in m.enumerate_pixels() {
            if px[0] > 127 {
                sum_r += y as f64;
                sum_c += x as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        (sum_r / n as f64, sum_c / n as f64)
    } else {
        let mut green = vec![vec![0u8; w]; h];
        for (x, y, px) in img.enumerate_pixels() {
            green[y as usize][x as usize] = px[1];
        }
        let smooth = median3x3(&green);
        let mut values: Vec<u8> = smooth.iter().flatten().copied().collect();
        values.sort_unstable();
        let q_idx = ((values.len() - 1) as f64 * 0.99).floor() as usize;
        let q = values[q_idx];
        let mut sum_r = 0.0;
        let mut sum_c = 0.0;
        let mut n = 0usize;
        for (i, row) in smooth.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v >= q {
                    sum_r += i as f64;
                    sum_c += j as f64;
                    n += 1;
                }
            }
        }
        (sum_r / n as f64, sum_c / n as f64)
    };

    Ok(RoiCrop {
        center,
        side,
        source_size: (h, w),
    })
}

pub fn extract_crop(img: &RgbImage, crop: &RoiCrop) -> RgbImage {
    let (r0, c0, ch, cw) = crop.rect();
    image::imageops::crop_imm(img, c0 as u32, r0 as u32, cw as u32, ch as u32).to_image()
}

// ---------------------------------------------------------------------------
// CLAHE

struct TileGrid {
    rows: usize,
    cols: usize,
    tile_h: f64,
    tile_w: f64,
}

impl TileGrid {
    fn new(h: usize, w: usize, grid: (usize, usize)) -> TileGrid {
        let rows = grid.0.min(h).max(1);
        let cols = grid.1.min(w).max(1);
        TileGrid {
            rows,
            cols,
            tile_h: h as f64 / rows as f64,
            tile_w: w as f64 / cols as f64,
        }
    }

    fn tile_of(&self, y: usize, x: usize) -> (usize, usize) {
        let ti = ((y as f64 / self.tile_h) as usize).min(self.rows - 1);
        let tj = ((x as f64 / self.tile_w) as usize).min(self.cols - 1);
        (ti, tj)
    }
}

/// Per-tile clipped histograms of the luminance channel: clip at
/// `clip_limit * tile_area / 256`, then spread the excess uniformly
/// (the remainder is placed at evenly spaced bins).
pub fn clahe_clipped_histograms(
    lum: &[Vec<u8>],
    params: &ClaheParams,
) -> (Vec<Vec<[u32; 256]>>, Vec<Vec<u32>>) {
    let h = lum.len();
    let w = lum[0].len();
    let grid = TileGrid::new(h, w, params.tile_grid);
    let mut hists = vec![vec![[0u32; 256]; grid.cols]; grid.rows];
    let mut areas = vec![vec![0u32; grid.cols]; grid.rows];
    for (y, row) in lum.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            let (ti, tj) = grid.tile_of(y, x);
            hists[ti][tj][v as usize] += 1;
            areas[ti][tj] += 1;
        }
    }
    for ti in 0..grid.rows {
        for tj in 0..grid.cols {
            let area = areas[ti][tj];
            let limit = ((params.clip_limit * area as f64 / 256.0).round() as u32).max(1);
            let hist = &mut hists[ti][tj];
            let mut excess = 0u32;
            for bin in hist.iter_mut() {
                if *bin > limit {
                    excess += *bin - limit;
                    *bin = limit;
                }
            }
            let add = excess / 256;
            let rem = excess % 256;
            for bin in hist.iter_mut() {
                *bin += add;
            }
            for i in 0..rem as usize {
                hist[i * 256 / rem as usize] += 1;
            }
        }
    }
    (hists, areas)
}

/// Contrast-limited adaptive histogram equalization on the luminance channel,
/// with bilinear blending between the four neighboring tile mappings. RGB is
/// rescaled by the luminance ratio so hue is preserved.
pub fn apply_clahe(img: &RgbImage, params: &ClaheParams) -> Result<RgbImage> {
    params.validate()?;
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    let mut lum = vec![vec![0u8; w]; h];
    for (x, y, px) in img.enumerate_pixels() {
        lum[y as usize][x as usize] = luminance(px);
    }
    let grid = TileGrid::new(h, w, params.tile_grid);
    let (hists, areas) = clahe_clipped_histograms(&lum, params);

    // per-tile look-up tables from cumulative histograms
    let mut luts = vec![vec![[0.0f64; 256]; grid.cols]; grid.rows];
    for ti in 0..grid.rows {
        for tj in 0..grid.cols {
            let mut cdf = 0u64;
            let area = areas[ti][tj] as f64;
            for v in 0..256 {
                cdf += hists[ti][tj][v] as u64;
                luts[ti][tj][v] = 255.0 * cdf as f64 / area;
            }
        }
    }

    let blend_axis = |pos: usize, tile: f64, count: usize| -> (usize, usize, f64) {
        let t = (pos as f64 + 0.5) / tile - 0.5;
        if t <= 0.0 {
            (0, 0, 0.0)
        } else if t >= (count - 1) as f64 {
            (count - 1, count - 1, 0.0)
        } else {
            let lo = t.floor() as usize;
            (lo, lo + 1, t - lo as f64)
        }
    };

    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let (t0, t1, fy) = blend_axis(y, grid.tile_h, grid.rows);
        for x in 0..w {
            let (s0, s1, fx) = blend_axis(x, grid.tile_w, grid.cols);
            let v = lum[y][x] as usize;
            let new_l = (1.0 - fy) * ((1.0 - fx) * luts[t0][s0][v] + fx * luts[t0][s1][v])
                + fy * ((1.0 - fx) * luts[t1][s0][v] + fx * luts[t1][s1][v]);
            let old_l = lum[y][x] as f64;
            let px = img.get_pixel(x as u32, y as u32);
            let ratio = if old_l > 0.0 { new_l / old_l } else { 0.0 };
            let map = |c: u8| (c as f64 * ratio).round().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, Rgb([map(px[0]), map(px[1]), map(px[2])]));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// augmentation

fn policy_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (2.5 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / norm).collect();

    let arr = rgb_to_chw(img);
    let (c, h, w) = arr.dim();
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let xx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * arr[(ci, y, xx)];
                }
                tmp[(ci, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let yy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(ci, yy, x)];
                }
                out[(ci, y, x)] = acc;
            }
        }
    }
    chw_to_rgb(&out)
}

fn map_pixels(img: &RgbImage, f: impl Fn(&Rgb<u8>) -> [f64; 3]) -> RgbImage {
    let mut out = RgbImage::new(img.width(), img.height());
    for (x, y, px) in img.enumerate_pixels() {
        let v = f(px);
        out.put_pixel(
            x,
            y,
            Rgb([
                v[0].round().clamp(0.0, 255.0) as u8,
                v[1].round().clamp(0.0, 255.0) as u8,
                v[2].round().clamp(0.0, 255.0) as u8,
            ]),
        );
    }
    out
}

fn color_jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    map_pixels(img, |px| {
        let mut v = [px[0] as f64, px[1] as f64, px[2] as f64];
        for ch in &mut v {
            *ch = (*ch * brightness - 128.0) * contrast + 128.0;
        }
        let gray = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        [
            gray + saturation * (v[0] - gray),
            gray + saturation * (v[1] - gray),
            gray + saturation * (v[2] - gray),
        ]
    })
}

/// Applies each configured op independently with probability `p_apply`,
/// drawing from the (seed, index) counter stream.
pub fn augment(img: &RgbImage, policy: &AugmentationPolicy, index: u64) -> Result<RgbImage> {
    policy.validate()?;
    let mut rng = policy_rng(policy.seed, index);
    let mut out = img.clone();
    for op in &policy.ops {
        let u: f64 = rng.random_range(0.0..1.0);
        let apply = u < policy.p_apply;
        match op {
            AugmentOp::Hflip => {
                if apply {
                    out = image::imageops::flip_horizontal(&out);
                }
            }
            AugmentOp::Vflip => {
                if apply {
                    out = image::imageops::flip_vertical(&out);
                }
            }
            AugmentOp::ColorJitter => {
                if apply {
                    let b = rng.random_range(0.8..1.2);
                    let c = rng.random_range(0.8..1.2);
                    let s = rng.random_range(0.7..1.3);
                    out = color_jitter(&out, b, c, s);
                }
            }
            AugmentOp::GaussianBlur => {
                if apply {
                    let sigma = rng.random_range(0.5..1.5);
                    out = gaussian_blur(&out, sigma);
                }
            }
        }
    }
    Ok(out)
}

fn convolve3x3(img: &RgbImage, kernel: [[f64; 3]; 3]) -> Array3<f64> {
    let arr = rgb_to_chw(img);
    let (c, h, w) = arr.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (di, row) in kernel.iter().enumerate() {
                    for (dj, &kv) in row.iter().enumerate() {
                        let yy = (y as i64 + di as i64 - 1).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dj as i64 - 1).clamp(0, w as i64 - 1) as usize;
                        acc += kv * arr[(ci, yy, xx)];
                    }
                }
                out[(ci, y, x)] = acc;
            }
        }
    }
    out
}

fn apply_knowledge_step(img: &RgbImage, step: &KnowledgeStep) -> Result<RgbImage> {
    Ok(match step {
        KnowledgeStep::Clahe {
            clip_limit,
            tile_grid,
        } => apply_clahe(
            img,
            &ClaheParams {
                clip_limit: *clip_limit,
                tile_grid: *tile_grid,
            },
        )?,
        KnowledgeStep::ContrastBrightness {
            contrast,
            brightness,
        } => map_pixels(img, |px| {
            [
                (px[0] as f64 - 128.0) * contrast + 128.0 + brightness,
                (px[1] as f64 - 128.0) * contrast + 128.0 + brightness,
                (px[2] as f64 - 128.0) * contrast + 128.0 + brightness,
            ]
        }),
        KnowledgeStep::Sharpen { amount } => {
            let blurred = gaussian_blur(img, 1.0);
            let a = rgb_to_chw(img);
            let b = rgb_to_chw(&blurred);
            chw_to_rgb(&(&a + &(&a - &b) * *amount))
        }
        KnowledgeStep::Denoise => {
            let (w, h) = img.dimensions();
            let mut planes = Vec::new();
            for c in 0..3 {
                let mut plane = vec![vec![0u8; w as usize]; h as usize];
                for (x, y, px) in img.enumerate_pixels() {
                    plane[y as usize][x as usize] = px[c];
                }
                planes.push(median3x3(&plane));
            }
            let mut out = RgbImage::new(w, h);
            for y in 0..h as usize {
                for x in 0..w as usize {
                    out.put_pixel(
                        x as u32,
                        y as u32,
                        Rgb([planes[0][y][x], planes[1][y][x], planes[2][y][x]]),
                    );
                }
            }
            out
        }
        KnowledgeStep::Gamma { gamma } => map_pixels(img, |px| {
            [
                255.0 * (px[0] as f64 / 255.0).powf(*gamma),
                255.0 * (px[1] as f64 / 255.0).powf(*gamma),
                255.0 * (px[2] as f64 / 255.0).powf(*gamma),
            ]
        }),
        KnowledgeStep::ColorEnhance { saturation } => map_pixels(img, |px| {
            let v = [px[0] as f64, px[1] as f64, px[2] as f64];
            let gray = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
            [
                gray + saturation * (v[0] - gray),
                gray + saturation * (v[1] - gray),
                gray + saturation * (v[2] - gray),
            ]
        }),
        KnowledgeStep::EdgeEnhance { amount } => {
            let lap = convolve3x3(
                img,
                [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]],
            );
            let a = rgb_to_chw(img);
            chw_to_rgb(&(&a + &lap * *amount))
        }
        KnowledgeStep::MultiscaleFuse { weight } => {
            let (w, h) = img.dimensions();
            let down = bilinear_resize_rgb(img, (h as usize / 2).max(1), (w as usize / 2).max(1));
            let up = bilinear_resize_rgb(&down, h as usize, w as usize);
            let a = rgb_to_chw(img);
            let b = rgb_to_chw(&up);
            chw_to_rgb(&(&a * (1.0 - weight) + &b * *weight))
        }
    })
}

/// Eight-step probabilistic enhancement chain applied in declared order.
pub fn knowledge_enhance(
    img: &RgbImage,
    policy: &KnowledgeEnhancePolicy,
    index: u64,
) -> Result<RgbImage> {
    policy.validate()?;
    let mut rng = policy_rng(policy.seed, index);
    let mut out = img.clone();
    for spec in &policy.steps {
        let u: f64 = rng.random_range(0.0..1.0);
        if u < spec.probability {
            out = apply_knowledge_step(&out, &spec.step)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// model input

/// Bilinear resize to target x target, channel-first, scaled to [0,1], then
/// per-channel standardization when enabled. Returns a (1,3,T,T) array.
pub fn to_model_input(img: &RgbImage, target: usize, normalize: &Normalize) -> Array4<f64> {
    let arr = rgb_to_chw(img);
    let resized = bilinear_resize_chw(&arr, target, target);
    let mut out = Array4::<f64>::zeros((1, 3, target, target));
    for c in 0..3 {
        for y in 0..target {
            for x in 0..target {
                let mut v = resized[(c, y, x)] / 255.0;
                if normalize.enabled {
                    v = (v - normalize.mean[c]) / normalize.std[c];
                }
                out[(0, c, y, x)] = v;
            }
        }
    }
    out
}

/// The input resolution used by the full-scale training protocol.
pub const DEFAULT_INPUT_SIZE: usize = 299;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ImageRef, SyntheticSpec};

    fn constant_image(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    #[test]
    fn clahe_constant_gray_is_near_identity() {
        let img = constant_image(128, 128, 128);
        let params = ClaheParams {
            clip_limit: 2.0,
            tile_grid: (4, 4),
        };
        let out = apply_clahe(&img, &params).unwrap();
        assert_eq!(out.dimensions(), img.dimensions());
        for (a, b) in img.pixels().zip(out.pixels()) {
            for c in 0..3 {
                assert!((a[c] as i32 - b[c] as i32).abs() <= 1, "{:?} vs {:?}", a, b);
            }
        }
    }

    #[test]
    fn clahe_idempotent_on_constant_within_one_level() {
        let img = constant_image(128, 128, 180);
        let params = ClaheParams {
            clip_limit: 2.0,
            tile_grid: (4, 4),
        };
        let once = apply_clahe(&img, &params).unwrap();
        let twice = apply_clahe(&once, &params).unwrap();
        for (a, b) in once.pixels().zip(twice.pixels()) {
            for c in 0..3 {
                assert!((a[c] as i32 - b[c] as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn clahe_preserves_shape() {
        let img = constant_image(37, 53, 77);
        let out = apply_clahe(&img, &ClaheParams::default()).unwrap();
        assert_eq!(out.dimensions(), (37, 53));
    }

    #[test]
    fn clahe_clip_property_on_two_region_image() {
        // left half dark, right half bright
        let mut img = RgbImage::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let v = if x < 32 { 40 } else { 210 };
                img.put_pixel(x, y, Rgb([v, v, v]));
            }
        }
        let params = ClaheParams {
            clip_limit: 2.0,
            tile_grid: (4, 4),
        };
        let mut lum = vec![vec![0u8; 64]; 64];
        for (x, y, px) in img.enumerate_pixels() {
            lum[y as usize][x as usize] =
                (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8;
        }
        let (hists, areas) = clahe_clipped_histograms(&lum, &params);
        for (ti, row) in hists.iter().enumerate() {
            for (tj, hist) in row.iter().enumerate() {
                let area = areas[ti][tj];
                let limit = (params.clip_limit * area as f64 / 256.0).round().max(1.0) as u32;
                let excess_budget = area.saturating_sub(limit) / 256 + 1;
                for &bin in hist.iter() {
                    assert!(
                        bin <= limit + excess_budget,
                        "bin {bin} exceeds clip bound {limit}+{excess_budget}"
                    );
                }
            }
        }
    }

    // independent straightforward re-implementation used as the CLAHE oracle
    fn naive_clahe_lum(lum: &[Vec<u8>], params: &ClaheParams) -> Vec<Vec<f64>> {
        let h = lum.len();
        let w = lum[0].len();
        let rows = params.tile_grid.0.min(h).max(1);
        let cols = params.tile_grid.1.min(w).max(1);
        let th = h as f64 / rows as f64;
        let tw = w as f64 / cols as f64;
        let mut hists = vec![vec![vec![0u32; 256]; cols]; rows];
        let mut areas = vec![vec![0u32; cols]; rows];
        for y in 0..h {
            for x in 0..w {
                let ti = ((y as f64 / th) as usize).min(rows - 1);
                let tj = ((x as f64 / tw) as usize).min(cols - 1);
                hists[ti][tj][lum[y][x] as usize] += 1;
                areas[ti][tj] += 1;
            }
        }
        let mut luts = vec![vec![vec![0.0f64; 256]; cols]; rows];
        for ti in 0..rows {
            for tj in 0..cols {
                let area = areas[ti][tj];
                let limit = ((params.clip_limit * area as f64 / 256.0).round() as u32).max(1);
                let mut hist = hists[ti][tj].clone();
                let mut excess = 0u32;
                for b in hist.iter_mut() {
                    if *b > limit {
                        excess += *b - limit;
                        *b = limit;
                    }
                }
                for b in hist.iter_mut() {
                    *b += excess / 256;
                }
                for i in 0..(excess % 256) as usize {
                    hist[i * 256 / (excess % 256) as usize] += 1;
                }
                let mut cdf = 0u64;
                for v in 0..256 {
                    cdf += hist[v] as u64;
                    luts[ti][tj][v] = 255.0 * cdf as f64 / area as f64;
                }
            }
        }
        let axis = |pos: usize, tile: f64, count: usize| -> (usize, usize, f64) {
            let t = (pos as f64 + 0.5) / tile - 0.5;
            if t <= 0.0 {
                (0, 0, 0.0)
            } else if t >= (count - 1) as f64 {
                (count - 1, count - 1, 0.0)
            } else {
                let lo = t.floor() as usize;
                (lo, lo + 1, t - lo as f64)
            }
        };
        let mut out = vec![vec![0.0f64; w]; h];
        for y in 0..h {
            for x in 0..w {
                let (t0, t1, fy) = axis(y, th, rows);
                let (s0, s1, fx) = axis(x, tw, cols);
                let v = lum[y][x] as usize;
                out[y][x] = (1.0 - fy) * ((1.0 - fx) * luts[t0][s0][v] + fx * luts[t0][s1][v])
                    + fy * ((1.0 - fx) * luts[t1][s0][v] + fx * luts[t1][s1][v]);
            }
        }
        out
    }

    #[test]
    fn clahe_matches_naive_oracle_on_random_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut img = RgbImage::new(48, 40);
        for y in 0..40 {
            for x in 0..48 {
                let v: u8 = rng.random_range(0..=255);
                img.put_pixel(x, y, Rgb([v, v, v]));
            }
        }
        let params = ClaheParams {
            clip_limit: 3.0,
            tile_grid: (4, 5),
        };
        let out = apply_clahe(&img, &params).unwrap();
        let lum: Vec<Vec<u8>> = (0..40)
            .map(|y| (0..48).map(|x| img.get_pixel(x, y)[0]).collect())
            .collect();
        let expected = naive_clahe_lum(&lum, &params);
        for y in 0..40usize {
            for x in 0..48usize {
                // gray pixels: all channels carry the new luminance value
                let got = out.get_pixel(x as u32, y as u32)[1] as f64;
                let old = lum[y][x] as f64;
                let want = if old > 0.0 {
                    (old * (expected[y][x] / old)).round().clamp(0.0, 255.0)
                } else {
                    0.0
                };
                assert!(
                    (got - want).abs() <= 1.0,
                    "({y},{x}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn roi_single_pixel_mask_centroid() {
        let img = constant_image(128, 96, 10);
        let mut mask = GrayImage::new(128, 96);
        mask.put_pixel(60, 40, image::Luma([255]));
        let crop = locate_roi(&img, Some(&mask), 0.6).unwrap();
        assert_eq!(crop.center, (40.0, 60.0));
        assert_eq!(crop.side, (0.6f64 * 96.0).round() as usize);
    }

    #[test]
    fn roi_empty_mask_is_error() {
        let img = constant_image(64, 64, 10);
        let mask = GrayImage::new(64, 64);
        assert!(matches!(
            locate_roi(&img, Some(&mask), 0.6),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn roi_uniform_image_centers() {
        let img = constant_image(64, 64, 90);
        let crop = locate_roi(&img, None, 0.6).unwrap();
        assert_eq!(crop.center, (31.5, 31.5));
    }

    #[test]
    fn roi_heuristic_finds_synthetic_disc() {
        let spec = SyntheticSpec {
            image_size: 100,
            disc_radius_frac: 0.1,
            cdr: 0.4,
            noise_sigma: 3.0,
            seed: 5,
            disc_center: Some((30, 70)),
        };
        let sample = generate_synthetic(&spec).unwrap();
        let ImageRef::Memory(img) = &sample.image_ref else {
            panic!()
        };
        let crop = locate_roi(img, None, 0.6).unwrap();
        assert!(
            (crop.center.0 - 30.0).abs() <= 5.0 && (crop.center.1 - 70.0).abs() <= 5.0,
            "center {:?}",
            crop.center
        );

        // oracle: exhaustive brightest 9x9 green window
        let mut best = (0.0, 0, 0);
        for cy in 4..96usize {
            for cx in 4..96usize {
                let mut sum = 0.0;
                for dy in -4i64..=4 {
                    for dx in -4i64..=4 {
                        let px = img.get_pixel((cx as i64 + dx) as u32, (cy as i64 + dy) as u32);
                        sum += px[1] as f64;
                    }
                }
                if sum > best.0 {
                    best = (sum, cy, cx);
                }
            }
        }
        assert!(
            (crop.center.0 - best.1 as f64).abs() <= 5.0
                && (crop.center.1 - best.2 as f64).abs() <= 5.0,
            "heuristic {:?} vs exhaustive {:?}",
            crop.center,
            (best.1, best.2)
        );
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(
                    x,
                    y,
                    Rgb([rng.random(), rng.random(), rng.random()]),
                );
            }
        }
        img
    }

    #[test]
    fn augment_zero_probability_is_identity() {
        let img = random_image(32, 32, 1);
        let policy = AugmentationPolicy {
            p_apply: 0.0,
            ..Default::default()
        };
        let out = augment(&img, &policy, 0).unwrap();
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn hflip_twice_restores_image() {
        let img = random_image(32, 32, 2);
        let policy = AugmentationPolicy {
            p_apply: 1.0,
            ops: vec![AugmentOp::Hflip],
            seed: 9,
        };
        let once = augment(&img, &policy, 0).unwrap();
        let twice = augment(&once, &policy, 0).unwrap();
        assert_ne!(img.as_raw(), once.as_raw());
        assert_eq!(img.as_raw(), twice.as_raw());
    }

    #[test]
    fn flips_preserve_pixel_multiset() {
        let img = random_image(16, 16, 3);
        let policy = AugmentationPolicy {
            p_apply: 1.0,
            ops: vec![AugmentOp::Hflip, AugmentOp::Vflip],
            seed: 4,
        };
        let out = augment(&img, &policy, 3).unwrap();
        let mut a: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        let mut b: Vec<[u8; 3]> = out.pixels().map(|p| p.0).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_is_deterministic_per_index() {
        let img = random_image(24, 24, 5);
        let policy = AugmentationPolicy {
            p_apply: 0.5,
            seed: 77,
            ..Default::default()
        };
        let a = augment(&img, &policy, 13).unwrap();
        let b = augment(&img, &policy, 13).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn knowledge_all_zero_probability_is_identity() {
        let img = random_image(32, 32, 6);
        let mut policy = KnowledgeEnhancePolicy::default();
        for s in &mut policy.steps {
            s.probability = 0.0;
        }
        let out = knowledge_enhance(&img, &policy, 0).unwrap();
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn gamma_one_step_is_identity() {
        let img = random_image(16, 16, 7);
        let out = apply_knowledge_step(&img, &KnowledgeStep::Gamma { gamma: 1.0 }).unwrap();
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn knowledge_enhance_is_deterministic() {
        let img = random_image(32, 32, 8);
        let policy = KnowledgeEnhancePolicy {
            seed: 31,
            ..Default::default()
        };
        let a = knowledge_enhance(&img, &policy, 2).unwrap();
        let b = knowledge_enhance(&img, &policy, 2).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn model_input_without_standardization_is_scaled_input() {
        let img = random_image(16, 16, 9);
        let norm = Normalize {
            enabled: false,
            ..Default::default()
        };
        let out = to_model_input(&img, 16, &norm);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let v = out[(0, c, y as usize, x as usize)];
                assert!((v - px[c] as f64 / 255.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_input_size_is_299() {
        assert_eq!(DEFAULT_INPUT_SIZE, 299);
    }

    #[test]
    fn checkerboard_upscale_matches_hand_computed_bilinear() {
        // 2x2 single-channel checkerboard upscaled to 4x4.
        // Sample positions (pixel centers): [0, 0.25, 0.75, 1].
        let x = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = bilinear_resize_chw(&x, 4, 4);
        let pos = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let (fy, fx) = (pos[i], pos[j]);
                let expect = (1.0 - fy) * ((1.0 - fx) * 0.0 + fx * 1.0)
                    + fy * ((1.0 - fx) * 1.0 + fx * 0.0);
                assert!(
                    (out[(0, i, j)] - expect).abs() < 1e-12,
                    "({i},{j}): {} vs {expect}",
                    out[(0, i, j)]
                );
            }
        }
    }
}
