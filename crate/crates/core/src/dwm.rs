//! Dynamic window mechanism: response score maps over a feature map,
//! best-window search across multiple sizes, coordinate mapping back to the
//! image, and patch aggregation into the dynamic-branch embedding.
//!
//! The normalized window center for score-map index (i, j) is
//!
//! ```text
//! x_center = (2i + H - Hp + 1) / (2H)
//! y_center = (2j + W - Wp + 1) / (2W)
//! ```
//!
//! with H, W the feature-map (score-map source) dims. The formula is applied
//! verbatim; note that for a full-cover window (Hp = H) it yields 1/(2H)
//! rather than 0.5 -- this is the defined mapping, kept as-is.

use crate::backbone::{Backbone, BranchTag, Embedding, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::ops::concat_batch;
use crate::nn::{sum_vars, Binder, ParamStore, Tape, Var};
use crate::preprocess::bilinear_resize_chw;
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView3, Ix2};
use serde::{Deserialize, Serialize};

/// Sliding-window response map; entry (i, j) is the mean of the channel-mean
/// feature values inside the window placed at (i, j) with stride 1.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub data: Array2<f64>,
    pub window: (usize, usize),
    pub source_dims: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSelection {
    pub window: (usize, usize),
    pub index: (usize, usize),
    /// Normalized center (x over rows, y over cols), each in (0,1).
    pub center: (f64, f64),
    /// (row0, col0, height, width) on the target image, clipped to bounds.
    pub crop_rect: (usize, usize, usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DwmConfig {
    /// Candidate window sizes (Hp, Wp) in feature-map units. Ties between
    /// candidates break by listed size order first, then row-major position.
    pub window_sizes: Vec<(usize, usize)>,
    pub top_p: usize,
    /// Maximum IoU allowed between any two selected windows.
    pub suppress_overlap: f64,
}

impl DwmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_p < 1 {
            return Err(Error::Config("top_p must be >= 1".into()));
        }
        if self.window_sizes.is_empty() {
            return Err(Error::Config("window_sizes must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.suppress_overlap) {
            return Err(Error::Config("suppress_overlap must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Window sizes from fractions of the feature-map side, deduplicated. Sizes
/// are floored at a third of the side (rounded up) so the center formula
/// stays within (0, 1] for every valid placement.
pub fn window_sizes_from_fracs(h: usize, w: usize, fracs: &[f64]) -> Vec<(usize, usize)> {
    let floor_for = |side: usize| (side + 1).div_ceil(3);
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &f in fracs {
        let hp = ((h as f64 * f).round() as usize).clamp(floor_for(h), h);
        let wp = ((w as f64 * f).round() as usize).clamp(floor_for(w), w);
        if !out.contains(&(hp, wp)) {
            out.push((hp, wp));
        }
    }
    out
}

/// Normalized center coordinates of the window at score-map index (i, j).
pub fn window_center(
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    i: usize,
    j: usize,
) -> (f64, f64) {
    let x = (2 * i + h - hp + 1) as f64 / (2 * h) as f64;
    let y = (2 * j + w - wp + 1) as f64 / (2 * w) as f64;
    (x, y)
}

/// Channel-mean then stride-1 window-mean response map for one sample.
pub fn score_map(f: &FeatureMap, window: (usize, usize)) -> Result<ScoreMap> {
    let (b, c, h, w) = f.data.dim();
    if b != 1 {
        return Err(Error::BatchMismatch(format!(
            "score_map expects a single-sample feature map, got batch {b}"
        )));
    }
    let (hp, wp) = window;
    if hp == 0 || wp == 0 || hp > h || wp > w {
        return Err(Error::WindowTooLarge {
            window,
            dims: (h, w),
        });
    }
    // channel-sum map, then a summed-area table for O(1) window sums; the
    // mean divides once at the end so exactly-tied windows stay exact
    let mut summed = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        summed += &f.data.slice(s![0, ci, .., ..]);
    }
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            integral[(i + 1, j + 1)] =
                summed[(i, j)] + integral[(i, j + 1)] + integral[(i + 1, j)] - integral[(i, j)];
        }
    }
    let hs = h - hp + 1;
    let ws = w - wp + 1;
    let denom = (c * hp * wp) as f64;
    let mut data = Array2::<f64>::zeros((hs, ws));
    for i in 0..hs {
        for j in 0..ws {
            let sum = integral[(i + hp, j + wp)] - integral[(i, j + wp)]
                - integral[(i + hp, j)]
                + integral[(i, j)];
            data[(i, j)] = sum / denom;
        }
    }
    Ok(ScoreMap {
        data,
        window,
        source_dims: (h, w),
    })
}

fn rect_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let (ai, aj, ah, aw) = a;
    let (bi, bj, bh, bw) = b;
    let ri = ai.max(bi);
    let rj = aj.max(bj);
    let r2 = (ai + ah).min(bi + bh);
    let c2 = (aj + aw).min(bj + bw);
    if r2 <= ri || c2 <= rj {
        return 0.0;
    }
    let inter = ((r2 - ri) * (c2 - rj)) as f64;
    let union = (ah * aw + bh * bw) as f64 - inter;
    inter / union
}

fn crop_rect_for(
    center: (f64, f64),
    window: (usize, usize),
    source: (usize, usize),
    image: (usize, usize),
) -> (usize, usize, usize, usize) {
    let (ih, iw) = image;
    let cr = center.0 * ih as f64;
    let cc = center.1 * iw as f64;
    let hh = window.0 as f64 * ih as f64 / source.0 as f64 / 2.0;
    let hw = window.1 as f64 * iw as f64 / source.1 as f64 / 2.0;
    let r0 = (cr - hh).round().max(0.0) as usize;
    let c0 = (cc - hw).round().max(0.0) as usize;
    let r1 = ((cr + hh).round() as usize).min(ih).max(r0 + 1);
    let c1 = ((cc + hw).round() as usize).min(iw).max(c0 + 1);
    let r0 = r0.min(ih - 1);
    let c0 = c0.min(iw - 1);
    (r0, c0, r1 - r0, c1 - c0)
}

/// Top-scoring windows across every configured size, stride-1 position, with
/// greedy IoU suppression. Fully deterministic: candidates sort by score
/// descending, then size order, then row-major index.
pub fn select_windows(
    f: &FeatureMap,
    cfg: &DwmConfig,
    image_dims: (usize, usize),
) -> Result<Vec<WindowSelection>> {
    cfg.validate()?;
    struct Candidate {
        size_idx: usize,
        index: (usize, usize),
        score: f64,
    }
    let mut candidates = Vec::new();
    for (size_idx, &window) in cfg.window_sizes.iter().enumerate() {
        let sm = score_map(f, window)?;
        for i in 0..sm.data.dim().0 {
            for j in 0..sm.data.dim().1 {
                candidates.push(Candidate {
                    size_idx,
                    index: (i, j),
                    score: sm.data[(i, j)],
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.size_idx.cmp(&b.size_idx))
            .then(a.index.cmp(&b.index))
    });

    let (_, _, h, w) = f.data.dim();
    let mut selections: Vec<WindowSelection> = Vec::new();
    let mut kept_rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for cand in candidates {
        if selections.len() >= cfg.top_p {
            break;
        }
        let window = cfg.window_sizes[cand.size_idx];
        let rect = (cand.index.0, cand.index.1, window.0, window.1);
        if kept_rects
            .iter()
            .any(|&kept| rect_iou(rect, kept) > cfg.suppress_overlap)
        {
            continue;
        }
        let center = window_center(h, w, window.0, window.1, cand.index.0, cand.index.1);
        selections.push(WindowSelection {
            window,
            index: cand.index,
            center,
            crop_rect: crop_rect_for(center, window, (h, w), image_dims),
            score: cand.score,
        });
        kept_rects.push(rect);
    }
    Ok(selections)
}

fn crop_resized(
    x: &ArrayView3<'_, f64>,
    rect: (usize, usize, usize, usize),
    resize_to: usize,
) -> Result<Array3<f64>> {
    let (r0, c0, h, w) = rect;
    if h == 0 || w == 0 || r0 + h > x.dim().1 || c0 + w > x.dim().2 {
        return Err(Error::DegenerateCrop(format!(
            "rect {rect:?} invalid for image {:?}",
            x.dim()
        )));
    }
    let crop = x.slice(s![.., r0..r0 + h, c0..c0 + w]).to_owned();
    Ok(bilinear_resize_chw(&crop, resize_to, resize_to))
}

/// Tape-level patch aggregation for one sample: each crop is resized, encoded
/// by the shared backbone, summed element-wise, pooled, and projected.
/// Crops enter the tape as leaves; selection is hard, so no gradient flows
/// through window coordinates.
pub fn aggregate_patches_vars(
    tape: &Tape,
    binder: &Binder,
    backbone: &Backbone,
    x_sample: &ArrayView3<'_, f64>,
    selections: &[WindowSelection],
    prior_row: Option<&ArrayView1<'_, f64>>,
    resize_to: usize,
) -> Result<Var> {
    if selections.is_empty() {
        return Err(Error::DegenerateCrop("no window selections".into()));
    }
    let mut patches = Vec::with_capacity(selections.len());
    for sel in selections {
        let resized = crop_resized(x_sample, sel.crop_rect, resize_to)?;
        patches.push(tape.leaf(resized.insert_axis(ndarray::Axis(0)).into_dyn()));
    }
    let batch = concat_batch(&patches);
    let prior_var = prior_row.map(|p| {
        let mut rep = Array2::<f64>::zeros((selections.len(), p.len()));
        for mut row in rep.rows_mut() {
            row.assign(p);
        }
        tape.leaf(rep.into_dyn())
    });
    let stages = backbone.encode_vars(tape, binder, &batch, prior_var.as_ref())?;
    let feats: Vec<Var> = (0..selections.len())
        .map(|i| stages[3].slice_batch(i, 1))
        .collect();
    let summed = sum_vars(&feats);
    Ok(backbone.embed_var(binder, &summed))
}

/// Array-level aggregation returning the dynamic-branch embedding.
pub fn aggregate_patches(
    image: &ArrayView3<'_, f64>,
    selections: &[WindowSelection],
    backbone: &Backbone,
    params: &ParamStore,
    prior_row: Option<&ArrayView1<'_, f64>>,
    resize_to: usize,
) -> Result<Embedding> {
    let tape = Tape::no_grad();
    let binder = Binder::new(&tape, params);
    let e = aggregate_patches_vars(
        &tape,
        &binder,
        backbone,
        image,
        selections,
        prior_row,
        resize_to,
    )?;
    Embedding::new(
        e.to_array().into_dimensionality::<Ix2>().unwrap(),
        BranchTag::Dynamic,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::backbone::{BackboneConfig, Provenance};
    use ndarray::{Array4, Ix2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_of(data: Array4<f64>) -> FeatureMap {
        FeatureMap::new(data, Provenance::Global).unwrap()
    }

    #[test]
    fn constant_map_scores_constant() {
        let f = map_of(Array4::from_elem((1, 3, 5, 5), 2.5));
        let sm = score_map(&f, (2, 3)).unwrap();
        assert_eq!(sm.data.dim(), (4, 3));
        assert!(sm.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn analytic_three_by_three_scores() {
        let data = Array4::from_shape_vec(
            (1, 1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let sm = score_map(&map_of(data), (2, 2)).unwrap();
        let expect = ndarray::arr2(&[[3.0, 4.0], [6.0, 7.0]]);
        for (a, b) in sm.data.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_map_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array4::from_shape_fn((1, 4, 8, 8), |_| rng.random_range(-2.0..2.0));
        let sm = score_map(&map_of(data.clone()), (3, 3)).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut sum = 0.0;
                for c in 0..4 {
                    for di in 0..3 {
                        for dj in 0..3 {
                            sum += data[(0, c, i + di, j + dj)];
                        }
                    }
                }
                let expect = sum / (4.0 * 9.0);
                assert!((sm.data[(i, j)] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let f = map_of(Array4::zeros((1, 1, 4, 4)));
        assert!(matches!(
            score_map(&f, (5, 2)),
            Err(Error::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn center_formula_reference_case() {
        let (x, y) = window_center(10, 10, 4, 4, 3, 3);
        assert!((x - 0.65).abs() < 1e-15);
        assert!((y - 0.65).abs() < 1e-15);
    }

    #[test]
    fn full_cover_window_center_follows_formula_verbatim() {
        let f = map_of(Array4::from_elem((1, 1, 6, 6), 1.0));
        let cfg = DwmConfig {
            window_sizes: vec![(6, 6)],
            top_p: 3,
            suppress_overlap: 1.0,
        };
        let sels = select_windows(&f, &cfg, (48, 48)).unwrap();
        assert_eq!(sels.len(), 1);
        assert_eq!(sels[0].index, (0, 0));
        assert!((sels[0].center.0 - 1.0 / 12.0).abs() < 1e-15);
        assert!((sels[0].center.1 - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn centers_stay_in_unit_interval_for_configured_window_sizes() {
        // The center formula can exceed 1 near the trailing edge when a
        // window spans less than a third of the map; the configured sizes
        // (>= 3/8 of the side) stay within (0, 1].
        for h in 3..20usize {
            for (hp, _) in window_sizes_from_fracs(h, h, &[0.375, 0.5]) {
                for i in 0..=(h - hp) {
                    let (x, _) = window_center(h, h, hp, hp, i, 0);
                    assert!(x > 0.0 && x <= 1.0, "h={h} hp={hp} i={i}: {x}");
                }
            }
        }
    }

    // exhaustive enumeration + sort used as the selection oracle
    fn brute_force_select(
        f: &FeatureMap,
        cfg: &DwmConfig,
    ) -> Vec<(usize, (usize, usize), f64)> {
        let (_, c, h, w) = f.data.dim();
        let mut cands = Vec::new();
        for (si, &(hp, wp)) in cfg.window_sizes.iter().enumerate() {
            for i in 0..=(h - hp) {
                for j in 0..=(w - wp) {
                    let mut sum = 0.0;
                    for ci in 0..c {
                        for di in 0..hp {
                            for dj in 0..wp {
                                sum += f.data[(0, ci, i + di, j + dj)];
                            }
                        }
                    }
                    cands.push((si, (i, j), sum / (c * hp * wp) as f64));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let mut kept: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut out = Vec::new();
        for (si, idx, score) in cands {
            if out.len() >= cfg.top_p {
                break;
            }
            let (hp, wp) = cfg.window_sizes[si];
            let rect = (idx.0, idx.1, hp, wp);
            let iou_ok = kept.iter().all(|&k| rect_iou(rect, k) <= cfg.suppress_overlap);
            if iou_ok {
                kept.push(rect);
                out.push((si, idx, score));
            }
        }
        out
    }

    #[test]
    fn selection_matches_brute_force_with_and_without_suppression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let h = rng.random_range(5..12);
            let w = rng.random_range(5..12);
            let data = Array4::from_shape_fn((1, 3, h, w), |_| rng.random_range(-1.0..1.0));
            let f = map_of(data);
            let cfg = DwmConfig {
                window_sizes: vec![(2, 2), (3, 3)],
                top_p: 3,
                suppress_overlap: if trial % 2 == 0 { 1.0 } else { 0.5 },
            };
            let got = select_windows(&f, &cfg, (64, 64)).unwrap();
            let expect = brute_force_select(&f, &cfg);
            assert_eq!(got.len(), expect.len());
            for (g, e) in got.iter().zip(expect.iter()) {
                assert_eq!(g.window, cfg.window_sizes[e.0]);
                assert_eq!(g.index, e.1);
                assert!((g.score - e.2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ties_resolve_to_smaller_size_then_row_major() {
        let f = map_of(Array4::from_elem((1, 2, 4, 4), 1.0));
        let cfg = DwmConfig {
            window_sizes: vec![(2, 2), (3, 3)],
            top_p: 2,
            suppress_overlap: 1.0,
        };
        let sels = select_windows(&f, &cfg, (32, 32)).unwrap();
        assert_eq!(sels[0].window, (2, 2));
        assert_eq!(sels[0].index, (0, 0));
        assert_eq!(sels[1].window, (2, 2));
        assert_eq!(sels[1].index, (0, 1));
        // determinism across calls
        assert_eq!(sels, select_windows(&f, &cfg, (32, 32)).unwrap());
    }

    #[test]
    fn constant_shift_preserves_selection_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array4::from_shape_fn((1, 2, 7, 7), |_| rng.random_range(-1.0..1.0));
        let cfg = DwmConfig {
            window_sizes: vec![(2, 2), (3, 3)],
            top_p: 3,
            suppress_overlap: 0.5,
        };
        let base = select_windows(&map_of(data.clone()), &cfg, (56, 56)).unwrap();
        let shifted = select_windows(&map_of(data + 10.0), &cfg, (56, 56)).unwrap();
        for (a, b) in base.iter().zip(shifted.iter()) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.window, b.window);
        }
    }

    #[test]
    fn crop_rect_contains_mapped_argmax_for_half_size_windows() {
        // For windows of about half the map side the center formula
        // coincides with the geometric window center, so the crop is
        // guaranteed to contain the peak feature cell.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let mut data = Array4::from_shape_fn((1, 1, 9, 9), |_| rng.random_range(0.0..0.5));
            let peak = (rng.random_range(0..9), rng.random_range(0..9));
            data[(0, 0, peak.0, peak.1)] = 10.0;
            let cfg = DwmConfig {
                window_sizes: vec![(5, 5)],
                top_p: 1,
                suppress_overlap: 0.5,
            };
            let sels = select_windows(&map_of(data), &cfg, (72, 72)).unwrap();
            let (r0, c0, h, w) = sels[0].crop_rect;
            let py = (peak.0 as f64 + 0.5) * 72.0 / 9.0;
            let px = (peak.1 as f64 + 0.5) * 72.0 / 9.0;
            assert!(
                py >= r0 as f64 && py <= (r0 + h) as f64 && px >= c0 as f64 && px <= (c0 + w) as f64,
                "peak {peak:?} -> ({py},{px}) outside crop {:?}",
                sels[0].crop_rect
            );
        }
    }

    #[test]
    fn crop_rect_always_contains_formula_center_after_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let data = Array4::from_shape_fn((1, 2, 8, 8), |_| rng.random_range(-1.0..1.0));
            let cfg = DwmConfig {
                window_sizes: vec![(3, 3), (4, 4)],
                top_p: 3,
                suppress_overlap: 0.5,
            };
            for sel in select_windows(&map_of(data.clone()), &cfg, (64, 64)).unwrap() {
                let (r0, c0, h, w) = sel.crop_rect;
                let py = (sel.center.0 * 64.0).min(63.0);
                let px = (sel.center.1 * 64.0).min(63.0);
                assert!(py >= r0 as f64 - 0.5 && py <= (r0 + h) as f64 + 0.5);
                assert!(px >= c0 as f64 - 0.5 && px <= (c0 + w) as f64 + 0.5);
            }
        }
    }

    fn patch_backbone() -> (Backbone, ParamStore) {
        let cfg = BackboneConfig {
            stage_channels: [4, 4, 8, 8],
            embed_dim: 6,
            gn_groups: 2,
            attention: AttentionKind::None,
            ..BackboneConfig::tiny()
        };
        let bb = Backbone::new(cfg, "dyn").unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        bb.init_params(&mut store, &mut rng);
        (bb, store)
    }

    fn sample_image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(-1.0..1.0))
    }

    fn selection_at(rect: (usize, usize, usize, usize), score: f64) -> WindowSelection {
        WindowSelection {
            window: (2, 2),
            index: (0, 0),
            center: (0.5, 0.5),
            crop_rect: rect,
            score,
        }
    }

    #[test]
    fn single_patch_equals_encode_then_embed() {
        let (bb, store) = patch_backbone();
        let img = sample_image(6);
        let sel = selection_at((10, 12, 30, 30), 1.0);
        let e = aggregate_patches(&img.view(), &[sel.clone()], &bb, &store, None, 32).unwrap();

        let crop = crop_resized(&img.view(), sel.crop_rect, 32).unwrap();
        let f = bb
            .encode(
                &crop.insert_axis(ndarray::Axis(0)),
                &store,
                None,
                Provenance::Patch,
            )
            .unwrap();
        let expect = bb.embed(&f, &store, BranchTag::Dynamic).unwrap();
        for (a, b) in e.data.iter().zip(expect.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_selection_doubles_pooled_vector() {
        let (bb, store) = patch_backbone();
        let img = sample_image(7);
        let sel = selection_at((0, 0, 40, 40), 1.0);
        let one = aggregate_patches(&img.view(), &[sel.clone()], &bb, &store, None, 32).unwrap();
        let two =
            aggregate_patches(&img.view(), &[sel.clone(), sel], &bb, &store, None, 32).unwrap();
        // embedding is affine in the pooled vector: e2 - b = 2 (e1 - b)
        let bias = store.get("dyn.embed.b");
        for d in 0..6 {
            let b = bias[[d]];
            let expect = 2.0 * (one.data[(0, d)] - b) + b;
            assert!((two.data[(0, d)] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_patch_aggregation_matches_sequential_oracle() {
        let (bb, store) = patch_backbone();
        let img = sample_image(8);
        let sels = vec![
            selection_at((0, 0, 32, 32), 3.0),
            selection_at((20, 25, 35, 30), 2.0),
            selection_at((5, 30, 28, 34), 1.0),
        ];
        let got = aggregate_patches(&img.view(), &sels, &bb, &store, None, 32).unwrap();

        // explicit loop: encode each patch, sum maps, pool, affine
        let mut summed: Option<Array4<f64>> = None;
        for sel in &sels {
            let crop = crop_resized(&img.view(), sel.crop_rect, 32).unwrap();
            let f = bb
                .encode(
                    &crop.insert_axis(ndarray::Axis(0)),
                    &store,
                    None,
                    Provenance::Patch,
                )
                .unwrap();
            summed = Some(match summed {
                None => f.data,
                Some(acc) => acc + &f.data,
            });
        }
        let summed = summed.unwrap();
        let (_, c, h, w) = summed.dim();
        let mut pooled = Array2::<f64>::zeros((1, c));
        for ci in 0..c {
            pooled[(0, ci)] = summed.slice(s![0, ci, .., ..]).sum() / (h * w) as f64;
        }
        let wm = store.get("dyn.embed.w").clone().into_dimensionality::<Ix2>().unwrap();
        let bias = store.get("dyn.embed.b");
        let expect = pooled.dot(&wm);
        for d in 0..6 {
            let e = expect[(0, d)] + bias[[d]];
            assert!((got.data[(0, d)] - e).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_selection_list_is_degenerate() {
        let (bb, store) = patch_backbone();
        let img = sample_image(9);
        assert!(matches!(
            aggregate_patches(&img.view(), &[], &bb, &store, None, 32),
            Err(Error::DegenerateCrop(_))
        ));
    }

    #[test]
    fn window_sizes_from_fracs_dedupes() {
        assert_eq!(window_sizes_from_fracs(4, 4, &[0.375, 0.5]), vec![(2, 2)]);
        assert_eq!(
            window_sizes_from_fracs(16, 16, &[0.375, 0.5]),
            vec![(6, 6), (8, 8)]
        );
    }
}
