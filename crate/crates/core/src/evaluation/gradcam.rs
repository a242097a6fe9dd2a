//! Class-activation saliency via positive-gradient alpha weighting.
//!
//! For a target class score S and a chosen stage activation A, per-location
//! weights are alpha = g^2 / (2 g^2 + sum_spatial(A g^3)) with g = dS/dA
//! (zero where the denominator vanishes). Channel weights sum alpha-scaled
//! rectified gradients; the heatmap is the rectified weighted activation
//! sum, min-max normalized and bilinearly upsampled to the input size.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::{Binder, Tape};
use crate::preprocess::bilinear_resize_chw;
use ndarray::{s, Array2, Array4, Ix4};

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// Input-sized heatmap in [0,1].
    pub heatmap: Array2<f64>,
    pub target_class: usize,
    pub layer_id: String,
}

/// Stage ids accepted by [`grad_cam_pp`]; all address the global branch.
pub const LAYER_IDS: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];

fn stage_index(layer_id: &str) -> Result<usize> {
    LAYER_IDS
        .iter()
        .position(|&l| l == layer_id)
        .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))
}

/// Last attention-modulated stage of the global branch, or stage4 when no
/// attention is configured.
pub fn default_layer(net: &Network) -> String {
    use crate::attention::AttentionKind;
    let stage = if net.cfg.attention.global == AttentionKind::None {
        4
    } else {
        net.cfg
            .backbone
            .attention_stages
            .iter()
            .copied()
            .max()
            .unwrap_or(4)
    };
    format!("stage{stage}")
}

pub fn grad_cam_pp(
    net: &Network,
    x_global: &Array4<f64>,
    x_roi: &Array4<f64>,
    priors: Option<&Array2<f64>>,
    target_class: usize,
    layer_id: &str,
) -> Result<SaliencyMap> {
    let stage = stage_index(layer_id)?;
    if x_global.dim().0 != 1 {
        return Err(Error::BatchMismatch(
            "saliency expects a single-sample batch".into(),
        ));
    }
    if target_class >= net.cfg.num_classes() {
        return Err(Error::DegenerateLabels(format!(
            "target class {target_class} outside 0..{}",
            net.cfg.num_classes()
        )));
    }

    let tape = Tape::new();
    let binder = Binder::new(&tape, &net.params);
    let fv = net.forward_vars(&tape, &binder, x_global, x_roi, priors)?;
    let score = fv.logits.select_logit_sum(target_class);
    let grads = tape.backward(&score);

    let activation = fv.global_stages[stage]
        .to_array()
        .into_dimensionality::<Ix4>()
        .unwrap();
    let grad = match grads.grad(&fv.global_stages[stage]) {
        Some(g) => g.clone().into_dimensionality::<Ix4>().unwrap(),
        None => Array4::zeros(activation.raw_dim()),
    };

    let (_, c, h, w) = activation.dim();
    let mut heat = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        let a = activation.slice(s![0, ci, .., ..]);
        let g = grad.slice(s![0, ci, .., ..]);
        let sum_ag3: f64 = a
            .iter()
            .zip(g.iter())
            .map(|(&av, &gv)| av * gv * gv * gv)
            .sum();
        let mut weight = 0.0;
        for i in 0..h {
            for j in 0..w {
                let gv = g[(i, j)];
                let denom = 2.0 * gv * gv + sum_ag3;
                let alpha = if denom.abs() < 1e-300 {
                    0.0
                } else {
                    gv * gv / denom
                };
                weight += alpha * gv.max(0.0);
            }
        }
        for i in 0..h {
            for j in 0..w {
                heat[(i, j)] += weight * a[(i, j)];
            }
        }
    }
    heat.mapv_inplace(|v| v.max(0.0));

    let max = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = heat.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min > 1e-12 {
        heat.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        heat.fill(0.0);
    }

    let up = bilinear_resize_chw(
        &heat.insert_axis(ndarray::Axis(0)),
        x_global.dim().2,
        x_global.dim().3,
    );
    let heatmap: Array2<f64> = up.index_axis_move(ndarray::Axis(0), 0);
    if heatmap.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { step: 0, value: f64::NAN });
    }
    Ok(SaliencyMap {
        heatmap,
        target_class,
        layer_id: layer_id.to_string(),
    })
}
