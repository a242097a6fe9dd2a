//! Channel-spatial attention (CBAM) and its knowledge-enhanced extension.
//!
//! CBAM gates a feature map sequentially: channel weights from avg+max
//! pooled descriptors through a shared bottleneck MLP, then spatial weights
//! from channel-wise avg/max maps through a 7x7 convolution. The
//! knowledge-enhanced variant projects a retinal-prior embedding to
//! per-channel weights, broadcasts them spatially, concatenates with the
//! CBAM output, and fuses through a two-layer convolution (1x1 reduce with
//! rectifier, 7x7 to a single sigmoid gate) that rescales the CBAM output.

pub mod prior;

use crate::backbone::{Embedding, FeatureMap, Provenance};
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamStore, Tape, Var};
use ndarray::{Array2, Array4, Ix2, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Cbam,
    KeCbam,
}

/// Bottleneck projection of a prior embedding into per-channel weights:
/// sigmoid(relu(f_rf . w1) . w2).
#[derive(Debug, Clone)]
pub struct KnowledgeProjection {
    pub w1: Array2<f64>, // d_rf x C_r
    pub w2: Array2<f64>, // C_r x C
    pub r: usize,
}

impl KnowledgeProjection {
    pub fn validate(&self) -> Result<()> {
        let c_r = self.w1.dim().1;
        let c = self.w2.dim().1;
        if self.w2.dim().0 != c_r {
            return Err(Error::DimMismatch(format!(
                "w1 columns {} != w2 rows {}",
                c_r,
                self.w2.dim().0
            )));
        }
        if c_r == 0 || c % self.r != 0 || c / self.r != c_r {
            return Err(Error::DimMismatch(format!(
                "C_r must equal C/r with C divisible by r (C={c}, r={}, C_r={c_r})",
                self.r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// B x C channel gates in (0,1).
    pub channel_weights: Array2<f64>,
    /// B x 1 x H x W spatial gates in (0,1).
    pub spatial_weights: Array4<f64>,
    /// B x C knowledge gates in (0,1); knowledge-enhanced mode only.
    pub knowledge_weights: Option<Array2<f64>>,
    /// B x 1 x H x W fused gate in (0,1); knowledge-enhanced mode only.
    pub fused: Option<Array4<f64>>,
}

// ---------------------------------------------------------------------------
// parameters

/// Registers the parameters of one attention site under `scope`.
pub fn init_attention_params(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    scope: &str,
    kind: AttentionKind,
    channels: usize,
    d_rf: usize,
    reduction: usize,
    gain: f64,
) {
    if kind == AttentionKind::None {
        return;
    }
    assert!(
        channels % reduction == 0 && channels / reduction >= 1,
        "channels {channels} not divisible by reduction {reduction}"
    );
    let c_r = channels / reduction;
    store.insert_linear(format!("{scope}.mlp.w1"), channels, c_r, gain, rng);
    store.insert_zeros(format!("{scope}.mlp.b1"), &[c_r]);
    store.insert_linear(format!("{scope}.mlp.w2"), c_r, channels, gain, rng);
    store.insert_zeros(format!("{scope}.mlp.b2"), &[channels]);
    store.insert_conv(format!("{scope}.spatial.w"), 1, 2, 7, gain, rng);
    store.insert_zeros(format!("{scope}.spatial.b"), &[1]);
    if kind == AttentionKind::KeCbam {
        store.insert_linear(format!("{scope}.ke.w1"), d_rf, c_r, gain, rng);
        store.insert_linear(format!("{scope}.ke.w2"), c_r, channels, gain, rng);
        store.insert_conv(format!("{scope}.fuse1.w"), c_r, 2 * channels, 1, gain, rng);
        store.insert_zeros(format!("{scope}.fuse1.b"), &[c_r]);
        store.insert_conv(format!("{scope}.fuse2.w"), 1, c_r, 7, gain, rng);
        store.insert_zeros(format!("{scope}.fuse2.b"), &[1]);
    }
}

// ---------------------------------------------------------------------------
// tape-level forward

pub struct CbamVars {
    pub out: Var,
    pub channel: Var,
    pub spatial: Var,
}

pub struct KeCbamVars {
    pub out: Var,
    pub channel: Var,
    pub spatial: Var,
    pub knowledge: Var,
    pub fused: Var,
}

fn shared_mlp(binder: &Binder, scope: &str, v: &Var) -> Var {
    v.matmul(&binder.var(&format!("{scope}.mlp.w1")))
        .add_rowvec(&binder.var(&format!("{scope}.mlp.b1")))
        .relu()
        .matmul(&binder.var(&format!("{scope}.mlp.w2")))
        .add_rowvec(&binder.var(&format!("{scope}.mlp.b2")))
}

pub fn cbam_vars(binder: &Binder, scope: &str, f: &Var) -> CbamVars {
    let avg = f.global_avg_pool();
    let max = f.global_max_pool();
    let channel = shared_mlp(binder, scope, &avg)
        .add(&shared_mlp(binder, scope, &max))
        .sigmoid();
    let f1 = f.scale_channels(&channel);
    let pooled = f1.channel_mean().concat_axis1(&f1.channel_max());
    let spatial = pooled
        .conv2d(
            &binder.var(&format!("{scope}.spatial.w")),
            &binder.var(&format!("{scope}.spatial.b")),
            1,
            3,
        )
        .sigmoid();
    let out = f1.scale_spatial(&spatial);
    CbamVars {
        out,
        channel,
        spatial,
    }
}

pub fn knowledge_weights_vars(binder: &Binder, scope: &str, f_rf: &Var) -> Var {
    f_rf.matmul(&binder.var(&format!("{scope}.ke.w1")))
        .relu()
        .matmul(&binder.var(&format!("{scope}.ke.w2")))
        .sigmoid()
}

pub fn ke_cbam_vars(tape: &Tape, binder: &Binder, scope: &str, f: &Var, f_rf: &Var) -> KeCbamVars {
    let cbam = cbam_vars(binder, scope, f);
    let knowledge = knowledge_weights_vars(binder, scope, f_rf);
    let shape = cbam.out.shape();
    let ones = tape.leaf(crate::nn::Arr::ones(ndarray::IxDyn(&shape)));
    let g_exp = ones.scale_channels(&knowledge);
    let cat = cbam.out.concat_axis1(&g_exp);
    let h = cat
        .conv2d(
            &binder.var(&format!("{scope}.fuse1.w")),
            &binder.var(&format!("{scope}.fuse1.b")),
            1,
            0,
        )
        .relu();
    let fused = h
        .conv2d(
            &binder.var(&format!("{scope}.fuse2.w")),
            &binder.var(&format!("{scope}.fuse2.b")),
            1,
            3,
        )
        .sigmoid();
    let out = cbam.out.scale_spatial(&fused);
    KeCbamVars {
        out,
        channel: cbam.channel,
        spatial: cbam.spatial,
        knowledge,
        fused,
    }
}

/// Attention stage hook used inside the backbone.
pub fn apply_attention_vars(
    tape: &Tape,
    binder: &Binder,
    scope: &str,
    kind: AttentionKind,
    f: &Var,
    prior: Option<&Var>,
) -> Result<Var> {
    match kind {
        AttentionKind::None => Ok(f.clone()),
        AttentionKind::Cbam => Ok(cbam_vars(binder, scope, f).out),
        AttentionKind::KeCbam => {
            let prior = prior.ok_or_else(|| {
                Error::DimMismatch("knowledge-enhanced attention requires a prior embedding".into())
            })?;
            Ok(ke_cbam_vars(tape, binder, scope, f, prior).out)
        }
    }
}

// ---------------------------------------------------------------------------
// array-level wrappers

fn check_batch(f: &FeatureMap, b: usize, what: &str) -> Result<()> {
    if f.data.dim().0 != b {
        return Err(Error::BatchMismatch(format!(
            "{what}: feature batch {} != {b}",
            f.data.dim().0
        )));
    }
    Ok(())
}

/// Sequential channel-then-spatial gating; returns the gated map and both
/// attention maps.
pub fn cbam(f: &FeatureMap, params: &ParamStore, scope: &str) -> Result<(FeatureMap, AttentionMaps)> {
    let tape = Tape::no_grad();
    let binder = Binder::new(&tape, params);
    let fv = tape.leaf(f.data.clone().into_dyn());
    let vars = cbam_vars(&binder, scope, &fv);
    let out = FeatureMap::new(
        vars.out.to_array().into_dimensionality::<Ix4>().unwrap(),
        Provenance::Cbam,
    )?;
    Ok((
        out,
        AttentionMaps {
            channel_weights: vars.channel.to_array().into_dimensionality::<Ix2>().unwrap(),
            spatial_weights: vars.spatial.to_array().into_dimensionality::<Ix4>().unwrap(),
            knowledge_weights: None,
            fused: None,
        },
    ))
}

/// sigmoid(w2 . relu(w1 . f_rf)) per batch row.
pub fn knowledge_weights(f_rf: &Embedding, proj: &KnowledgeProjection) -> Result<Array2<f64>> {
    proj.validate()?;
    let d_rf = proj.w1.dim().0;
    if f_rf.data.dim().1 != d_rf {
        return Err(Error::DimMismatch(format!(
            "prior embedding dim {} != projection d_rf {d_rf}",
            f_rf.data.dim().1
        )));
    }
    let h = f_rf.data.dot(&proj.w1).mapv(|v| v.max(0.0));
    Ok(h.dot(&proj.w2).mapv(|v| 1.0 / (1.0 + (-v).exp())))
}

/// Full knowledge-enhanced attention on arrays; `scope` selects the
/// parameter namespace of one attention site.
pub fn ke_cbam(
    f: &FeatureMap,
    f_rf: &Embedding,
    params: &ParamStore,
    scope: &str,
) -> Result<(FeatureMap, AttentionMaps)> {
    check_batch(f, f_rf.data.dim().0, "ke_cbam")?;
    let tape = Tape::no_grad();
    let binder = Binder::new(&tape, params);
    let fv = tape.leaf(f.data.clone().into_dyn());
    let pv = tape.leaf(f_rf.data.clone().into_dyn());
    let vars = ke_cbam_vars(&tape, &binder, scope, &fv, &pv);
    let out = FeatureMap::new(
        vars.out.to_array().into_dimensionality::<Ix4>().unwrap(),
        Provenance::Fused,
    )?;
    Ok((
        out,
        AttentionMaps {
            channel_weights: vars.channel.to_array().into_dimensionality::<Ix2>().unwrap(),
            spatial_weights: vars.spatial.to_array().into_dimensionality::<Ix4>().unwrap(),
            knowledge_weights: Some(
                vars.knowledge.to_array().into_dimensionality::<Ix2>().unwrap(),
            ),
            fused: Some(vars.fused.to_array().into_dimensionality::<Ix4>().unwrap()),
        },
    ))
}
