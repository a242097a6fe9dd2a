//! Residual convolutional encoder shared by all branches.
//!
//! Stem: 7x7 stride-2 convolution, group norm, rectifier, 3x3 stride-2 max
//! pool. Four stages follow (stage 1 stride 1, stages 2-4 stride 2), so the
//! final map is input/32 along each spatial axis. The deep variant uses
//! bottleneck blocks with the canonical (3, 8, 36, 3) block counts; the tiny
//! variant uses basic blocks and exists because the full-depth network is
//! not trainable at desk scale. Attention modules are inserted after each
//! configured stage.

use crate::attention::{apply_attention_vars, init_attention_params, AttentionKind};
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamStore, Tape, Var};
use ndarray::{Array2, Array4, Ix2, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Deep152,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Global,
    Roi,
    Patch,
    Cbam,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTag {
    Global,
    Roi,
    Dynamic,
    Fused,
    Prior,
}

/// Batched activation map (B, C, H', W') with finite entries.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array4<f64>,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(data: Array4<f64>, provenance: Provenance) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("feature map contains non-finite values".into()));
        }
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::ShapeError("feature map has a zero dimension".into()));
        }
        Ok(FeatureMap { data, provenance })
    }
}

/// Per-sample feature vector (B, d).
#[derive(Debug, Clone)]
pub struct Embedding {
    pub data: Array2<f64>,
    pub branch: BranchTag,
}

impl Embedding {
    pub fn new(data: Array2<f64>, branch: BranchTag) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("embedding contains non-finite values".into()));
        }
        Ok(Embedding { data, branch })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub embed_dim: usize,
    pub attention: AttentionKind,
    pub attention_stages: Vec<usize>,
    pub gn_groups: usize,
    pub init_gain: f64,
    /// Prior-embedding dimension consumed by knowledge-enhanced attention.
    pub d_rf: usize,
    /// Bottleneck reduction ratio shared by attention sites.
    pub reduction: usize,
}

impl BackboneConfig {
    /// Full-scale configuration mirroring the deep residual network used at
    /// training scale.
    pub fn deep152() -> Self {
        BackboneConfig {
            variant: Variant::Deep152,
            stage_channels: [256, 512, 1024, 2048],
            stage_blocks: [3, 8, 36, 3],
            embed_dim: 512,
            attention: AttentionKind::KeCbam,
            attention_stages: vec![2, 3, 4],
            gn_groups: 32,
            init_gain: 0.02,
            d_rf: 1024,
            reduction: 16,
        }
    }

    /// Desk-scale configuration used by tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        BackboneConfig {
            variant: Variant::Tiny,
            stage_channels: [8, 16, 32, 64],
            stage_blocks: [1, 1, 1, 1],
            embed_dim: 32,
            attention: AttentionKind::KeCbam,
            attention_stages: vec![2, 3, 4],
            gn_groups: 4,
            init_gain: 0.02,
            d_rf: 64,
            reduction: 4,
        }
    }

    fn inner_channels(&self, stage: usize) -> usize {
        match self.variant {
            Variant::Tiny => self.stage_channels[stage],
            Variant::Deep152 => (self.stage_channels[stage] / 4).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::Deep152 => {
                if self.stage_blocks != [3, 8, 36, 3] {
                    return Err(Error::Config(format!(
                        "deep152 requires stage_blocks (3, 8, 36, 3), got {:?}",
                        self.stage_blocks
                    )));
                }
            }
            Variant::Tiny => {
                if self.stage_blocks.iter().any(|&b| b == 0 || b > 2) {
                    return Err(Error::Config(format!(
                        "tiny stage_blocks must each lie in 1..=2, got {:?}",
                        self.stage_blocks
                    )));
                }
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be > 0".into()));
        }
        if self.attention_stages.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err(Error::Config(format!(
                "attention_stages must be a subset of {{1,2,3,4}}, got {:?}",
                self.attention_stages
            )));
        }
        for si in 0..4 {
            let c = self.stage_channels[si];
            let inner = self.inner_channels(si);
            if c == 0 || c % self.gn_groups != 0 || inner % self.gn_groups != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {c} (inner {inner}) must be divisible by gn_groups {}",
                    si + 1,
                    self.gn_groups
                )));
            }
            if self.attention != AttentionKind::None
                && self.attention_stages.contains(&(si + 1))
                && (c % self.reduction != 0 || c / self.reduction == 0)
            {
                return Err(Error::Config(format!(
                    "stage {} channels {c} must be divisible by reduction {}",
                    si + 1,
                    self.reduction
                )));
            }
        }
        Ok(())
    }

    /// Spatial extent after the stem and the four stages.
    pub fn out_spatial(&self, input: usize) -> usize {
        let mut s = input;
        for _ in 0..5 {
            s = s.div_ceil(2);
        }
        s
    }
}

const GN_EPS: f64 = 1e-5;

/// One branch's encoder; `scope` prefixes every parameter name.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub scope: String,
}

struct BlockPlan {
    scope: String,
    in_c: usize,
    out_c: usize,
    inner_c: usize,
    stride: usize,
    projection: bool,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, scope: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone {
            cfg,
            scope: scope.into(),
        })
    }

    fn blocks(&self) -> Vec<BlockPlan> {
        let mut plans = Vec::new();
        let mut in_c = self.cfg.stage_channels[0];
        for si in 0..4 {
            let out_c = self.cfg.stage_channels[si];
            for bi in 0..self.cfg.stage_blocks[si] {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                plans.push(BlockPlan {
                    scope: format!("{}.stage{}.block{}", self.scope, si + 1, bi),
                    in_c,
                    out_c,
                    inner_c: self.cfg.inner_channels(si),
                    stride,
                    projection: stride != 1 || in_c != out_c,
                });
                in_c = out_c;
            }
        }
        plans
    }

    /// Registers all encoder parameters (stem, blocks, attention sites, and
    /// the pooled embedding head).
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let gain = self.cfg.init_gain;
        let c0 = self.cfg.stage_channels[0];
        store.insert_conv(format!("{}.stem.conv.w", self.scope), c0, 3, 7, gain, rng);
        store.insert_zeros(format!("{}.stem.conv.b", self.scope), &[c0]);
        store.insert_ones(format!("{}.stem.gn.gamma", self.scope), &[c0]);
        store.insert_zeros(format!("{}.stem.gn.beta", self.scope), &[c0]);

        for plan in self.blocks() {
            let s = &plan.scope;
            let convs: Vec<(usize, usize, usize)> = match self.cfg.variant {
                Variant::Tiny => vec![
                    (plan.in_c, plan.out_c, 3),
                    (plan.out_c, plan.out_c, 3),
                ],
                Variant::Deep152 => vec![
                    (plan.in_c, plan.inner_c, 1),
                    (plan.inner_c, plan.inner_c, 3),
                    (plan.inner_c, plan.out_c, 1),
                ],
            };
            for (i, (ci, co, k)) in convs.iter().enumerate() {
                store.insert_conv(format!("{s}.conv{}.w", i + 1), *co, *ci, *k, gain, rng);
                store.insert_zeros(format!("{s}.conv{}.b", i + 1), &[*co]);
                store.insert_ones(format!("{s}.gn{}.gamma", i + 1), &[*co]);
                store.insert_zeros(format!("{s}.gn{}.beta", i + 1), &[*co]);
            }
            if plan.projection {
                store.insert_conv(format!("{s}.short.w"), plan.out_c, plan.in_c, 1, gain, rng);
                store.insert_zeros(format!("{s}.short.b"), &[plan.out_c]);
                store.insert_ones(format!("{s}.short.gn.gamma"), &[plan.out_c]);
                store.insert_zeros(format!("{s}.short.gn.beta"), &[plan.out_c]);
            }
        }

        for si in 1..=4usize {
            if self.cfg.attention_stages.contains(&si) {
                init_attention_params(
                    store,
                    rng,
                    &format!("{}.stage{}.attn", self.scope, si),
                    self.cfg.attention,
                    self.cfg.stage_channels[si - 1],
                    self.cfg.d_rf,
                    self.cfg.reduction,
                    gain,
                );
            }
        }

        let c4 = self.cfg.stage_channels[3];
        store.insert_linear(
            format!("{}.embed.w", self.scope),
            c4,
            self.cfg.embed_dim,
            gain,
            rng,
        );
        store.insert_zeros(format!("{}.embed.b", self.scope), &[self.cfg.embed_dim]);
    }

    fn conv_gn(
        &self,
        binder: &Binder,
        scope: &str,
        conv: &str,
        gn: &str,
        x: &Var,
        stride: usize,
        pad: usize,
    ) -> Var {
        let y = x.conv2d(
            &binder.var(&format!("{scope}.{conv}.w")),
            &binder.var(&format!("{scope}.{conv}.b")),
            stride,
            pad,
        );
        y.group_norm(
            &binder.var(&format!("{scope}.{gn}.gamma")),
            &binder.var(&format!("{scope}.{gn}.beta")),
            self.cfg.gn_groups,
            GN_EPS,
        )
    }

    fn block_forward(&self, binder: &Binder, plan: &BlockPlan, x: &Var) -> Var {
        let s = &plan.scope;
        let main = match self.cfg.variant {
            Variant::Tiny => {
                let h = self
                    .conv_gn(binder, s, "conv1", "gn1", x, plan.stride, 1)
                    .relu();
                self.conv_gn(binder, s, "conv2", "gn2", &h, 1, 1)
            }
            Variant::Deep152 => {
                let h = self.conv_gn(binder, s, "conv1", "gn1", x, 1, 0).relu();
                let h = self
                    .conv_gn(binder, s, "conv2", "gn2", &h, plan.stride, 1)
                    .relu();
                self.conv_gn(binder, s, "conv3", "gn3", &h, 1, 0)
            }
        };
        let short = if plan.projection {
            let y = x.conv2d(
                &binder.var(&format!("{s}.short.w")),
                &binder.var(&format!("{s}.short.b")),
                plan.stride,
                0,
            );
            y.group_norm(
                &binder.var(&format!("{s}.short.gn.gamma")),
                &binder.var(&format!("{s}.short.gn.beta")),
                self.cfg.gn_groups,
                GN_EPS,
            )
        } else {
            x.clone()
        };
        main.add(&short).relu()
    }

    /// Stage outputs (post-attention) on an existing tape.
    pub fn encode_vars(
        &self,
        tape: &Tape,
        binder: &Binder,
        x: &Var,
        prior: Option<&Var>,
    ) -> Result<[Var; 4]> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeError(format!(
                "encoder input must be (B,3,H,W), got {shape:?}"
            )));
        }
        if shape[2] < 32 || shape[3] < 32 {
            return Err(Error::ShapeError(format!(
                "encoder input spatial dims must be >= 32, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let stem = self
            .conv_gn(binder, &format!("{}.stem", self.scope), "conv", "gn", x, 2, 3)
            .relu()
            .maxpool2d(3, 2, 1);

        let mut h = stem;
        let mut stages: Vec<Var> = Vec::with_capacity(4);
        let mut block_iter = self.blocks().into_iter();
        for si in 1..=4usize {
            for _ in 0..self.cfg.stage_blocks[si - 1] {
                let plan = block_iter.next().unwrap();
                h = self.block_forward(binder, &plan, &h);
            }
            if self.cfg.attention_stages.contains(&si) {
                h = apply_attention_vars(
                    tape,
                    binder,
                    &format!("{}.stage{}.attn", self.scope, si),
                    self.cfg.attention,
                    &h,
                    prior,
                )?;
            }
            stages.push(h.clone());
        }
        Ok(stages.try_into().map_err(|_| ()).unwrap())
    }

    /// Pooled affine head on an existing tape.
    pub fn embed_var(&self, binder: &Binder, f: &Var) -> Var {
        f.global_avg_pool()
            .matmul(&binder.var(&format!("{}.embed.w", self.scope)))
            .add_rowvec(&binder.var(&format!("{}.embed.b", self.scope)))
    }

    /// Array-level encode: runs the full stack and returns the final stage.
    pub fn encode(
        &self,
        x: &Array4<f64>,
        params: &ParamStore,
        prior: Option<&Array2<f64>>,
        provenance: Provenance,
    ) -> Result<FeatureMap> {
        Ok(self.encode_stages(x, params, prior, provenance)?.pop().unwrap())
    }

    /// Array-level encode keeping every stage output (stage 1..=4).
    pub fn encode_stages(
        &self,
        x: &Array4<f64>,
        params: &ParamStore,
        prior: Option<&Array2<f64>>,
        provenance: Provenance,
    ) -> Result<Vec<FeatureMap>> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&tape, params);
        let xv = tape.leaf(x.clone().into_dyn());
        let pv = prior.map(|p| tape.leaf(p.clone().into_dyn()));
        let stages = self.encode_vars(&tape, &binder, &xv, pv.as_ref())?;
        stages
            .iter()
            .map(|s| {
                FeatureMap::new(
                    s.to_array().into_dimensionality::<Ix4>().unwrap(),
                    provenance,
                )
            })
            .collect()
    }

    /// Array-level embed: global average pool then affine projection.
    pub fn embed(&self, f: &FeatureMap, params: &ParamStore, branch: BranchTag) -> Result<Embedding> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&tape, params);
        let fv = tape.leaf(f.data.clone().into_dyn());
        let e = self.embed_var(&binder, &fv);
        Embedding::new(e.to_array().into_dimensionality::<Ix2>().unwrap(), branch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            attention: AttentionKind::None,
            ..BackboneConfig::tiny()
        }
    }

    fn init(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamStore) {
        let bb = Backbone::new(cfg.clone(), "net").unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bb.init_params(&mut store, &mut rng);
        (bb, store)
    }

    #[test]
    fn tiny_encode_output_shape_follows_stride_schedule() {
        let cfg = BackboneConfig {
            stage_channels: [16, 32, 64, 128],
            ..tiny_cfg()
        };
        let (bb, store) = init(&cfg, 1);
        let x = Array4::<f64>::zeros((1, 3, 64, 64));
        let f = bb.encode(&x, &store, None, Provenance::Global).unwrap();
        assert_eq!(f.data.dim(), (1, 128, 2, 2));
    }

    #[test]
    fn deep152_shape_at_full_input_resolution() {
        // canonical (3,8,36,3) block layout with slim channels; 299 -> 10
        let cfg = BackboneConfig {
            stage_channels: [8, 16, 16, 32],
            gn_groups: 2,
            embed_dim: 8,
            ..BackboneConfig::deep152()
        };
        let cfg = BackboneConfig {
            attention: AttentionKind::None,
            ..cfg
        };
        let (bb, store) = init(&cfg, 2);
        let x = Array4::<f64>::zeros((1, 3, 299, 299));
        let f = bb.encode(&x, &store, None, Provenance::Global).unwrap();
        assert_eq!(f.data.dim(), (1, 32, 10, 10));
        assert_eq!(cfg.out_spatial(299), 10);
    }

    #[test]
    fn stride_schedule_matches_ceil_chain_for_many_sizes() {
        let cfg = tiny_cfg();
        for input in [32usize, 37, 64, 65, 96, 128] {
            let mut expect = input;
            for _ in 0..5 {
                expect = expect.div_ceil(2);
            }
            assert_eq!(cfg.out_spatial(input), expect, "input {input}");
        }
        let (bb, store) = init(&cfg, 3);
        let x = Array4::<f64>::zeros((1, 3, 37, 41));
        let f = bb.encode(&x, &store, None, Provenance::Global).unwrap();
        assert_eq!(f.data.dim().2, cfg.out_spatial(37));
        assert_eq!(f.data.dim().3, cfg.out_spatial(41));
    }

    #[test]
    fn zero_input_with_zero_final_scale_encodes_to_zeros() {
        let cfg = tiny_cfg();
        let (bb, mut store) = init(&cfg, 4);
        store.get_mut("net.stage4.block0.gn2.gamma").fill(0.0);
        let x = Array4::<f64>::zeros((2, 3, 32, 32));
        let f = bb.encode(&x, &store, None, Provenance::Global).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let (bb, store) = init(&tiny_cfg(), 5);
        let x = Array4::<f64>::zeros((1, 4, 64, 64));
        assert!(matches!(
            bb.encode(&x, &store, None, Provenance::Global),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn embed_identity_head_returns_channel_means() {
        let cfg = BackboneConfig {
            stage_channels: [8, 16, 32, 2],
            gn_groups: 2,
            embed_dim: 2,
            ..tiny_cfg()
        };
        let (bb, mut store) = init(&cfg, 6);
        {
            let w = store.get_mut("net.embed.w");
            w.fill(0.0);
            let mut w2 = w.view_mut().into_dimensionality::<Ix2>().unwrap();
            w2[(0, 0)] = 1.0;
            w2[(1, 1)] = 1.0;
        }
        let mut data = Array4::<f64>::zeros((1, 2, 2, 2));
        data.slice_mut(ndarray::s![0, 0, .., ..]).fill(1.0);
        data
            .slice_mut(ndarray::s![0, 1, .., ..])
            .assign(&ndarray::arr2(&[[2.0, 4.0], [2.0, 4.0]]));
        let f = FeatureMap::new(data, Provenance::Global).unwrap();
        let e = bb.embed(&f, &store, BranchTag::Global).unwrap();
        assert_eq!(e.data[(0, 0)], 1.0);
        assert_eq!(e.data[(0, 1)], 3.0);
    }

    #[test]
    fn embed_matches_loop_oracle_on_random_map() {
        let cfg = BackboneConfig {
            embed_dim: 5,
            ..tiny_cfg()
        };
        let (bb, store) = init(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Array4::from_shape_fn((2, 64, 3, 3), |_| rng.random_range(-1.0..1.0));
        let f = FeatureMap::new(data.clone(), Provenance::Global).unwrap();
        let e = bb.embed(&f, &store, BranchTag::Global).unwrap();

        let w = store.get("net.embed.w");
        let b = store.get("net.embed.b");
        for bi in 0..2 {
            for d in 0..5 {
                let mut acc = b[[d]];
                for c in 0..64 {
                    let mut mean = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            mean += data[(bi, c, i, j)];
                        }
                    }
                    mean /= 9.0;
                    acc += mean * w[[c, d]];
                }
                assert!((e.data[(bi, d)] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embed_invariant_to_spatial_shuffle() {
        let cfg = tiny_cfg();
        let (bb, store) = init(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = Array4::from_shape_fn((1, 64, 2, 2), |_| rng.random_range(-1.0..1.0));
        let mut shuffled = data.clone();
        // rotate the 4 spatial sites
        for c in 0..64 {
            let vals = [
                data[(0, c, 0, 0)],
                data[(0, c, 0, 1)],
                data[(0, c, 1, 0)],
                data[(0, c, 1, 1)],
            ];
            shuffled[(0, c, 0, 0)] = vals[3];
            shuffled[(0, c, 0, 1)] = vals[0];
            shuffled[(0, c, 1, 0)] = vals[1];
            shuffled[(0, c, 1, 1)] = vals[2];
        }
        let e1 = bb
            .embed(&FeatureMap::new(data, Provenance::Global).unwrap(), &store, BranchTag::Global)
            .unwrap();
        let e2 = bb
            .embed(
                &FeatureMap::new(shuffled, Provenance::Global).unwrap(),
                &store,
                BranchTag::Global,
            )
            .unwrap();
        for (a, b) in e1.data.iter().zip(e2.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ke_cbam_backbone_needs_prior() {
        let cfg = BackboneConfig::tiny();
        let (bb, store) = init(&cfg, 11);
        let x = Array4::<f64>::zeros((1, 3, 32, 32));
        assert!(bb.encode(&x, &store, None, Provenance::Global).is_err());
        let prior = Array2::<f64>::zeros((1, cfg.d_rf));
        assert!(bb.encode(&x, &store, Some(&prior), Provenance::Global).is_ok());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // small encoder + embed head driven by a fixed contraction
        let cfg = BackboneConfig {
            stage_channels: [4, 4, 4, 4],
            embed_dim: 3,
            gn_groups: 2,
            reduction: 2,
            d_rf: 8,
            attention: AttentionKind::Cbam,
            attention_stages: vec![4],
            init_gain: 1.0,
            ..tiny_cfg()
        };
        let (bb, store) = init(&cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.random_range(-1.0..1.0));
        let loss_w = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));

        let run = |store: &ParamStore| -> f64 {
            let tape = Tape::no_grad();
            let binder = Binder::new(&tape, store);
            let xv = tape.leaf(x.clone().into_dyn());
            let stages = bb.encode_vars(&tape, &binder, &xv, None).unwrap();
            let e = bb.embed_var(&binder, &stages[3]);
            (&e.to_array() * &loss_w.clone().into_dyn()).sum()
        };

        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let xv = tape.leaf(x.clone().into_dyn());
        let stages = bb.encode_vars(&tape, &binder, &xv, None).unwrap();
        let loss = bb
            .embed_var(&binder, &stages[3])
            .weighted_sum(loss_w.clone().into_dyn());
        let grads = tape.backward(&loss);
        let by_name = binder.collect_grads(&grads);

        let eps = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut checked = 0;
        let mut ok = 0;
        for (name, ganalytic) in &by_name {
            for _ in 0..2 {
                let flat = rng.random_range(0..ganalytic.len());
                let mut plus = store.clone();
                plus.get_mut(name).as_slice_mut().unwrap()[flat] += eps;
                let mut minus = store.clone();
                minus.get_mut(name).as_slice_mut().unwrap()[flat] -= eps;
                let numeric = (run(&plus) - run(&minus)) / (2.0 * eps);
                let a = ganalytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                checked += 1;
                if (a - numeric).abs() / denom < 1e-2 {
                    ok += 1;
                }
            }
        }
        assert!(
            ok as f64 >= 0.95 * checked as f64,
            "only {ok}/{checked} gradient coordinates matched"
        );
    }
}
