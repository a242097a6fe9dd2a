//! Tri-branch network assembly: global context, ROI structure, and dynamic
//! window branches feed one fused classifier.
//!
//! Each branch is an independent instance of the shared encoder
//! architecture. The dynamic branch scores the global branch's stage-3
//! feature map, selects top windows, crops them from the preprocessed global
//! image, and aggregates patch encodings. Embeddings concatenate to
//! `f_final = [f_g || f_r || f_d]`, and the classifier head emits softmax
//! probabilities over three classes or a binary referable decision.

use crate::attention::AttentionKind;
use crate::backbone::{Backbone, BackboneConfig, BranchTag, Embedding, FeatureMap, Provenance};
use crate::dwm::{
    aggregate_patches_vars, select_windows, window_sizes_from_fracs, DwmConfig, WindowSelection,
};
use crate::error::{Error, Result};
use crate::nn::ops::concat_batch;
use crate::nn::{softmax_rows, Binder, ParamStore, Tape, Var};
use ndarray::{s, Array2, Array4, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    TriClass,
    Binary,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BranchAttention {
    pub global: AttentionKind,
    pub roi: AttentionKind,
    pub dynamic: AttentionKind,
}

impl BranchAttention {
    pub fn uniform(kind: AttentionKind) -> Self {
        BranchAttention {
            global: kind,
            roi: kind,
            dynamic: kind,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DwmSettings {
    /// Window sides as fractions of the feature-map side.
    pub window_fracs: Vec<f64>,
    pub top_p: usize,
    pub suppress_overlap: f64,
    /// Which global-branch stage supplies the response map (1..=4).
    pub score_stage: usize,
}

impl Default for DwmSettings {
    fn default() -> Self {
        DwmSettings {
            window_fracs: vec![0.375, 0.5],
            top_p: 3,
            suppress_overlap: 0.5,
            score_stage: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: BranchAttention,
    pub dwm: DwmSettings,
    pub head_mode: HeadMode,
    pub use_roi_branch: bool,
    pub use_dynamic_branch: bool,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneConfig::tiny(),
            attention: BranchAttention::uniform(AttentionKind::KeCbam),
            dwm: DwmSettings::default(),
            head_mode: HeadMode::TriClass,
            use_roi_branch: true,
            use_dynamic_branch: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.head_mode {
            HeadMode::TriClass => 3,
            HeadMode::Binary => 2,
        }
    }

    pub fn f_final_dim(&self) -> usize {
        let branches =
            1 + usize::from(self.use_roi_branch) + usize::from(self.use_dynamic_branch);
        branches * self.backbone.embed_dim
    }

    pub fn needs_prior(&self) -> bool {
        let used = [
            Some(self.attention.global),
            self.use_roi_branch.then_some(self.attention.roi),
            self.use_dynamic_branch.then_some(self.attention.dynamic),
        ];
        used.into_iter()
            .flatten()
            .any(|k| k == AttentionKind::KeCbam)
    }

    fn branch_backbone_cfg(&self, kind: AttentionKind) -> BackboneConfig {
        BackboneConfig {
            attention: kind,
            ..self.backbone.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch_backbone_cfg(self.attention.global).validate()?;
        if self.use_roi_branch {
            self.branch_backbone_cfg(self.attention.roi).validate()?;
        }
        if self.use_dynamic_branch {
            self.branch_backbone_cfg(self.attention.dynamic).validate()?;
            if !(1..=4).contains(&self.dwm.score_stage) {
                return Err(Error::Config("dwm score_stage must lie in 1..=4".into()));
            }
            if self.dwm.top_p < 1 {
                return Err(Error::Config("dwm top_p must be >= 1".into()));
            }
            if self.dwm.window_fracs.is_empty()
                || self
                    .dwm
                    .window_fracs
                    .iter()
                    .any(|&f| !(0.0 < f && f <= 1.0))
            {
                return Err(Error::Config(
                    "dwm window_fracs must be non-empty fractions in (0,1]".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PredictionEmbeddings {
    pub f_g: Embedding,
    pub f_r: Option<Embedding>,
    pub f_d: Option<Embedding>,
    pub f_final: Embedding,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Row-stochastic class probabilities (B, K).
    pub probs: Array2<f64>,
    pub logits: Array2<f64>,
    pub embeddings: PredictionEmbeddings,
    /// Per-sample dynamic window selections (empty when the branch is off).
    pub selections: Vec<Vec<WindowSelection>>,
}

/// Merge tri-class probabilities into (non-referable, referable).
pub fn to_binary(tri_probs: &Array2<f64>) -> Array2<f64> {
    assert_eq!(tri_probs.dim().1, 3, "to_binary expects three columns");
    let b = tri_probs.dim().0;
    let mut out = Array2::<f64>::zeros((b, 2));
    for i in 0..b {
        out[(i, 0)] = tri_probs[(i, 0)];
        out[(i, 1)] = tri_probs[(i, 1)] + tri_probs[(i, 2)];
    }
    out
}

pub struct ForwardVars {
    pub logits: Var,
    pub f_g: Var,
    pub f_r: Option<Var>,
    pub f_d: Option<Var>,
    pub f_final: Var,
    pub global_stages: [Var; 4],
    pub selections: Vec<Vec<WindowSelection>>,
}

pub struct Network {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    global: Backbone,
    roi: Option<Backbone>,
    dynamic: Option<Backbone>,
}

impl Network {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Network> {
        cfg.validate()?;
        let global = Backbone::new(cfg.branch_backbone_cfg(cfg.attention.global), "global")?;
        let roi = cfg
            .use_roi_branch
            .then(|| Backbone::new(cfg.branch_backbone_cfg(cfg.attention.roi), "roi"))
            .transpose()?;
        let dynamic = cfg
            .use_dynamic_branch
            .then(|| Backbone::new(cfg.branch_backbone_cfg(cfg.attention.dynamic), "dynamic"))
            .transpose()?;

        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        global.init_params(&mut params, &mut rng);
        if let Some(bb) = &roi {
            bb.init_params(&mut params, &mut rng);
        }
        if let Some(bb) = &dynamic {
            bb.init_params(&mut params, &mut rng);
        }
        params.insert_linear(
            "classifier.w",
            cfg.f_final_dim(),
            cfg.num_classes(),
            cfg.backbone.init_gain,
            &mut rng,
        );
        params.insert_zeros("classifier.b", &[cfg.num_classes()]);

        Ok(Network {
            cfg,
            params,
            global,
            roi,
            dynamic,
        })
    }

    fn check_inputs(
        &self,
        x_global: &Array4<f64>,
        x_roi: &Array4<f64>,
        priors: Option<&Array2<f64>>,
    ) -> Result<()> {
        if self.cfg.use_roi_branch && x_global.dim().0 != x_roi.dim().0 {
            return Err(Error::BatchMismatch(format!(
                "global batch {} != roi batch {}",
                x_global.dim().0,
                x_roi.dim().0
            )));
        }
        if self.cfg.needs_prior() {
            let p = priors.ok_or_else(|| {
                Error::DimMismatch(
                    "knowledge-enhanced attention requires prior embeddings".into(),
                )
            })?;
            if p.dim().0 != x_global.dim().0 {
                return Err(Error::BatchMismatch(format!(
                    "prior batch {} != input batch {}",
                    p.dim().0,
                    x_global.dim().0
                )));
            }
            if p.dim().1 != self.cfg.backbone.d_rf {
                return Err(Error::DimMismatch(format!(
                    "prior dim {} != configured d_rf {}",
                    p.dim().1,
                    self.cfg.backbone.d_rf
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass on an existing tape. Window selection is hard:
    /// crops re-enter the tape as fresh leaves of the dynamic branch.
    pub fn forward_vars(
        &self,
        tape: &Tape,
        binder: &Binder,
        x_global: &Array4<f64>,
        x_roi: &Array4<f64>,
        priors: Option<&Array2<f64>>,
    ) -> Result<ForwardVars> {
        self.check_inputs(x_global, x_roi, priors)?;
        let batch = x_global.dim().0;
        let prior_var = priors.map(|p| tape.leaf(p.clone().into_dyn()));

        let xg = tape.leaf(x_global.clone().into_dyn());
        let global_stages = self
            .global
            .encode_vars(tape, binder, &xg, prior_var.as_ref())?;
        let f_g = self.global.embed_var(binder, &global_stages[3]);

        let f_r = if let Some(bb) = &self.roi {
            let xr = tape.leaf(x_roi.clone().into_dyn());
            let stages = bb.encode_vars(tape, binder, &xr, prior_var.as_ref())?;
            Some(bb.embed_var(binder, &stages[3]))
        } else {
            None
        };

        let mut selections: Vec<Vec<WindowSelection>> = vec![Vec::new(); batch];
        let f_d = if let Some(bb) = &self.dynamic {
            let score_src = global_stages[self.cfg.dwm.score_stage - 1].to_array();
            let score_src = score_src.into_dimensionality::<Ix4>().unwrap();
            let (_, _, fh, fw) = score_src.dim();
            let dwm_cfg = DwmConfig {
                window_sizes: window_sizes_from_fracs(fh, fw, &self.cfg.dwm.window_fracs),
                top_p: self.cfg.dwm.top_p,
                suppress_overlap: self.cfg.dwm.suppress_overlap,
            };
            let img_dims = (x_global.dim().2, x_global.dim().3);
            let mut per_sample = Vec::with_capacity(batch);
            for bi in 0..batch {
                let fmap = FeatureMap::new(
                    score_src
                        .slice(s![bi..bi + 1, .., .., ..])
                        .to_owned(),
                    Provenance::Global,
                )?;
                let sels = select_windows(&fmap, &dwm_cfg, img_dims)?;
                let sample = x_global.slice(s![bi, .., .., ..]);
                let prior_row = priors.map(|p| p.row(bi));
                let e = aggregate_patches_vars(
                    tape,
                    binder,
                    bb,
                    &sample,
                    &sels,
                    prior_row.as_ref(),
                    x_global.dim().2,
                )?;
                selections[bi] = sels;
                per_sample.push(e);
            }
            Some(concat_batch(&per_sample))
        } else {
            None
        };

        let mut f_final = f_g.clone();
        if let Some(fr) = &f_r {
            f_final = f_final.concat_axis1(fr);
        }
        if let Some(fd) = &f_d {
            f_final = f_final.concat_axis1(fd);
        }
        let logits = f_final
            .matmul(&binder.var("classifier.w"))
            .add_rowvec(&binder.var("classifier.b"));

        Ok(ForwardVars {
            logits,
            f_g,
            f_r,
            f_d,
            f_final,
            global_stages,
            selections,
        })
    }

    /// Maps dataset labels to head targets (identity for tri-class,
    /// referable merge for the binary head).
    pub fn targets(&self, labels: &[crate::data::Label]) -> Vec<usize> {
        labels
            .iter()
            .map(|l| match self.cfg.head_mode {
                HeadMode::TriClass => l.index(),
                HeadMode::Binary => usize::from(l.referable()),
            })
            .collect()
    }

    /// Evaluation-mode forward returning probabilities and embeddings.
    pub fn predict(
        &self,
        x_global: &Array4<f64>,
        x_roi: &Array4<f64>,
        priors: Option<&Array2<f64>>,
    ) -> Result<Prediction> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&tape, &self.params);
        let fv = self.forward_vars(&tape, &binder, x_global, x_roi, priors)?;
        let logits = fv.logits.to_array().into_dimensionality::<Ix2>().unwrap();
        let probs = softmax_rows(&logits);
        let emb = |v: &Var, tag: BranchTag| -> Result<Embedding> {
            Embedding::new(v.to_array().into_dimensionality::<Ix2>().unwrap(), tag)
        };
        Ok(Prediction {
            probs,
            logits,
            embeddings: PredictionEmbeddings {
                f_g: emb(&fv.f_g, BranchTag::Global)?,
                f_r: fv.f_r.as_ref().map(|v| emb(v, BranchTag::Roi)).transpose()?,
                f_d: fv
                    .f_d
                    .as_ref()
                    .map(|v| emb(v, BranchTag::Dynamic))
                    .transpose()?,
                f_final: emb(&fv.f_final, BranchTag::Fused)?,
            },
            selections: fv.selections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "schema": 1,
            "config": serde_json::to_value(&self.cfg)
                .map_err(|e| Error::Archive(e.to_string()))?,
        });
        let arrays: Vec<(String, ndarray::ArrayD<f64>)> = self
            .params
            .iter()
            .map(|(n, a)| (n.clone(), a.clone()))
            .collect();
        crate::archive::write_archive(path, &meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Network> {
        let arch = crate::archive::read_archive(path)?;
        if arch.meta["kind"] != "checkpoint" {
            return Err(Error::Archive("not a checkpoint archive".into()));
        }
        let cfg: ModelConfig = serde_json::from_value(arch.meta["config"].clone())
            .map_err(|e| Error::Archive(format!("bad checkpoint config: {e}")))?;
        let mut net = Network::new(cfg, 0)?;
        for (name, arr) in arch.arrays {
            if !net.params.contains(&name) {
                return Err(Error::Archive(format!("unexpected checkpoint entry {name}")));
            }
            if net.params.get(&name).shape() != arr.shape() {
                return Err(Error::Archive(format!("shape mismatch for {name}")));
            }
            *net.params.get_mut(&name) = arr;
        }
        Ok(net)
    }

    pub fn global_backbone(&self) -> &Backbone {
        &self.global
    }
}
