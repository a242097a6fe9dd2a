//! Minimal end-to-end demo: train the tiny tri-branch model on synthetic
//! fundus images and print the validation trajectory.

use gscreen_core::cli::{build_priors, load_dataset};
use gscreen_core::config::RunConfig;
use gscreen_core::data::Split;
use gscreen_core::model::Network;
use gscreen_core::preprocess::AugmentationPolicy;
use gscreen_core::training::{train, InputPipeline, TrainConfig, TrainData};
use gscreen_core::preprocess::Normalize;

fn main() -> gscreen_core::Result<()> {
    let mut cfg = RunConfig::desk_default();
    cfg.data.synthetic.as_mut().unwrap().n_per_class = 100;
    cfg.train = TrainConfig {
        lr: 2e-4,
        iterations: 400,
        batch_size: 16,
        eval_every: 50,
        checkpoint_every: 100_000,
        seed: 1,
        ..Default::default()
    };

    let ds = load_dataset(&cfg)?;
    let priors = build_priors(&cfg, &ds)?;
    let data = TrainData {
        train_idx: ds.indices_for(Split::Train),
        val_idx: ds.indices_for(Split::Val),
        ds: &ds,
        priors,
    };
    let mut net = Network::new(cfg.model.clone(), cfg.seed)?;
    let eval_p = InputPipeline {
        input_size: cfg.preprocess.input_size,
        roi_scale: cfg.preprocess.roi_scale,
        normalize: Normalize::default(),
        augment: None,
    };
    let train_p = InputPipeline {
        augment: Some(AugmentationPolicy {
            p_apply: cfg.train.aug_probability,
            ops: cfg.preprocess.augment_ops.clone(),
            seed: cfg.seed,
        }),
        ..eval_p.clone()
    };
    let outcome = train(&mut net, &data, &cfg.train, &train_p, &eval_p, None, |r| {
        if let Some(v) = &r.val {
            println!(
                "step {:4}  loss {:.4}  val acc {:.3}  val macro AUC {:.4}",
                r.step,
                r.loss,
                v.accuracy,
                v.macro_auc.unwrap_or(f64::NAN)
            );
        }
        true
    })?;
    println!(
        "best step {} with validation metric {:.4}",
        outcome.state.best_step, outcome.state.best_val_metric
    );
    Ok(())
}
