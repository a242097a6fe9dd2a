//! Optimization loop: Adam updates over class-balanced resampled epochs with
//! augmentation, periodic validation, early stopping, and checkpointing.

use crate::data::{resample_balanced_labels, Dataset, Label};
use crate::error::{Error, Result};
use crate::evaluation::compute_metrics;
use crate::model::{HeadMode, Network};
use crate::nn::{Arr, Binder, ParamStore, Tape};
use crate::preprocess::{
    augment, extract_crop, locate_roi, to_model_input, AugmentationPolicy, Normalize,
};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Base step size. The full-scale protocol trains at 5e-5 with the rate
    /// adjusted within [5e-5, 2e-4]; zero is accepted for dry runs.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub aug_probability: f64,
    /// Early-stop patience measured in balanced epochs.
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 10_000,
            batch_size: 16,
            aug_probability: 0.5,
            early_stop_patience: 10,
            eval_every: 400,
            checkpoint_every: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("eval/checkpoint cadence must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_val_metric: f64,
    pub best_step: usize,
    pub steps_since_best: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValMetrics {
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<ValMetrics>,
}

/// Bias-corrected Adam update for a single tensor. Moments are updated in
/// place; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Arr,
    grad: &Arr,
    m: &mut Arr,
    v: &mut Arr,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::ShapeError(format!(
            "adam shapes disagree: param {:?}, grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (p, g, ms, vs) = (
        param.as_slice_mut().unwrap(),
        grad.as_slice().unwrap(),
        m.as_slice_mut().unwrap(),
        v.as_slice_mut().unwrap(),
    );
    for i in 0..p.len() {
        ms[i] = beta1 * ms[i] + (1.0 - beta1) * g[i];
        vs[i] = beta2 * vs[i] + (1.0 - beta2) * g[i] * g[i];
        let mhat = ms[i] / bc1;
        let vhat = vs[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter Adam moments keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
    pub t: usize,
}

impl AdamState {
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Arr>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        for (name, grad) in grads {
            let param = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(param.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(param.raw_dim()));
            adam_step(
                param, grad, m, v, self.t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
            )?;
        }
        Ok(())
    }
}

/// Turns dataset samples into model input batches. The ROI is located on the
/// un-augmented image (masks stay valid), then the global image and the ROI
/// crop are augmented independently with consecutive draw indices.
#[derive(Debug, Clone)]
pub struct InputPipeline {
    pub input_size: usize,
    pub roi_scale: f64,
    pub normalize: Normalize,
    pub augment: Option<AugmentationPolicy>,
}

pub struct Batch {
    pub x_global: Array4<f64>,
    pub x_roi: Array4<f64>,
    pub priors: Option<Array2<f64>>,
    pub labels: Vec<Label>,
}

impl InputPipeline {
    pub fn build(
        &self,
        ds: &Dataset,
        idxs: &[usize],
        priors: Option<&Array2<f64>>,
        draw_base: u64,
    ) -> Result<Batch> {
        let b = idxs.len();
        let s = self.input_size;
        let mut x_global = Array4::<f64>::zeros((b, 3, s, s));
        let mut x_roi = Array4::<f64>::zeros((b, 3, s, s));
        let mut prior_rows = priors.map(|p| Array2::<f64>::zeros((b, p.dim().1)));
        let mut labels = Vec::with_capacity(b);
        for (slot, &i) in idxs.iter().enumerate() {
            let sample = &ds.samples[i];
            let crop = extract_crop(
                &sample.image,
                &locate_roi(&sample.image, sample.mask.as_ref(), self.roi_scale)?,
            );
            let (g_img, r_img) = match &self.augment {
                Some(policy) => (
                    augment(&sample.image, policy, draw_base + 2 * slot as u64)?,
                    augment(&crop, policy, draw_base + 2 * slot as u64 + 1)?,
                ),
                None => (sample.image.clone(), crop),
            };
            x_global
                .index_axis_mut(ndarray::Axis(0), slot)
                .assign(&to_model_input(&g_img, s, &self.normalize).index_axis_move(ndarray::Axis(0), 0));
            x_roi
                .index_axis_mut(ndarray::Axis(0), slot)
                .assign(&to_model_input(&r_img, s, &self.normalize).index_axis_move(ndarray::Axis(0), 0));
            if let (Some(rows), Some(p)) = (&mut prior_rows, priors) {
                rows.row_mut(slot).assign(&p.row(i));
            }
            labels.push(sample.label);
        }
        Ok(Batch {
            x_global,
            x_roi,
            priors: prior_rows,
            labels,
        })
    }
}

pub struct TrainData<'a> {
    pub ds: &'a Dataset,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    /// Prior embeddings aligned with dataset order (required when any branch
    /// uses knowledge-enhanced attention).
    pub priors: Option<Array2<f64>>,
}

pub struct TrainOutcome {
    pub best_params: ParamStore,
    pub history: Vec<HistoryRecord>,
    pub state: TrainState,
}

/// Validation pass: accuracy plus macro AUC under the model's head mode.
pub fn evaluate_validation(
    net: &Network,
    ds: &Dataset,
    idxs: &[usize],
    priors: Option<&Array2<f64>>,
    pipeline: &InputPipeline,
) -> Result<ValMetrics> {
    let mut all_probs: Vec<f64> = Vec::new();
    let mut all_labels: Vec<usize> = Vec::new();
    let k = net.cfg.num_classes();
    for chunk in idxs.chunks(16) {
        let batch = pipeline.build(ds, chunk, priors, 0)?;
        let pred = net.predict(&batch.x_global, &batch.x_roi, batch.priors.as_ref())?;
        all_probs.extend(pred.probs.iter());
        all_labels.extend(net.targets(&batch.labels));
    }
    let probs = Array2::from_shape_vec((all_labels.len(), k), all_probs)
        .map_err(|e| Error::ShapeError(e.to_string()))?;
    let mode = match net.cfg.head_mode {
        HeadMode::TriClass => HeadMode::TriClass,
        HeadMode::Binary => HeadMode::Binary,
    };
    let report = compute_metrics(&all_labels, &probs, mode)?;
    Ok(ValMetrics {
        macro_auc: report.macro_auc,
        accuracy: report.accuracy,
    })
}

/// Runs the optimization loop. The iteration cap wins over patience; early
/// stopping fires once no validation improvement is seen for
/// `early_stop_patience` balanced epochs. `on_record` sees every history
/// record and may end the run early by returning false. Returns the
/// best-validation parameters; `net` keeps its final-step parameters.
pub fn train(
    net: &mut Network,
    data: &TrainData<'_>,
    tcfg: &TrainConfig,
    pipeline: &InputPipeline,
    eval_pipeline: &InputPipeline,
    checkpoint_dir: Option<&Path>,
    mut on_record: impl FnMut(&HistoryRecord) -> bool,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let train_labels = data.ds.labels_at(&data.train_idx);
    let mut epoch = 0usize;
    let mut seq = resample_balanced_labels(&train_labels, tcfg.seed)?;
    let steps_per_epoch = seq.len().div_ceil(tcfg.batch_size);
    let patience_steps = tcfg.early_stop_patience * steps_per_epoch;
    let mut cursor = 0usize;

    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut best_params = net.params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_step = 0usize;

    let mut step = 0usize;
    while step < tcfg.iterations {
        step += 1;
        if cursor >= seq.len() {
            epoch += 1;
            seq = resample_balanced_labels(&train_labels, tcfg.seed.wrapping_add(epoch as u64))?;
            cursor = 0;
        }
        let end = (cursor + tcfg.batch_size).min(seq.len());
        let batch_idx: Vec<usize> = seq[cursor..end]
            .iter()
            .map(|&pos| data.train_idx[pos])
            .collect();
        cursor = end;

        let draw_base = (step as u64 - 1) * 2 * tcfg.batch_size as u64;
        let batch = pipeline.build(data.ds, &batch_idx, data.priors.as_ref(), draw_base)?;

        let tape = Tape::new();
        let binder = Binder::new(&tape, &net.params);
        let fv = net.forward_vars(
            &tape,
            &binder,
            &batch.x_global,
            &batch.x_roi,
            batch.priors.as_ref(),
        )?;
        let targets = net.targets(&batch.labels);
        let loss_var = fv.logits.softmax_cross_entropy(&targets);
        let loss = loss_var.scalar();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        let grads = tape.backward(&loss_var);
        let by_name = binder.collect_grads(&grads);
        adam.step(&mut net.params, &by_name, tcfg)?;

        let mut record = HistoryRecord {
            step,
            loss,
            val: None,
        };
        if step % tcfg.eval_every == 0 || step == tcfg.iterations {
            let vm = evaluate_validation(
                net,
                data.ds,
                &data.val_idx,
                data.priors.as_ref(),
                eval_pipeline,
            )?;
            let metric = vm.macro_auc.unwrap_or(vm.accuracy);
            if metric > best_val {
                best_val = metric;
                best_step = step;
                best_params = net.params.clone();
            }
            record.val = Some(vm);
        }
        if let Some(dir) = checkpoint_dir {
            if step % tcfg.checkpoint_every == 0 {
                net.save(&dir.join(format!("checkpoint_step{step}.gsar")))?;
            }
        }
        let keep_going = on_record(&record);
        history.push(record);

        if !keep_going || (best_step > 0 && step - best_step >= patience_steps) {
            break;
        }
    }

    let state = TrainState {
        step,
        epoch,
        best_val_metric: if best_val.is_finite() { best_val } else { 0.0 },
        best_step,
        steps_since_best: step.saturating_sub(best_step),
    };
    Ok(TrainOutcome {
        best_params,
        history,
        state,
    })
}
