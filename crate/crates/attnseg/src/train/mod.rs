//! Training loop: stochastic gates, class-token masking, AdamW with cosine
//! decay, and periodic evaluation of classification and pseudo-mask quality.

pub mod loss;
pub mod optimizer;

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::{
    draw_gate_uniforms, eval_gates, expected_l0, expected_l0_grad, fraction_prunable,
    gate_grad_to_log_alpha, gates_from_uniforms, prune_heads, GateParams,
};
use crate::masking::{sample_mask, LabelSet, MaskVector};
use crate::metrics::{ConfusionMatrix, MultiLabelCounts};
use crate::model::backward::backward;
use crate::model::forward::forward_cached;
use crate::model::params::{ParamGroup, VitParams};
use crate::pseudomask::generate_pseudo_mask;
use crate::real::Real;
use crate::rng::stream_rng;
use loss::{bce_with_logits, bce_with_logits_excluding, targets_from_labels};
use optimizer::{AdamW, CosineSchedule};

/// One training example prepared for a step.
pub struct BatchItem<'a, F> {
    pub image: &'a Array3<F>,
    pub targets: &'a Array1<F>,
    pub mask: MaskVector,
}

/// Losses and gradients for one batch.
pub struct StepOutput<F> {
    /// cls_loss + lambda * expected_l0.
    pub total_loss: F,
    pub cls_loss: F,
    pub expected_l0: F,
    pub param_grads: VitParams<F>,
    pub gate_logit_grads: Array2<F>,
}

/// Forward/backward over one batch. Gates are rebuilt from the given uniforms
/// and shared by every sample in the batch, so the whole objective is a
/// deterministic function of (params, gate logits) that finite differences
/// can probe. The classification loss is averaged over samples; the expected
/// L0 penalty is added once.
pub fn train_step<F: Real>(
    params: &VitParams<F>,
    gates: &GateParams<F>,
    batch: &[BatchItem<'_, F>],
    gate_uniforms: &Array2<F>,
    lambda: f64,
    masked_in_loss: bool,
    cfg: &ModelConfig,
) -> Result<StepOutput<F>> {
    assert!(!batch.is_empty(), "empty batch");
    let sample = gates_from_uniforms(gates, gate_uniforms);
    let per: Result<Vec<_>> = batch
        .par_iter()
        .map(|item| {
            let (logits, _, cache) =
                forward_cached(item.image, params, &sample.gates, &item.mask, cfg)?;
            let (cls_loss, dlogits) = if masked_in_loss {
                bce_with_logits(&logits, item.targets)
            } else {
                bce_with_logits_excluding(&logits, item.targets, &item.mask)
            };
            let (grads, dgates) =
                backward(params, &cache, &sample.gates, &item.mask, &dlogits, cfg);
            Ok((cls_loss, grads, dgates))
        })
        .collect();
    // Sequential reduction in batch order: results are identical for any
    // rayon thread count.
    let scale = F::of(1.0 / batch.len() as f64);
    let mut cls_loss = F::zero();
    let mut param_grads = params.zeros_like();
    let mut dgates = Array2::<F>::zeros(gates.log_alpha.raw_dim());
    for (l, g, dg) in per? {
        cls_loss += l * scale;
        param_grads.add_scaled(&g, scale);
        dgates.zip_mut_with(&dg, |a, &b| *a += b * scale);
    }
    let mut gate_logit_grads = gate_grad_to_log_alpha(gates, &sample, &dgates);
    let lam = F::of(lambda);
    gate_logit_grads.zip_mut_with(&expected_l0_grad(gates), |a, &b| *a += lam * b);
    let l0 = expected_l0(gates);
    Ok(StepOutput {
        total_loss: cls_loss + lam * l0,
        cls_loss,
        expected_l0: l0,
        param_grads,
        gate_logit_grads,
    })
}

/// Evaluation results over a dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Macro F1 of multi-label class prediction.
    pub macro_f1: f64,
    /// Mean IoU of pseudo-masks against ground truth, over classes present
    /// anywhere in the split.
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_predicted_classes: f64,
    pub num_samples: usize,
}

/// Runs deterministic inference over `indices` of `ds` with the given gate
/// values, scoring multi-label classification and pseudo-mask segmentation.
pub fn evaluate<F: Real>(
    params: &VitParams<F>,
    gate_values: &Array2<F>,
    ds: &Dataset,
    indices: &[usize],
    run: &RunConfig,
) -> Result<EvalMetrics> {
    let results: Result<Vec<_>> = indices
        .par_iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let image = ds.normalized_image::<F>(s);
            let pm = generate_pseudo_mask(
                &image,
                params,
                gate_values,
                &run.model,
                &run.pseudo_mask,
                run.train.decision_threshold,
            )?;
            Ok((i, pm))
        })
        .collect();
    let c = run.model.num_classes;
    let mut cm = ConfusionMatrix::new(c);
    let mut labels = MultiLabelCounts::new(c);
    let mut predicted_total = 0usize;
    for (i, pm) in results? {
        let s = &ds.samples[i];
        labels.update(&s.labels, &LabelSet::new(pm.predicted.iter().copied()));
        if let Some(gt) = &s.gt_mask {
            cm.update(gt, &pm.mask);
        }
        predicted_total += pm.predicted.len();
    }
    Ok(EvalMetrics {
        macro_f1: labels.macro_f1(),
        miou: cm.miou(),
        pixel_accuracy: cm.pixel_accuracy(),
        per_class_iou: cm.per_class_iou(),
        mean_predicted_classes: predicted_total as f64 / indices.len().max(1) as f64,
        num_samples: indices.len(),
    })
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub cls_loss: f64,
    /// Expected L0 at the end of the epoch.
    pub l0: f64,
    pub frac_heads_prunable: f64,
    /// Evaluation metrics; null on epochs where evaluation was skipped.
    pub macro_f1: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

#[derive(Debug)]
pub struct FitOutcome<F> {
    pub checkpoint: Checkpoint<F>,
    pub history: Vec<EpochRecord>,
    /// Evaluation of the final model with deterministic (unpruned) gates.
    pub final_eval: EvalMetrics,
    /// Keep mask, (num_layers, num_heads), 1 = kept.
    pub kept_heads: Array2<u8>,
    pub fraction_pruned: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions<'a> {
    /// Where to write checkpoint.bin/.json and metrics.jsonl; nothing is
    /// persisted when absent.
    pub out_dir: Option<&'a Path>,
    /// Checkpoint blob to resume from. The model and gate sections of its
    /// config must match the current run's.
    pub resume: Option<&'a Path>,
    /// Pause after this many total completed epochs; the learning-rate
    /// horizon still comes from the configured epoch count, so a paused and
    /// resumed run retraces an uninterrupted one exactly.
    pub epoch_limit: Option<usize>,
    pub quiet: bool,
}

fn json_mismatch<T: Serialize>(a: &T, b: &T) -> bool {
    serde_json::to_value(a).ok() != serde_json::to_value(b).ok()
}

/// Trains a model on `train_ds`. Validation uses `val_ds` when given,
/// otherwise the tail `val_fraction` of `train_ds` is held out; if that
/// leaves no validation samples the training split doubles as one.
pub fn fit<F: Real>(
    run: &RunConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    opts: &FitOptions<'_>,
) -> Result<FitOutcome<F>> {
    run.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let cfg = &run.model;
    let tc = &run.train;

    // Resolve the train/validation index sets.
    let n_val_tail = if val_ds.is_some() {
        0
    } else {
        ((train_ds.len() as f64) * tc.val_fraction).floor() as usize
    };
    let n_train = train_ds.len() - n_val_tail;
    if n_train == 0 {
        return Err(Error::Input("val_fraction leaves no training samples".into()));
    }
    let train_indices: Vec<usize> = (0..n_train).collect();
    let val_indices: Vec<usize> = match val_ds {
        Some(ds) => (0..ds.len()).collect(),
        None if n_val_tail > 0 => (n_train..train_ds.len()).collect(),
        None => train_indices.clone(),
    };
    let eval_ds = val_ds.unwrap_or(train_ds);

    // Fresh or resumed state.
    let mut ckpt: Checkpoint<F> = match opts.resume {
        Some(path) => {
            let loaded = Checkpoint::<F>::load(path)?;
            if json_mismatch(&loaded.config.model, &run.model)
                || json_mismatch(&loaded.config.gates, &run.gates)
            {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model/gate configuration"
                        .into(),
                ));
            }
            Checkpoint { config: run.clone(), ..loaded }
        }
        None => {
            let params = VitParams::<F>::init(cfg, &mut stream_rng(tc.seed, "init", 0));
            let gates = GateParams::<F>::new(cfg.num_layers, cfg.num_heads, &run.gates);
            let state_len = params.num_params() + gates.log_alpha.len();
            Checkpoint {
                config: run.clone(),
                params,
                gates,
                opt: AdamW::new(state_len, tc.weight_decay),
                epochs_completed: 0,
                global_step: 0,
                last_metrics: None,
            }
        }
    };
    ckpt.opt.gate_lr_mult = tc.gate_lr_mult;

    // Normalized images and targets, indexed like the dataset.
    let images: Vec<Array3<F>> =
        train_ds.samples.iter().map(|s| train_ds.normalized_image::<F>(s)).collect();
    let targets: Vec<Array1<F>> = train_ds
        .samples
        .iter()
        .map(|s| targets_from_labels::<F>(&s.labels, cfg.num_classes))
        .collect();

    let steps_per_epoch = n_train.div_ceil(tc.batch_size) as u64;
    let schedule =
        CosineSchedule { base_lr: tc.lr, total_steps: tc.epochs as u64 * steps_per_epoch };
    let end_epoch = opts.epoch_limit.unwrap_or(tc.epochs).min(tc.epochs);

    let mut metrics_file = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(ckpt.epochs_completed > 0)
                .truncate(ckpt.epochs_completed == 0)
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(file)
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut final_eval: Option<EvalMetrics> = None;
    for epoch in ckpt.epochs_completed..end_epoch {
        let mut shuffle_rng = stream_rng(tc.seed, "shuffle", epoch as u64);
        let mut gate_rng = stream_rng(tc.seed, "gate", epoch as u64);
        let mut mask_rng = stream_rng(tc.seed, "mask", epoch as u64);
        let mut order = train_indices.clone();
        order.shuffle(&mut shuffle_rng);

        let mut sum_total = 0.0;
        let mut sum_cls = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let uniforms = draw_gate_uniforms::<F, _>(ckpt.gates.log_alpha.dim(), &mut gate_rng);
            let batch: Vec<BatchItem<'_, F>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    image: &images[i],
                    targets: &targets[i],
                    mask: sample_mask(
                        &train_ds.samples[i].labels,
                        cfg.num_classes,
                        tc.mask_ratio,
                        &mut mask_rng,
                    ),
                })
                .collect();
            let step = train_step(
                &ckpt.params,
                &ckpt.gates,
                &batch,
                &uniforms,
                tc.lambda,
                tc.masked_in_loss,
                cfg,
            )?;
            if !step.total_loss.as_f64().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} step {}",
                    epoch + 1,
                    ckpt.global_step
                )));
            }
            let lr = schedule.lr(ckpt.opt.step_count());
            let mut grads = step.param_grads.fields();
            grads.push((
                ParamGroup::GateLogit,
                step.gate_logit_grads.as_slice().expect("contiguous"),
            ));
            let mut params = ckpt.params.fields_mut();
            params.push((
                ParamGroup::GateLogit,
                ckpt.gates.log_alpha.as_slice_mut().expect("contiguous"),
            ));
            ckpt.opt.step(lr, &mut params, &grads);
            ckpt.global_step += 1;
            sum_total += step.total_loss.as_f64() * chunk.len() as f64;
            sum_cls += step.cls_loss.as_f64() * chunk.len() as f64;
        }
        ckpt.epochs_completed = epoch + 1;

        let evaluate_now = (epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs;
        let eval = if evaluate_now {
            let metrics = evaluate(
                &ckpt.params,
                &eval_gates(&ckpt.gates),
                eval_ds,
                &val_indices,
                run,
            )?;
            ckpt.last_metrics = Some(serde_json::to_value(&metrics).unwrap());
            Some(metrics)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: schedule.lr(ckpt.opt.step_count().saturating_sub(1)),
            loss: sum_total / n_train as f64,
            cls_loss: sum_cls / n_train as f64,
            l0: expected_l0(&ckpt.gates).as_f64(),
            frac_heads_prunable: fraction_prunable(&ckpt.gates, run.gates.prune_threshold),
            macro_f1: eval.as_ref().map(|m| m.macro_f1),
            miou: eval.as_ref().map(|m| m.miou),
            pixel_accuracy: eval.as_ref().map(|m| m.pixel_accuracy),
        };
        if !opts.quiet {
            eprintln!(
                "epoch {:>3}/{} loss {:.4} cls {:.4} l0 {:.2} f1 {} miou {}",
                record.epoch,
                tc.epochs,
                record.loss,
                record.cls_loss,
                record.l0,
                record.macro_f1.map_or("-".into(), |v| format!("{v:.3}")),
                record.miou.map_or("-".into(), |v| format!("{v:.3}")),
            );
        }
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&record).unwrap();
            writeln!(f, "{line}")
                .map_err(|e| Error::io(opts.out_dir.unwrap().join("metrics.jsonl"), e))?;
        }
        if let Some(dir) = opts.out_dir {
            ckpt.save(&dir.join("checkpoint.bin"))?;
        }
        if let Some(m) = eval {
            final_eval = Some(m);
        }
        history.push(record);
    }

    // Runs with zero (remaining) epochs still report an evaluation of the
    // current parameters and persist a checkpoint.
    let final_eval = match final_eval {
        Some(m) if ckpt.epochs_completed == end_epoch => m,
        _ => {
            let m = evaluate(&ckpt.params, &eval_gates(&ckpt.gates), eval_ds, &val_indices, run)?;
            ckpt.last_metrics = Some(serde_json::to_value(&m).unwrap());
            if let Some(dir) = opts.out_dir {
                ckpt.save(&dir.join("checkpoint.bin"))?;
            }
            m
        }
    };
    let kept_heads = prune_heads(&ckpt.gates, run.gates.prune_threshold);
    let fraction_pruned = fraction_prunable(&ckpt.gates, run.gates.prune_threshold);
    Ok(FitOutcome { checkpoint: ckpt, history, final_eval, kept_heads, fraction_pruned })
}
