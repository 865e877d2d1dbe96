//! Adam optimization and the two-stage training procedure.
//!
//! Stage 1 trains on the training split with early stopping on
//! validation accuracy (no strict improvement for `patience_epochs`
//! consecutive epochs) and restores the best-validation parameters.
//! Stage 2 continues on train + validation combined and stops once the
//! former validation set's loss drops below the stage-1 training loss,
//! recomputed at the restored parameters. Hard caps bound both stages.
//!
//! All evaluation passes (validation metrics, the stage-1 threshold and
//! the stage-2 criterion) run in eval mode, so they are pure functions of
//! the parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EegDataset;
use crate::error::{Error, Result};
use crate::layers::{max_norm_project, softmax_nll_loss};
use crate::model::{FbcNet, Param};
use crate::seeds::derive_seed;

/// Adam optimizer state: first/second moment per parameter plus the step
/// counter used for bias correction.
#[derive(Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> AdamState {
        AdamState {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update from the accumulated gradients, followed by
    /// max-norm projection on constrained parameters. Gradients must be
    /// populated; a NaN gradient aborts naming the parameter.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let grad = p.tensor.grad().ok_or_else(|| {
                Error::InvalidConfig(format!("parameter '{}' has no gradient", p.name))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NanGradient(p.name.to_string()));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.tensor.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
            if let Some((limit, group)) = p.max_norm {
                max_norm_project(&p.tensor, limit, group);
            }
        }
        Ok(())
    }
}

/// Epoch budget and batch schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub stage1_max_epochs: usize,
    pub stage2_max_epochs: usize,
    pub patience_epochs: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            batch_size: 16,
            stage1_max_epochs: 1500,
            stage2_max_epochs: 600,
            patience_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience_epochs >= self.stage1_max_epochs {
            return Err(Error::InvalidConfig(
                "patience_epochs must be below stage1_max_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Full per-epoch history plus the stage boundaries.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// 1-based stage-1 epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Training-set loss at the restored parameters (eval mode).
    pub stage1_final_train_loss: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl TrainLog {
    /// Comma-separated text, one epoch per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.stage, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Prepared trials (multi-view cache)
// ---------------------------------------------------------------------------

/// Precomputed multi-view buffers for a whole dataset. Filtering is
/// deterministic, so caching it once per dataset gives identical results
/// to filtering inside every forward pass.
pub struct PreparedTrials {
    pub views: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PreparedTrials {
    pub fn prepare(model: &FbcNet, ds: &EegDataset) -> Result<PreparedTrials> {
        let cfg = &model.config;
        if ds.channels != cfg.channels
            || ds.samples != cfg.samples
            || ds.sample_rate_hz != cfg.sample_rate_hz
        {
            return Err(Error::InvalidConfig(format!(
                "dataset geometry ({}, {}, {} Hz) does not match model ({}, {}, {} Hz)",
                ds.channels,
                ds.samples,
                ds.sample_rate_hz,
                cfg.channels,
                cfg.samples,
                cfg.sample_rate_hz
            )));
        }
        let views = ds
            .trials
            .iter()
            .map(|t| {
                model
                    .filter_bank
                    .multi_view(&t.x, cfg.channels, cfg.samples, cfg.filter_mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedTrials {
            views,
            labels: ds.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Eval-mode loss and accuracy over the given trial indices.
pub fn evaluate(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let was_train = matches!(model.mode(), crate::layers::Mode::Train);
    model.set_eval();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let views: Vec<&[f64]> = chunk.iter().map(|&i| prepared.views[i].as_slice()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| prepared.labels[i]).collect();
        let batch = model.views_to_batch(&views);
        let logits = model.forward_views(&batch)?;
        let loss = softmax_nll_loss(&logits, &labels)?;
        total_loss += loss.item() * chunk.len() as f64;
        let preds = crate::model::predictions_from_logits(&logits.data(), model.config.classes);
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|((p, _), &y)| *p == y)
            .count();
    }
    if was_train {
        model.set_train();
    }
    Ok((
        total_loss / indices.len() as f64,
        correct as f64 / indices.len() as f64,
    ))
}

/// Validation metric source for the stage loops. The production
/// implementation evaluates the model on held-out trials; tests can
/// inject scripted sequences.
pub trait ValEvaluator {
    /// Returns (loss, accuracy) on the validation set for this epoch.
    fn evaluate(&mut self, model: &mut FbcNet, epoch: usize) -> Result<(f64, f64)>;
}

struct RealEvaluator<'a> {
    prepared: &'a PreparedTrials,
    indices: &'a [usize],
    batch_size: usize,
}

impl ValEvaluator for RealEvaluator<'_> {
    fn evaluate(&mut self, model: &mut FbcNet, _epoch: usize) -> Result<(f64, f64)> {
        evaluate(model, self.prepared, self.indices, self.batch_size)
    }
}

/// Scripted validation metrics, for exercising the stopping rules.
pub struct ScriptedEvaluator {
    /// (loss, accuracy) per epoch; the last entry repeats if exhausted.
    pub sequence: Vec<(f64, f64)>,
}

impl ValEvaluator for ScriptedEvaluator {
    fn evaluate(&mut self, _model: &mut FbcNet, epoch: usize) -> Result<(f64, f64)> {
        let idx = (epoch - 1).min(self.sequence.len() - 1);
        Ok(self.sequence[idx])
    }
}

// ---------------------------------------------------------------------------
// Stage loops
// ---------------------------------------------------------------------------

fn run_train_epoch(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    order: &[usize],
    plan: &TrainPlan,
    adam: &mut AdamState,
) -> Result<(f64, f64)> {
    model.set_train();
    let params = model.parameters();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in order.chunks(plan.batch_size) {
        let views: Vec<&[f64]> = chunk.iter().map(|&i| prepared.views[i].as_slice()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| prepared.labels[i]).collect();
        for p in &params {
            p.tensor.zero_grad();
        }
        let batch = model.views_to_batch(&views);
        let logits = model.forward_views(&batch)?;
        let loss = softmax_nll_loss(&logits, &labels)?;
        loss.backward()?;
        total_loss += loss.item() * chunk.len() as f64;
        let preds = crate::model::predictions_from_logits(&logits.data(), model.config.classes);
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|((p, _), &y)| *p == y)
            .count();
        adam.step(&params)?;
    }
    Ok((
        total_loss / order.len() as f64,
        correct as f64 / order.len() as f64,
    ))
}

/// Stage-1 outcome: the log plus the value stage 2 needs as threshold.
pub struct Stage1Outcome {
    pub log: TrainLog,
}

/// Stage 1 with an injected validation evaluator (see
/// [`train_stage1`] for the production entry point).
pub fn train_stage1_with_evaluator(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    train_idx: &[usize],
    plan: &TrainPlan,
    val_eval: &mut dyn ValEvaluator,
    threshold_idx: &[usize],
) -> Result<Stage1Outcome> {
    plan.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "shuffle"));
    let mut adam = AdamState::new(&model.parameters());
    let mut order: Vec<usize> = train_idx.to_vec();

    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;

    for epoch in 1..=plan.stage1_max_epochs {
        order.copy_from_slice(train_idx);
        order.shuffle(&mut rng);
        let (train_loss, train_acc) = run_train_epoch(model, prepared, &order, plan, &mut adam)?;
        let (val_loss, val_acc) = val_eval.evaluate(model, epoch)?;
        log.records.push(EpochRecord {
            epoch,
            stage: 1,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });

        let improved = match &best {
            None => true,
            Some((_, best_acc, _)) => val_acc > *best_acc,
        };
        if improved {
            best = Some((epoch, val_acc, model.state_buffers()));
        }
        let best_epoch = best.as_ref().unwrap().0;
        if epoch - best_epoch >= plan.patience_epochs {
            break;
        }
    }

    let (best_epoch, _, snapshot) = best.expect("at least one epoch ran");
    model.restore_state_buffers(&snapshot);
    log.best_epoch = best_epoch;
    log.stage1_epochs = log.records.len();
    // Threshold for stage 2: training-set loss at the restored parameters.
    let (final_train_loss, _) = evaluate(model, prepared, threshold_idx, plan.batch_size)?;
    log.stage1_final_train_loss = final_train_loss;
    Ok(Stage1Outcome { log })
}

/// Stage 1: early stopping on validation accuracy, best-weights restore.
pub fn train_stage1(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    train_idx: &[usize],
    val_idx: &[usize],
    plan: &TrainPlan,
) -> Result<Stage1Outcome> {
    if val_idx.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if train_idx.iter().any(|i| val_idx.contains(i)) {
        return Err(Error::InvalidConfig(
            "train and validation sets overlap".into(),
        ));
    }
    let mut evaluator = RealEvaluator {
        prepared,
        indices: val_idx,
        batch_size: plan.batch_size,
    };
    train_stage1_with_evaluator(model, prepared, train_idx, plan, &mut evaluator, train_idx)
}

/// Stage 2 with an injected former-validation loss evaluator.
pub fn train_stage2_with_evaluator(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    combined_idx: &[usize],
    plan: &TrainPlan,
    stage1_final_train_loss: f64,
    val_eval: &mut dyn ValEvaluator,
) -> Result<TrainLog> {
    if combined_idx.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "shuffle-stage2"));
    let mut adam = AdamState::new(&model.parameters());
    let mut order: Vec<usize> = combined_idx.to_vec();
    let mut log = TrainLog::default();

    for epoch in 1..=plan.stage2_max_epochs {
        order.copy_from_slice(combined_idx);
        order.shuffle(&mut rng);
        let (train_loss, train_acc) = run_train_epoch(model, prepared, &order, plan, &mut adam)?;
        let (val_loss, val_acc) = val_eval.evaluate(model, epoch)?;
        log.records.push(EpochRecord {
            epoch,
            stage: 2,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if val_loss < stage1_final_train_loss {
            break;
        }
    }
    log.stage2_epochs = log.records.len();
    Ok(log)
}

/// Stage 2: continue on train + former validation until the former
/// validation loss drops below the stage-1 training loss.
pub fn train_stage2(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    combined_idx: &[usize],
    former_val_idx: &[usize],
    stage1_final_train_loss: f64,
    plan: &TrainPlan,
) -> Result<TrainLog> {
    let mut evaluator = RealEvaluator {
        prepared,
        indices: former_val_idx,
        batch_size: plan.batch_size,
    };
    train_stage2_with_evaluator(
        model,
        prepared,
        combined_idx,
        plan,
        stage1_final_train_loss,
        &mut evaluator,
    )
}

// ---------------------------------------------------------------------------
// fit: split + both stages
// ---------------------------------------------------------------------------

/// Class-stratified sequential split: the first `ceil(n_c * fraction)`
/// trials of each class (by dataset order within `indices`) become the
/// validation set. Errors when a class is absent.
pub fn stratified_val_split(
    labels: &[usize],
    indices: &[usize],
    classes: usize,
    fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    let mut per_class = vec![0usize; classes];
    for &i in indices {
        per_class[labels[i]] += 1;
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::InvalidConfig(format!(
            "class {c} absent from training data"
        )));
    }
    let target: Vec<usize> = per_class
        .iter()
        .map(|&n| ((n as f64) * fraction).ceil() as usize)
        .collect();
    let mut taken = vec![0usize; classes];
    let mut val = Vec::new();
    let mut train = Vec::new();
    for &i in indices {
        let c = labels[i];
        if taken[c] < target[c] {
            val.push(i);
            taken[c] += 1;
        } else {
            train.push(i);
        }
    }
    if train.is_empty() {
        return Err(Error::Empty("training set after split"));
    }
    Ok((train, val))
}

/// Run both stages on explicit train/validation index sets; the model is
/// left in eval mode. Stage 2 trains on train + validation combined.
pub fn fit_with_split(
    model: &mut FbcNet,
    prepared: &PreparedTrials,
    train_idx: &[usize],
    val_idx: &[usize],
    plan: &TrainPlan,
) -> Result<TrainLog> {
    let stage1 = train_stage1(model, prepared, train_idx, val_idx, plan)?;
    let mut combined: Vec<usize> = train_idx.to_vec();
    combined.extend_from_slice(val_idx);
    let stage2 = train_stage2(
        model,
        prepared,
        &combined,
        val_idx,
        stage1.log.stage1_final_train_loss,
        plan,
    )?;

    let mut log = stage1.log;
    log.stage2_epochs = stage2.stage2_epochs;
    log.records.extend(stage2.records);
    model.set_eval();
    Ok(log)
}

/// Split off a validation fraction, then run both training stages.
pub fn fit(
    model: &mut FbcNet,
    ds: &EegDataset,
    plan: &TrainPlan,
    val_fraction: f64,
) -> Result<TrainLog> {
    let prepared = PreparedTrials::prepare(model, ds)?;
    let all: Vec<usize> = (0..ds.n_trials()).collect();
    let (train_idx, val_idx) =
        stratified_val_split(&prepared.labels, &all, ds.classes, val_fraction)?;
    fit_with_split(model, &prepared, &train_idx, &val_idx, plan)
}
