//! Cross-validation and hold-out protocols, fold construction and
//! accuracy/kappa metrics.
//!
//! Folds are built by sequential class-balanced allocation: the i-th
//! trial of class c (in dataset order) goes to fold `i mod k`. The
//! assignment is a pure function of the label sequence, so it is
//! reproducible across runs. Within a CV run, fold `f` is the test set,
//! fold `(f + 1) mod k` the validation set, and the rest train.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{subsample_stratified, EegDataset};
use crate::error::{Error, Result};
use crate::model::{FbcNet, ModelConfig};
use crate::seeds::derive_seed_indexed;
use crate::trainer::{fit_with_split, PreparedTrials, TrainLog, TrainPlan};

/// Fold index per trial for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

/// Sequential class-balanced fold construction.
pub fn make_folds(labels: &[usize], k: usize) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k} must be >= 2")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class_count = vec![0usize; classes];
    let mut fold_of = Vec::with_capacity(labels.len());
    for &y in labels {
        fold_of.push(per_class_count[y] % k);
        per_class_count[y] += 1;
    }
    for (c, &n) in per_class_count.iter().enumerate() {
        if n > 0 && n < k {
            log::warn!("class {c} has only {n} trials for {k} folds");
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

impl FoldAssignment {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn indices_excluding(&self, excluded: &[usize]) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| !excluded.contains(f))
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Accuracy, Cohen's kappa and the confusion matrix (rows = true class,
/// columns = predicted).
#[derive(Debug, Clone)]
pub struct Metrics {
    pub accuracy: f64,
    pub kappa: f64,
    /// Set when expected agreement is 1 and kappa is undefined (reported
    /// as 0).
    pub kappa_undefined: bool,
    pub confusion: Vec<usize>,
    pub classes: usize,
}

pub fn metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut confusion = vec![0usize; classes * classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes {
            return Err(Error::LabelOutOfRange {
                label: p as i64,
                classes,
            });
        }
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                label: y as i64,
                classes,
            });
        }
        confusion[y * classes + p] += 1;
    }
    let total = predictions.len() as f64;
    let correct: usize = (0..classes).map(|c| confusion[c * classes + c]).sum();
    let p_o = correct as f64 / total;

    let mut p_e = 0.0;
    for c in 0..classes {
        let row: usize = (0..classes).map(|j| confusion[c * classes + j]).sum();
        let col: usize = (0..classes).map(|i| confusion[i * classes + c]).sum();
        p_e += (row as f64 / total) * (col as f64 / total);
    }
    let (kappa, kappa_undefined) = if (1.0 - p_e).abs() < 1e-12 {
        (0.0, true)
    } else {
        ((p_o - p_e) / (1.0 - p_e), false)
    };
    Ok(Metrics {
        accuracy: p_o,
        kappa,
        kappa_undefined,
        confusion,
        classes,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One evaluated trial: dataset index, true label, prediction, and the
/// predicted class probability.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub probability: f64,
}

/// Aggregated evaluation results for a CV or HO run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub protocol: String,
    /// Accuracy per fold (CV) or the single test-session accuracy (HO).
    pub fold_accuracies: Vec<f64>,
    /// Unweighted mean over folds.
    pub mean_accuracy: f64,
    /// Pooled metrics over every test prediction.
    pub metrics: Metrics,
    pub outcomes: Vec<TrialOutcome>,
}

impl EvalReport {
    /// Structured text: config echo is written separately by the caller;
    /// this covers per-fold rows, the confusion matrix, and metrics.
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut out = String::new();
        out.push_str("report_version 1\n");
        out.push_str(&format!("protocol {}\n", self.protocol));
        out.push_str(&format!("folds {}\n", self.fold_accuracies.len()));
        for (i, acc) in self.fold_accuracies.iter().enumerate() {
            out.push_str(&format!("fold {i} accuracy {acc:.6}\n"));
        }
        out.push_str(&format!("mean_accuracy {:.6}\n", self.mean_accuracy));
        out.push_str(&format!("overall_accuracy {:.6}\n", m.accuracy));
        out.push_str(&format!("kappa {:.6}\n", m.kappa));
        out.push_str(&format!("kappa_undefined {}\n", m.kappa_undefined));
        out.push_str("confusion_rows_true_cols_predicted\n");
        for r in 0..m.classes {
            let row: Vec<String> = (0..m.classes)
                .map(|c| m.confusion[r * m.classes + c].to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push_str("predictions trial true pred prob\n");
        for o in &self.outcomes {
            out.push_str(&format!(
                "{} {} {} {:.6}\n",
                o.index, o.label, o.prediction, o.probability
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Learner abstraction
// ---------------------------------------------------------------------------

/// A trained per-fold classifier.
pub trait Predictor {
    /// Predicted labels with the winning-class probability for the given
    /// trials.
    fn predict(&self, ds: &EegDataset, indices: &[usize]) -> Result<Vec<(usize, f64)>>;
}

/// Anything that can train a classifier on an index split of a dataset.
/// `fold` identifies the run for seed derivation.
pub trait Learner: Sync {
    fn fit(
        &self,
        ds: &EegDataset,
        train_idx: &[usize],
        val_idx: &[usize],
        fold: usize,
    ) -> Result<Box<dyn Predictor>>;
}

/// The production learner: builds and trains one model per fold with
/// fold-derived seeds.
pub struct FbcnetLearner {
    pub config: ModelConfig,
    pub plan: TrainPlan,
    /// Training logs per fold, in completion order.
    pub logs: Mutex<Vec<(usize, TrainLog)>>,
}

impl FbcnetLearner {
    pub fn new(config: ModelConfig, plan: TrainPlan) -> FbcnetLearner {
        FbcnetLearner {
            config,
            plan,
            logs: Mutex::new(Vec::new()),
        }
    }
}

struct TrainedFbcNet {
    model: FbcNet,
}

impl Predictor for TrainedFbcNet {
    fn predict(&self, ds: &EegDataset, indices: &[usize]) -> Result<Vec<(usize, f64)>> {
        let trials: Vec<&crate::data::EegTrial> = indices.iter().map(|&i| &ds.trials[i]).collect();
        let rows = self.model.predict(&trials)?;
        Ok(rows.into_iter().map(|(p, probs)| (p, probs[p])).collect())
    }
}

impl Learner for FbcnetLearner {
    fn fit(
        &self,
        ds: &EegDataset,
        train_idx: &[usize],
        val_idx: &[usize],
        fold: usize,
    ) -> Result<Box<dyn Predictor>> {
        let mut config = self.config.clone();
        config.seed = derive_seed_indexed(self.config.seed, "fold-init", fold as u64);
        let mut plan = self.plan.clone();
        plan.seed = derive_seed_indexed(self.plan.seed, "fold-shuffle", fold as u64);

        let mut model = FbcNet::build(config)?;
        let prepared = PreparedTrials::prepare(&model, ds)?;
        let log = fit_with_split(&mut model, &prepared, train_idx, val_idx, &plan)?;
        self.logs.lock().unwrap().push((fold, log));
        Ok(Box::new(TrainedFbcNet { model }))
    }
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct FoldResult {
    fold: usize,
    accuracy: f64,
    outcomes: Vec<TrialOutcome>,
}

fn run_one_fold(
    ds: &EegDataset,
    folds: &FoldAssignment,
    learner: &dyn Learner,
    fold: usize,
) -> Result<FoldResult> {
    let k = folds.k;
    let test_idx = folds.fold_indices(fold);
    // One training fold is held out as the validation set; the remaining
    // k-2 folds train.
    let val_fold = (fold + 1) % k;
    let val_idx = folds.fold_indices(val_fold);
    let train_idx = folds.indices_excluding(&[fold, val_fold]);
    debug_assert!(test_idx.iter().all(|i| !train_idx.contains(i) && !val_idx.contains(i)));

    let predictor = learner.fit(ds, &train_idx, &val_idx, fold)?;
    let rows = predictor.predict(ds, &test_idx)?;
    let outcomes: Vec<TrialOutcome> = test_idx
        .iter()
        .zip(rows)
        .map(|(&i, (p, prob))| TrialOutcome {
            index: i,
            label: ds.trials[i].label,
            prediction: p,
            probability: prob,
        })
        .collect();
    let correct = outcomes.iter().filter(|o| o.prediction == o.label).count();
    Ok(FoldResult {
        fold,
        accuracy: correct as f64 / outcomes.len().max(1) as f64,
        outcomes,
    })
}

/// k-fold cross-validation: fold `f` tests, fold `(f+1) mod k`
/// validates, the remaining folds train. Folds may run on up to `jobs`
/// threads; results are aggregated in fold order either way.
pub fn run_cv(ds: &EegDataset, learner: &dyn Learner, k: usize, jobs: usize) -> Result<EvalReport> {
    ds.validate()?;
    let folds = make_folds(&ds.labels(), k)?;
    let jobs = jobs.max(1).min(k);

    let results: Vec<Result<FoldResult>> = if jobs == 1 {
        (0..k).map(|f| run_one_fold(ds, &folds, learner, f)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<FoldResult>>>> =
            (0..k).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let f = next.fetch_add(1, Ordering::SeqCst);
                    if f >= k {
                        break;
                    }
                    let r = run_one_fold(ds, &folds, learner, f);
                    *slots[f].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("fold worker finished"))
            .collect()
    };

    let mut fold_accuracies = Vec::with_capacity(k);
    let mut outcomes = Vec::new();
    for r in results {
        let r = r?;
        debug_assert_eq!(r.fold, fold_accuracies.len());
        fold_accuracies.push(r.accuracy);
        outcomes.extend(r.outcomes);
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    let preds: Vec<usize> = outcomes.iter().map(|o| o.prediction).collect();
    let labels: Vec<usize> = outcomes.iter().map(|o| o.label).collect();
    let m = metrics(&preds, &labels, ds.classes)?;
    Ok(EvalReport {
        protocol: "cv".to_string(),
        fold_accuracies,
        mean_accuracy,
        metrics: m,
        outcomes,
    })
}

/// Hold-out: train on (a stratified fraction of) the training session
/// with a 20 % validation split, test on the second session.
pub fn run_ho(
    train_session: &EegDataset,
    test_session: &EegDataset,
    learner: &dyn Learner,
    train_fraction: f64,
) -> Result<EvalReport> {
    train_session.validate()?;
    test_session.validate()?;
    if train_session.channels != test_session.channels
        || train_session.samples != test_session.samples
        || train_session.sample_rate_hz != test_session.sample_rate_hz
        || train_session.classes != test_session.classes
    {
        return Err(Error::InvalidConfig(
            "train and test sessions have incompatible geometry".into(),
        ));
    }
    let train_ds = subsample_stratified(train_session, train_fraction)?;
    let all: Vec<usize> = (0..train_ds.n_trials()).collect();
    let (train_idx, val_idx) =
        crate::trainer::stratified_val_split(&train_ds.labels(), &all, train_ds.classes, 0.2)?;

    let predictor = learner.fit(&train_ds, &train_idx, &val_idx, 0)?;
    let test_idx: Vec<usize> = (0..test_session.n_trials()).collect();
    let rows = predictor.predict(test_session, &test_idx)?;
    let outcomes: Vec<TrialOutcome> = test_idx
        .iter()
        .zip(rows)
        .map(|(&i, (p, prob))| TrialOutcome {
            index: i,
            label: test_session.trials[i].label,
            prediction: p,
            probability: prob,
        })
        .collect();
    let preds: Vec<usize> = outcomes.iter().map(|o| o.prediction).collect();
    let labels: Vec<usize> = outcomes.iter().map(|o| o.label).collect();
    let m = metrics(&preds, &labels, test_session.classes)?;
    Ok(EvalReport {
        protocol: "ho".to_string(),
        fold_accuracies: vec![m.accuracy],
        mean_accuracy: m.accuracy,
        metrics: m,
        outcomes,
    })
}
