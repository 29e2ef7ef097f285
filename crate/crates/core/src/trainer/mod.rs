//! Training loop, evaluation and ablation runs.

mod adam;
mod metrics;

pub use adam::{AdamConfig, AdamState};
pub use metrics::{
    metrics_from_probabilities, ClassMetrics, ConfusionMatrix, EpochRecord, MacroMetrics, MetricsReport,
};

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::Label;
use crate::error::{Error, Result};
use crate::layers::{bce_loss, Mode};
use crate::model::{build_variant, forward, forward_on_tape, ArchitectureConfig, ModelParams, Variant};
use crate::pipeline::{Example, PreparedData};
use crate::rng::{derive_seed, substream};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation-loss improvement before stopping; `None` disables.
    /// Serialized as a count where 0 means disabled.
    #[serde(with = "patience_count")]
    pub patience: Option<usize>,
    pub seed: u64,
    pub threshold: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 35,
            batch_size: 8,
            patience: Some(8),
            seed: 7,
            threshold: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be ≥ 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

mod patience_count {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(p.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        Ok(Some(usize::deserialize(d)?).filter(|&n| n > 0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: Option<usize>,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        match self.patience {
            Some(p) if self.wait >= p => StopDecision::Stop,
            _ => StopDecision::Continue,
        }
    }
}

/// Anything trainable epoch by epoch with restorable state.
pub trait Learner {
    type Snapshot;
    /// Returns (loss, accuracy) over the training set.
    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64)>;
    /// Returns (loss, accuracy) over the validation set.
    fn validate(&mut self) -> Result<(f64, f64)>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub history: Vec<EpochRecord>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Runs epochs until the cap or early stop, then restores the best snapshot.
pub fn run_epochs<L: Learner>(learner: &mut L, max_epochs: usize, patience: Option<usize>) -> Result<FitSummary> {
    let mut stopper = EarlyStopping::new(patience);
    let mut history = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    for epoch in 0..max_epochs {
        let (train_loss, train_accuracy) = learner.train_epoch(epoch)?;
        let (val_loss, val_accuracy) = learner.validate()?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = Some(learner.snapshot()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let best_epoch = match (stopper.best_epoch, best) {
        (Some(e), Some(s)) => {
            learner.restore(s);
            e
        }
        // Validation loss never became finite; keep the last parameters.
        _ => history.len() - 1,
    };
    Ok(FitSummary {
        history,
        best_epoch,
        stopped_early,
    })
}

/// Loss and parameter gradients for one example.
pub fn example_gradients(
    params: &ModelParams,
    example: &Example,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(f64, f64, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let video = tape.leaf(example.video.clone());
    let features = tape.leaf(example.features.clone());
    let mut rng = substream(dropout_seed, "dropout");
    let p = forward_on_tape(params, &mut tape, &vars, video, features, mode, &mut rng, None)?;
    let prob = tape.value(p)?.item()?;
    let loss = tape.bce(p, &[example.label.target()])?;
    let loss_value = tape.value(loss)?.item()?;
    let mut grads = tape.backward(loss)?;
    let out = params
        .tensors
        .iter()
        .map(|(name, t)| (name.clone(), grads.take(vars[name]).unwrap_or_else(|| Tensor::zeros(t.shape()))))
        .collect();
    Ok((loss_value, prob, out))
}

/// Eval-mode probabilities of stalking, in input order.
pub fn predict(params: &ModelParams, examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|e| forward(params, &e.video, &e.features, Mode::Eval, 0))
        .collect()
}

fn loss_and_accuracy(probs: &[f64], labels: &[Label], threshold: f64) -> Result<(f64, f64)> {
    let targets: Vec<f64> = labels.iter().map(|l| l.target()).collect();
    let loss = bce_loss(probs, &targets)?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| Label::from_probability(p, threshold) == l)
        .count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

struct NetworkLearner<'a> {
    params: ModelParams,
    adam: AdamState,
    train: &'a [Example],
    val: &'a [Example],
    config: &'a TrainConfig,
}

impl Learner for NetworkLearner<'_> {
    type Snapshot = (ModelParams, AdamState);

    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut substream(self.config.seed, &format!("shuffle/epoch{epoch}")));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            let params = &self.params;
            let seed = self.config.seed;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let s = derive_seed(seed, &format!("dropout/epoch{epoch}/sample{i}"));
                    example_gradients(params, &self.train[i], Mode::Train, s)
                })
                .collect::<Result<_>>()?;
            // Fixed-order reduction keeps the sum independent of thread scheduling.
            let scale = 1.0 / batch.len() as f64;
            let mut total: IndexMap<String, Tensor> = params
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect();
            for ((loss, prob, grads), &i) in results.iter().zip(batch) {
                loss_sum += loss;
                if Label::from_probability(*prob, self.config.threshold) == self.train[i].label {
                    correct += 1;
                }
                for (name, g) in grads {
                    let acc = total.get_mut(name).expect("same parameter set").data_mut();
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += v * scale;
                    }
                }
            }
            self.adam.step(&mut self.params.tensors, &total)?;
        }
        let n = self.train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    fn validate(&mut self) -> Result<(f64, f64)> {
        let probs = predict(&self.params, self.val)?;
        let labels: Vec<Label> = self.val.iter().map(|e| e.label).collect();
        loss_and_accuracy(&probs, &labels, self.config.threshold)
    }

    fn snapshot(&self) -> Self::Snapshot {
        (self.params.clone(), self.adam.clone())
    }

    fn restore(&mut self, (params, adam): Self::Snapshot) {
        self.params = params;
        self.adam = adam;
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub summary: FitSummary,
    /// Validation metrics of the restored parameters, with the epoch history.
    pub report: MetricsReport,
}

/// Trains `params` on `train`, early-stopping on `val` loss.
pub fn train(params: ModelParams, train: &[Example], val: &[Example], config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    params.validate()?;
    let adam = AdamState::new(&params.tensors, config.adam);
    let mut learner = NetworkLearner {
        params,
        adam,
        train,
        val,
        config,
    };
    let summary = run_epochs(&mut learner, config.max_epochs, config.patience)?;
    let mut report = evaluate(&learner.params, val, config.threshold)?;
    report.history = summary.history.clone();
    Ok(TrainResult {
        params: learner.params,
        summary,
        report,
    })
}

pub fn evaluate(params: &ModelParams, examples: &[Example], threshold: f64) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one example".into()));
    }
    let probs = predict(params, examples)?;
    let labels: Vec<Label> = examples.iter().map(|e| e.label).collect();
    Ok(metrics_from_probabilities(&probs, &labels, threshold))
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: ModelParams,
    pub summary: FitSummary,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| variant | accuracy | macro P | macro R | macro F | best epoch | epochs |\n|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
                r.variant,
                r.test.accuracy,
                r.test.macro_avg.precision,
                r.test.macro_avg.recall,
                r.test.macro_avg.f_measure,
                r.summary.best_epoch + 1,
                r.summary.history.len()
            );
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.rows
                .iter()
                .map(|r| {
                    (
                        r.variant.to_string(),
                        serde_json::json!({
                            "test": r.test,
                            "best_epoch": r.summary.best_epoch,
                            "epochs_run": r.summary.history.len(),
                        }),
                    )
                })
                .collect(),
        )
    }
}

/// Trains each variant from the same seed on identical splits and scores it on the test split.
pub fn run_ablation(
    data: &PreparedData,
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    variants: &[Variant],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let params = build_variant(v, arch, config.seed)?;
        let result = train(params, &data.train, &data.val, config)?;
        let test = evaluate(&result.params, &data.test, config.threshold)?;
        rows.push(AblationRow {
            variant: v,
            params: result.params,
            summary: result.summary,
            test,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Validation losses come from a script; the "parameters" are the epoch count.
    struct Scripted {
        losses: Vec<f64>,
        epoch: usize,
    }

    impl Learner for Scripted {
        type Snapshot = usize;
        fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
            self.epoch = epoch;
            Ok((0.0, 0.0))
        }
        fn validate(&mut self) -> Result<(f64, f64)> {
            Ok((self.losses[self.epoch], 0.0))
        }
        fn snapshot(&self) -> usize {
            self.epoch
        }
        fn restore(&mut self, s: usize) {
            self.epoch = s;
        }
    }

    #[test]
    fn stops_after_patience_and_restores_best() {
        let mut l = Scripted {
            losses: vec![1.0, 0.8, 0.9, 0.85, 0.95, 0.7, 0.6],
            epoch: 0,
        };
        let s = run_epochs(&mut l, 7, Some(3)).unwrap();
        assert!(s.stopped_early);
        assert_eq!(s.history.len(), 5);
        assert_eq!(s.best_epoch, 1);
        assert_eq!(l.epoch, 1);
        let min = s.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(s.history[s.best_epoch].val_loss, min);
    }

    #[test]
    fn unlimited_patience_runs_all_epochs() {
        let mut l = Scripted {
            losses: vec![1.0; 4],
            epoch: 0,
        };
        let s = run_epochs(&mut l, 1, None).unwrap();
        assert_eq!(s.history.len(), 1);
        let s = run_epochs(&mut l, 4, None).unwrap();
        assert_eq!((s.history.len(), s.best_epoch, s.stopped_early), (4, 0, false));
    }
}
