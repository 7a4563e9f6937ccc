//! Mini-batch training with best-validation checkpoint selection, and
//! single-model evaluation.

mod adamax;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamax::{adamax_step, Adamax, AdamaxConfig, AdamaxState};

use crate::error::{Error, Result};
use crate::featurestore::{Dataset, FeatureSequence, Split};
use crate::metrics::{argmax, confusion_matrix, topk_accuracy};
use crate::model::{
    cast, smoothed_target, Classifier, FusionModel, LossWeights, Mode, ModelConfig, Params, Real,
};
use crate::preprocess::{assemble_streams, StreamBatch, DEFAULT_SEQ_LEN};
use crate::seed::rng_for;

/// Samples per parallel work unit; gradients are summed within a unit and
/// then across units in index order, so results do not depend on thread count.
const GRAD_CHUNK: usize = 4;

/// Seed for validation/test length normalization.
pub const EVAL_SEED: u64 = 0x5EED_E7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Streams A (hands), B (lips), C (arms + geometry).
    pub stream_toggles: [bool; 3],
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0012,
            weight_decay: 0.0001,
            epochs: 200,
            batch_size: 32,
            label_smoothing: 0.15,
            loss_weights: LossWeights::default(),
            seed: 0,
            stream_toggles: [true; 3],
            seq_len: DEFAULT_SEQ_LEN,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings used for the ensemble head.
    pub fn ensemble_default() -> Self {
        Self {
            learning_rate: 0.0015,
            weight_decay: 0.0004,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "epochs, batch size and sequence length must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        if !self.stream_toggles.iter().any(|s| *s) {
            return Err(Error::Config(
                "at least one stream must stay enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamaxConfig {
        AdamaxConfig::new(self.learning_rate, self.weight_decay)
    }
}

/// Resolution of equal validation Top-1 between epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    EarliestEpoch,
    /// Prefer the lower validation NLL, so a saturated accuracy still picks
    /// the better calibrated epoch.
    LowerNll,
}

/// Model snapshot with the validation scores of its epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<M> {
    pub model: M,
    /// 1-based.
    pub epoch: usize,
    pub val_top1: f64,
    pub val_top5: f64,
    pub val_nll: f64,
}

impl<M> Checkpoint<M> {
    pub fn new(model: M, epoch: usize, eval: &Evaluation) -> Self {
        Self {
            model,
            epoch,
            val_top1: eval.top1,
            val_top5: eval.top5,
            val_nll: eval.nll,
        }
    }

    /// Whether `eval` beats `best`: higher Top-1 wins, equal Top-1 is
    /// settled by `tie`.
    pub fn improves_on(eval: &Evaluation, best: Option<&Self>, tie: TieBreak) -> bool {
        best.is_none_or(|b| {
            eval.top1 > b.val_top1
                || (tie == TieBreak::LowerNll && eval.top1 == b.val_top1 && eval.nll < b.val_nll)
        })
    }

    pub fn map<N>(self, f: impl FnOnce(M) -> N) -> Checkpoint<N> {
        Checkpoint {
            model: f(self.model),
            epoch: self.epoch,
            val_top1: self.val_top1,
            val_top5: self.val_top5,
            val_nll: self.val_nll,
        }
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "epoch": self.epoch,
            "val_top1": self.val_top1,
            "val_top5": self.val_top5,
            "val_nll": self.val_nll,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub val_nll: f64,
}

impl EpochLog {
    pub fn new(epoch: usize, train_loss: f64, eval: &Evaluation) -> Self {
        Self {
            epoch,
            train_loss,
            val_top1: eval.top1,
            val_top5: eval.top5,
            val_nll: eval.nll,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub best: Checkpoint<M>,
    pub history: Vec<EpochLog>,
}

/// Sums per-sample gradients in a fixed order.
pub(crate) fn summed_gradients<T, G, P, F>(items: &[T], per_item: G) -> Result<(P, f64)>
where
    T: Sync,
    F: Real,
    P: Params<F> + Send,
    G: Fn(usize, &T) -> Result<(P, f64)> + Sync,
{
    let partials: Vec<Result<(P, f64)>> = items
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc: Option<(P, f64)> = None;
            for (j, item) in chunk.iter().enumerate() {
                let (g, l) = per_item(c * GRAD_CHUNK + j, item)?;
                acc = Some(match acc {
                    None => (g, l),
                    Some((mut a, al)) => {
                        a.add_flat(&g.to_flat(), F::one());
                        (a, al + l)
                    }
                });
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect();
    let mut total: Option<(P, f64)> = None;
    for p in partials {
        let (g, l) = p?;
        total = Some(match total {
            None => (g, l),
            Some((mut a, al)) => {
                a.add_flat(&g.to_flat(), F::one());
                (a, al + l)
            }
        });
    }
    total.ok_or_else(|| Error::Argument("empty batch".into()))
}

fn labelled(records: &[&FeatureSequence]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            r.label_id
                .map(|l| l as usize)
                .ok_or_else(|| Error::Argument("training records need labels".into()))
        })
        .collect()
}

/// Trains an early- or late-fusion model and returns the checkpoint of the
/// epoch with the best validation Top-1 (earliest on ties).
///
/// One JSON object per epoch is written to `log` when given.
pub fn train_model(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<FusionModel<f32>>> {
    config.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let k = dataset.num_classes();
    let mut mcfg = model_config.clone();
    mcfg.num_classes = k;
    mcfg.streams = config.stream_toggles;
    let mut model = FusionModel::<f32>::new(mcfg, &mut rng_for(config.seed, &[0]))?;

    let labels = labelled(&train)?;
    let targets: Vec<Vec<f32>> = (0..k)
        .map(|c| smoothed_target(c, k, config.label_smoothing))
        .collect::<Result<_>>()?;
    let embeddings = &dataset.embeddings;
    let mut opt = Adamax::new(config.optimizer(), model.num_params());
    let mut best: Option<Checkpoint<FusionModel<f32>>> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let dropout = model.config.dropout;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[1, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (mut grad, loss) = summed_gradients(batch, |pos, &idx| {
                let mut rng = rng_for(config.seed, &[2, epoch as u64, b as u64, pos as u64]);
                let sb = assemble_streams(train[idx], config.seq_len, &mut rng);
                let label = labels[idx];
                let mut mode = Mode::Train {
                    dropout,
                    rng: &mut rng,
                };
                let (parts, g) = model.loss_and_grad(
                    &sb,
                    &targets[label],
                    embeddings.get(label as u32),
                    config.loss_weights,
                    &mut mode,
                )?;
                Ok((g, parts.total as f64))
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss in epoch {epoch}"
                )));
            }
            grad.scale(cast(1.0 / batch.len() as f64));
            opt.step(&mut model, &grad)?;
            epoch_loss += loss;
        }
        let eval = evaluate(&model, &val, k, config.seq_len)?;
        let entry = EpochLog::new(epoch, epoch_loss / train.len() as f64, &eval);
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<train log>", e))?;
        }
        history.push(entry);
        if Checkpoint::improves_on(&eval, best.as_ref(), TieBreak::EarliestEpoch) {
            best = Some(Checkpoint::new(model.clone(), epoch, &eval));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1: f64,
    pub top5: f64,
    /// Mean negative log-likelihood of the true class.
    pub nll: f64,
    pub confusion: Vec<Vec<u64>>,
    /// Wall-clock milliseconds per record, excluded from reproducible reports.
    #[serde(skip)]
    pub mean_latency_ms: f64,
}

/// Deterministic stream batch for evaluating record `index`.
pub fn eval_batch(record: &FeatureSequence, index: usize, seq_len: usize) -> StreamBatch {
    assemble_streams(record, seq_len, &mut rng_for(EVAL_SEED, &[index as u64]))
}

/// Class probabilities for every record, in order.
pub fn predict_all(
    model: &dyn Classifier,
    records: &[&FeatureSequence],
    seq_len: usize,
) -> Result<Vec<(Vec<f32>, f64)>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let batch = eval_batch(r, i, seq_len);
            let start = Instant::now();
            let probs = model.class_probs(&batch)?;
            Ok((probs, start.elapsed().as_secs_f64() * 1e3))
        })
        .collect()
}

pub fn evaluate(
    model: &dyn Classifier,
    records: &[&FeatureSequence],
    num_classes: usize,
    seq_len: usize,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let labels = labelled(records)?;
    let out = predict_all(model, records, seq_len)?;
    let latency = out.iter().map(|(_, ms)| ms).sum::<f64>() / out.len() as f64;
    let probs: Vec<Vec<f32>> = out.into_iter().map(|(p, _)| p).collect();
    scores_from_probs(&probs, &labels, num_classes, latency)
}

fn mean_nll(probs: &[Vec<f32>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -(p[l] as f64).max(1e-12).ln())
        .sum();
    total / probs.len() as f64
}

pub(crate) fn scores_from_probs(
    probs: &[Vec<f32>],
    labels: &[usize],
    num_classes: usize,
    latency: f64,
) -> Result<Evaluation> {
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(Evaluation {
        top1: topk_accuracy(probs, labels, 1)?,
        top5: topk_accuracy(probs, labels, 5)?,
        nll: mean_nll(probs, labels),
        confusion: confusion_matrix(&preds, labels, num_classes)?,
        mean_latency_ms: latency,
    })
}
