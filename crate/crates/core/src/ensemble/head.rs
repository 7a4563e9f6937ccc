//! Dense head over the concatenated class outputs of frozen early- and
//! late-fusion models.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::chromosome::{fitness, Chromosome};
use crate::error::{Error, Result};
use crate::featurestore::{Dataset, FeatureSequence, Split};
use crate::model::checkpoint::{read_tensor_file, write_tensor_file};
use crate::model::{
    cast, cross_entropy, smoothed_target, softmax, Classifier, FusionModel, Linear, ModelConfig,
    Params, Real,
};
use crate::preprocess::StreamBatch;
use crate::seed::rng_for;
use crate::train::{
    predict_all, scores_from_probs, Adamax, Checkpoint, EpochLog, TieBreak, TrainConfig,
    TrainOutcome,
};

/// `2K -> hidden widths (ReLU) -> K -> softmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHead<F> {
    pub layers: Vec<Linear<F>>,
}

impl<F: Real> EnsembleHead<F> {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, chromosome: &Chromosome, rng: &mut R) -> Self {
        let mut dims = vec![2 * num_classes];
        dims.extend(chromosome.widths());
        dims.push(num_classes);
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Linear::fan_out)
            .collect()
    }

    /// Layer inputs followed by the output logits.
    fn activations(&self, x: Array2<F>) -> Vec<Array2<F>> {
        let mut acts = vec![x];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&acts[i].view());
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(F::zero()));
            }
            acts.push(z);
        }
        acts
    }

    /// Row-wise class probabilities for a batch of `2K` inputs.
    pub fn forward_batch(&self, x: &ArrayView2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Config(format!(
                "ensemble head expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let logits = self.activations(x.to_owned()).pop().expect("logits");
        let mut out = Array2::zeros(logits.raw_dim());
        for (mut row, l) in out.rows_mut().into_iter().zip(logits.rows()) {
            row.assign(&softmax(&l.to_owned()));
        }
        Ok(out)
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, x: &ArrayView2<F>, targets: &Array2<F>) -> Result<(F, Self)> {
        let acts = self.activations(x.to_owned());
        let logits = acts.last().expect("logits");
        let b = cast::<F>(x.nrows() as f64);
        let mut loss = F::zero();
        let mut dy = Array2::zeros(logits.raw_dim());
        for ((mut d, l), t) in dy
            .rows_mut()
            .into_iter()
            .zip(logits.rows())
            .zip(targets.rows())
        {
            let p = softmax(&l.to_owned());
            let t = t.to_vec();
            loss += cross_entropy(p.as_slice().expect("contiguous"), &t);
            d.assign(&((&p - &Array1::from(t)) / b));
        }
        let mut grad = self.zeros_like();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&acts[i].view(), &dy, &mut grad.layers[i], i > 0);
            if let Some(mut dx) = dx {
                // acts[i] is the ReLU output of layer i - 1
                dx.zip_mut_with(&acts[i], |g, &a| {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                });
                dy = dx;
            }
        }
        Ok((loss / b, grad))
    }
}

impl<F: Real> Params<F> for EnsembleHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layer{i}"), f);
        }
    }
}

/// Concatenates the two class-probability vectors and applies the head.
pub fn ensemble_forward<F: Real>(
    early: &[F],
    late: &[F],
    head: &EnsembleHead<F>,
) -> Result<Vec<F>> {
    if early.len() != late.len() || early.len() + late.len() != head.input_dim() {
        return Err(Error::Config(format!(
            "ensemble head expects two {}-class inputs, got {} and {}",
            head.num_classes(),
            early.len(),
            late.len()
        )));
    }
    let x = Array2::from_shape_vec((1, head.input_dim()), [early, late].concat())
        .expect("shape checked");
    Ok(head.forward_batch(&x.view())?.into_raw_vec_and_offset().0)
}

/// Frozen base models plus a trained head.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub early: FusionModel<f32>,
    pub late: FusionModel<f32>,
    pub chromosome: Chromosome,
    pub head: EnsembleHead<f32>,
}

impl Classifier for EnsembleModel {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn class_probs(&self, batch: &StreamBatch) -> Result<Vec<f32>> {
        let e = self.early.class_probs(batch)?;
        let l = self.late.class_probs(batch)?;
        ensemble_forward(&e, &l, &self.head)
    }
}

pub const ENSEMBLE_KIND: &str = "ensemble";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleFileConfig {
    chromosome: Chromosome,
    num_classes: usize,
    early: ModelConfig,
    late: ModelConfig,
}

impl EnsembleModel {
    pub fn save(&self, path: impl AsRef<Path>, meta: Value) -> Result<()> {
        let config = EnsembleFileConfig {
            chromosome: self.chromosome,
            num_classes: self.head.num_classes(),
            early: self.early.config.clone(),
            late: self.late.config.clone(),
        };
        write_tensor_file(
            path,
            ENSEMBLE_KIND,
            serde_json::to_value(config).expect("config serializes"),
            meta,
            &[
                ("early.", &self.early),
                ("late.", &self.late),
                ("head.", &self.head),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Value)> {
        let path = path.as_ref();
        let file = read_tensor_file(path)?;
        if file.header.kind != ENSEMBLE_KIND {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "expected an {ENSEMBLE_KIND} checkpoint, found {}",
                    file.header.kind
                ),
            });
        }
        let cfg: EnsembleFileConfig =
            serde_json::from_value(file.header.config.clone()).map_err(|e| Error::json(path, e))?;
        let early = FusionModel::from_tensor_file(&file, "early.", cfg.early, path)?;
        let late = FusionModel::from_tensor_file(&file, "late.", cfg.late, path)?;
        let mut head = EnsembleHead::new(cfg.num_classes, &cfg.chromosome, &mut rng_for(0, &[]));
        file.load_into("head.", &mut head, path)?;
        let model = Self {
            early,
            late,
            chromosome: cfg.chromosome,
            head,
        };
        Ok((model, file.header.meta))
    }
}

/// Base-model outputs for the train and validation splits, computed once.
#[derive(Debug, Clone)]
pub struct BaseOutputs {
    pub num_classes: usize,
    /// `n x 2K`: early probabilities then late probabilities.
    pub train: Array2<f32>,
    pub train_labels: Vec<usize>,
    pub val: Array2<f32>,
    pub val_labels: Vec<usize>,
}

fn concat_outputs(
    early: &FusionModel<f32>,
    late: &FusionModel<f32>,
    records: &[&FeatureSequence],
    seq_len: usize,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let k = early.num_classes();
    let e = predict_all(early, records, seq_len)?;
    let l = predict_all(late, records, seq_len)?;
    let mut x = Array2::zeros((records.len(), 2 * k));
    for (i, ((pe, _), (pl, _))) in e.iter().zip(&l).enumerate() {
        x.row_mut(i)
            .assign(&Array1::from([pe.as_slice(), pl.as_slice()].concat()));
    }
    let labels = records
        .iter()
        .map(|r| {
            r.label_id
                .map(|l| l as usize)
                .ok_or_else(|| Error::Argument("ensemble training records need labels".into()))
        })
        .collect::<Result<_>>()?;
    Ok((x, labels))
}

impl BaseOutputs {
    pub fn compute(
        early: &FusionModel<f32>,
        late: &FusionModel<f32>,
        dataset: &Dataset,
        seq_len: usize,
    ) -> Result<Self> {
        let k = dataset.num_classes();
        if early.num_classes() != k || late.num_classes() != k {
            return Err(Error::Config(format!(
                "base models predict {} and {} classes, dataset has {k}",
                early.num_classes(),
                late.num_classes()
            )));
        }
        let (train, train_labels) =
            concat_outputs(early, late, &dataset.split(Split::Train), seq_len)?;
        let (val, val_labels) = concat_outputs(early, late, &dataset.split(Split::Val), seq_len)?;
        if train_labels.is_empty() || val_labels.is_empty() {
            return Err(Error::Config(
                "ensemble training needs non-empty train and val splits".into(),
            ));
        }
        Ok(Self {
            num_classes: k,
            train,
            train_labels,
            val,
            val_labels,
        })
    }
}

/// Trains a head on cached base outputs and returns the epoch with the best
/// validation Top-1, lower validation NLL deciding ties.
pub fn train_head(
    base: &BaseOutputs,
    chromosome: &Chromosome,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<EnsembleHead<f32>>> {
    config.validate()?;
    let k = base.num_classes;
    let mut head = EnsembleHead::<f32>::new(k, chromosome, &mut rng_for(config.seed, &[0]));
    let targets: Vec<Vec<f32>> = (0..k)
        .map(|c| smoothed_target(c, k, config.label_smoothing))
        .collect::<Result<_>>()?;
    let mut opt = Adamax::new(config.optimizer(), head.num_params());
    let mut best: Option<Checkpoint<EnsembleHead<f32>>> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let n = base.train_labels.len();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, &[1, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = base.train.select(Axis(0), batch);
            let mut t = Array2::zeros((batch.len(), k));
            for (mut row, &i) in t.rows_mut().into_iter().zip(batch) {
                row.assign(&Array1::from(targets[base.train_labels[i]].clone()));
            }
            let (loss, grad) = head.loss_and_grad(&x.view(), &t)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite ensemble loss in epoch {epoch}"
                )));
            }
            opt.step(&mut head, &grad)?;
            epoch_loss += loss as f64 * batch.len() as f64;
        }
        let probs: Vec<Vec<f32>> = head
            .forward_batch(&base.val.view())?
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        let eval = scores_from_probs(&probs, &base.val_labels, k, 0.0)?;
        let entry = EpochLog::new(epoch, epoch_loss / n as f64, &eval);
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<ensemble log>", e))?;
        }
        history.push(entry);
        if Checkpoint::improves_on(&eval, best.as_ref(), TieBreak::LowerNll) {
            best = Some(Checkpoint::new(head.clone(), epoch, &eval));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        history,
    })
}

/// Trains only the head; the base models are cloned into the result as-is.
pub fn train_ensemble(
    early: &FusionModel<f32>,
    late: &FusionModel<f32>,
    chromosome: &Chromosome,
    dataset: &Dataset,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<EnsembleModel>> {
    config.validate()?;
    let base = BaseOutputs::compute(early, late, dataset, config.seq_len)?;
    let out = train_head(&base, chromosome, config, log)?;
    let wrap = |head: EnsembleHead<f32>| EnsembleModel {
        early: early.clone(),
        late: late.clone(),
        chromosome: *chromosome,
        head,
    };
    Ok(TrainOutcome {
        best: out.best.map(wrap),
        history: out.history,
    })
}

/// GA fitness: `exp(val_top1% / 2.5)` after training a head for
/// `config.epochs` epochs with the seed handed out by the GA.
pub fn head_fitness<'a>(
    base: &'a BaseOutputs,
    config: &'a TrainConfig,
) -> impl Fn(&Chromosome, u64) -> Result<f64> + Sync + 'a {
    move |c, seed| {
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let out = train_head(base, c, &cfg, None)?;
        Ok(fitness(100.0 * out.best.val_top1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(widths: &[u32], k: usize, seed: u64) -> EnsembleHead<f64> {
        EnsembleHead::new(
            k,
            &Chromosome::from_widths(widths).unwrap(),
            &mut rng_for(seed, &[]),
        )
    }

    #[test]
    fn shapes_follow_the_chromosome() {
        let h = head(&[310, 693, 465, 638, 513, 406], 101, 0);
        assert_eq!(h.input_dim(), 202);
        assert_eq!(h.num_classes(), 101);
        assert_eq!(h.hidden_widths(), vec![310, 693, 465, 638, 513, 406]);
        let p = vec![1.0 / 101.0; 101];
        let out = ensemble_forward(&p, &p, &h).unwrap();
        assert_eq!(out.len(), 101);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            ensemble_forward(&p[..100], &p, &h),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn routing_weights_follow_the_late_model() {
        let k = 5;
        let mut h = head(&[k as u32], k, 1);
        // first layer copies the late half, second is an amplified identity
        h.layers[0].weight.fill(0.0);
        h.layers[1].weight.fill(0.0);
        for c in 0..k {
            h.layers[0].weight[[k + c, c]] = 1.0;
            h.layers[1].weight[[c, c]] = 10.0;
        }
        let mut rng = rng_for(7, &[]);
        for _ in 0..50 {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (e, l) = (draw(&mut rng), draw(&mut rng));
            let out = ensemble_forward(&e, &l, &h).unwrap();
            let am = |v: &[f64]| (0..k).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            assert_eq!(am(&out), am(&l));
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let h = head(&[6, 4], 3, 2);
        let mut rng = rng_for(3, &[]);
        let x = Array2::from_shape_simple_fn((5, 6), || rng.random_range(0.0..1.0));
        let t = Array2::from_shape_fn((5, 3), |(i, j)| if i % 3 == j { 0.9 } else { 0.05 });
        let (_, g) = h.loss_and_grad(&x.view(), &t).unwrap();
        let g = g.to_flat();
        let step = 1e-6;
        for i in 0..h.num_params() {
            let shifted = |s: f64| {
                let mut d = vec![0.0; g.len()];
                d[i] = s;
                let mut m = h.clone();
                m.add_flat(&d, 1.0);
                m.loss_and_grad(&x.view(), &t).unwrap().0
            };
            let fd = (shifted(step) - shifted(-step)) / (2.0 * step);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "coordinate {i}: {} vs {fd}", g[i]);
        }
    }
}
