//! Command-line entry points.
//!
//! Every command reads an optional JSON [`RunConfig`], applies flag
//! overrides, logs progress to stderr and writes its artifacts under
//! `--out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig, DecodeTrace};
use crate::ensemble::{
    head_fitness, run_ga, train_ensemble, BaseOutputs, Chromosome, EnsembleModel, GaConfig,
    ENSEMBLE_KIND,
};
use crate::error::{Error, Result};
use crate::featurestore::{
    generate_synthetic_dataset, load_record, sample_sentences, save_record, write_dataset, Dataset,
    Split, SynthConfig,
};
use crate::metrics::{sentence_report, DecodedSentence};
use crate::model::checkpoint::{read_tensor_file, FUSION_KIND};
use crate::model::{Architecture, Classifier, FusionModel, ModelConfig};
use crate::train::{evaluate, train_model, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "signfuse",
    version,
    about = "Multi-stream sign-word recognition experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train an early- or late-fusion model.
    Train(TrainArgs),
    /// Search the ensemble head structure with the genetic algorithm.
    Ga(GaArgs),
    /// Train an ensemble head over two frozen models.
    Ensemble(EnsembleArgs),
    /// Score a model on a dataset split.
    Eval(EvalArgs),
    /// Build concatenated word sequences from a dataset split.
    Sentences(SentencesArgs),
    /// Decode concatenated sequences and report edit errors.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the run configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Recordings per signer and class.
    #[arg(long, default_value_t = 5)]
    pub per_class: usize,
    #[arg(long, default_value_t = 5)]
    pub signers: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// Manifest file or dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Enabled streams, e.g. `A,C` (A hands, B lips, C arms and geometry).
    #[arg(long)]
    pub streams: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaseModels {
    /// Early-fusion checkpoint.
    #[arg(long)]
    pub early: PathBuf,
    /// Late-fusion checkpoint.
    #[arg(long)]
    pub late: PathBuf,
}

#[derive(Debug, Args)]
pub struct GaArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub models: BaseModels,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Head training epochs per fitness evaluation.
    #[arg(long, default_value_t = 10)]
    pub budget_epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub models: BaseModels,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Layer count followed by the hidden widths.
    #[arg(long, default_value = "2,64,64")]
    pub chromosome: Chromosome,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fusion or ensemble checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Metrics JSON path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SentencesArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 2)]
    pub min_words: usize,
    #[arg(long, default_value_t = 5)]
    pub max_words: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Directory written by `sentences`.
    #[arg(long)]
    pub sentences: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// JSON run configuration. Every field is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Manifest file or dataset directory, relative to the working directory.
    pub data: Option<PathBuf>,
    pub arch: Option<Architecture>,
    /// When set, replaces the seeds of `train`, `ensemble` and `ga`.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub ensemble: TrainConfig,
    pub ga: GaConfig,
    pub decode: DecodeConfig,
    /// Model structures; class counts are taken from the dataset.
    pub early_model: ModelConfig,
    pub late_model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            arch: None,
            seed: None,
            train: TrainConfig::default(),
            ensemble: TrainConfig::ensemble_default(),
            ga: GaConfig::default(),
            decode: DecodeConfig::default(),
            early_model: ModelConfig::early(0),
            late_model: ModelConfig::late(0),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `common.config` if given and applies the seed override.
    fn resolve(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = Some(s);
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
            cfg.ensemble.seed = s;
            cfg.ga.seed = s;
        }
        cfg.train.validate()?;
        cfg.ensemble.validate()?;
        cfg.ga.validate()?;
        cfg.decode.validate()?;
        Ok(cfg)
    }

    fn data_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        let p = flag
            .clone()
            .or_else(|| self.data.clone())
            .ok_or_else(|| Error::Config("no dataset given; pass --data or set \"data\"".into()))?;
        Ok(if p.is_dir() {
            p.join("manifest.json")
        } else {
            p
        })
    }
}

/// Parses `A,B,C`-style stream lists.
pub fn parse_streams(s: &str) -> Result<[bool; 3]> {
    let mut on = [false; 3];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let i = match part.to_ascii_uppercase().as_str() {
            "A" => 0,
            "B" => 1,
            "C" => 2,
            other => {
                return Err(Error::Argument(format!(
                    "unknown stream {other:?}; use A, B or C"
                )))
            }
        };
        on[i] = true;
    }
    if !on.iter().any(|s| *s) {
        return Err(Error::Argument(
            "at least one stream must be enabled".into(),
        ));
    }
    Ok(on)
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Argument(format!("unknown split {s:?}; use train, val or test")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    info!("loading dataset {}", path.display());
    Dataset::load(path)
}

/// Loads a fusion or ensemble checkpoint.
pub fn load_classifier(path: &Path) -> Result<Box<dyn Classifier>> {
    let kind = read_tensor_file(path)?.header.kind;
    match kind.as_str() {
        FUSION_KIND => Ok(Box::new(FusionModel::<f32>::load(path)?.0)),
        ENSEMBLE_KIND => Ok(Box::new(EnsembleModel::load(path)?.0)),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unknown checkpoint kind {other:?}"),
        }),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Ga(a) => cmd_ga(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sentences(a) => cmd_sentences(a),
        Command::Decode(a) => cmd_decode(a),
    }
}

pub fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_classes: a.classes,
        n_per_signer_class: a.per_class,
        n_signers: a.signers,
        noise_sigma: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg)?;
    write_dataset(&ds, &a.out)?;
    info!("wrote {} records to {}", ds.records.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    arch: Architecture,
    epoch: usize,
    val_top1: f64,
    val_top5: f64,
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.common)?;
    let arch = a.arch.or(cfg.arch).ok_or_else(|| {
        Error::Config("no architecture given; pass --arch or set \"arch\"".into())
    })?;
    cfg.arch = Some(arch);
    if let Some(s) = &a.streams {
        cfg.train.stream_toggles = parse_streams(s)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    let data = cfg.data_path(&a.data)?;
    cfg.data = Some(data.clone());
    let dataset = load_dataset(&data)?;
    let model_cfg = match arch {
        Architecture::Early => &cfg.early_model,
        Architecture::Late => &cfg.late_model,
    };

    create_dir(&a.out)?;
    write_json(&a.out.join("run_config.json"), &cfg)?;
    let mut log = create_file(&a.out.join("train_log.jsonl"))?;
    info!(
        "training {arch} fusion for {} epochs, streams {:?}",
        cfg.train.epochs, cfg.train.stream_toggles
    );
    let out = train_model(&dataset, model_cfg, &cfg.train, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&a.out, e))?;
    let best = &out.best;
    best.model.save(a.out.join("model.ckpt"), best.meta())?;
    write_json(
        &a.out.join("train_summary.json"),
        &TrainSummary {
            arch,
            epoch: best.epoch,
            val_top1: best.val_top1,
            val_top5: best.val_top5,
        },
    )?;
    info!(
        "best epoch {} with val top-1 {:.4}",
        best.epoch, best.val_top1
    );
    Ok(())
}

fn load_bases(m: &BaseModels) -> Result<(FusionModel<f32>, FusionModel<f32>)> {
    let (early, _) = FusionModel::<f32>::load(&m.early)?;
    let (late, _) = FusionModel::<f32>::load(&m.late)?;
    if early.config.arch != Architecture::Early || late.config.arch != Architecture::Late {
        return Err(Error::Argument(
            "--early and --late must point to early and late fusion checkpoints".into(),
        ));
    }
    Ok((early, late))
}

#[derive(Debug, Serialize)]
struct GaSummary {
    chromosome: String,
    genes: Chromosome,
    fitness: f64,
}

pub fn cmd_ga(a: GaArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.common)?;
    cfg.ensemble.epochs = a.budget_epochs;
    cfg.ensemble.validate()?;
    let data = cfg.data_path(&a.data)?;
    let dataset = load_dataset(&data)?;
    let (early, late) = load_bases(&a.models)?;
    let base = BaseOutputs::compute(&early, &late, &dataset, cfg.ensemble.seq_len)?;

    create_dir(&a.out)?;
    let mut log = create_file(&a.out.join("ga_history.jsonl"))?;
    info!(
        "running {} generations of {} chromosomes, {} epochs per fitness evaluation",
        cfg.ga.generations, cfg.ga.population_size, a.budget_epochs
    );
    let out = run_ga(head_fitness(&base, &cfg.ensemble), &cfg.ga, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&a.out, e))?;
    write_json(
        &a.out.join("best_chromosome.json"),
        &GaSummary {
            chromosome: out.best.to_string(),
            genes: out.best,
            fitness: out.best_fitness,
        },
    )?;
    info!(
        "best chromosome {} with fitness {:.6e}",
        out.best, out.best_fitness
    );
    Ok(())
}

pub fn cmd_ensemble(a: EnsembleArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.ensemble.epochs = e;
    }
    cfg.ensemble.validate()?;
    let data = cfg.data_path(&a.data)?;
    let dataset = load_dataset(&data)?;
    let (early, late) = load_bases(&a.models)?;

    create_dir(&a.out)?;
    let mut log = create_file(&a.out.join("ensemble_log.jsonl"))?;
    info!(
        "training ensemble head {} for {} epochs",
        a.chromosome, cfg.ensemble.epochs
    );
    let out = train_ensemble(
        &early,
        &late,
        &a.chromosome,
        &dataset,
        &cfg.ensemble,
        Some(&mut log),
    )?;
    log.flush().map_err(|e| Error::io(&a.out, e))?;
    let best = &out.best;
    best.model.save(a.out.join("ensemble.ckpt"), best.meta())?;
    let mut meta = best.meta();
    meta["chromosome"] = a.chromosome.to_string().into();
    write_json(&a.out.join("ensemble_summary.json"), &meta)?;
    info!(
        "best epoch {} with val top-1 {:.4}",
        best.epoch, best.val_top1
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: Split,
    records: usize,
    top1: f64,
    top5: f64,
    confusion: Vec<Vec<u64>>,
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.common)?;
    let split = parse_split(&a.split)?;
    let data = cfg.data_path(&a.data)?;
    let dataset = load_dataset(&data)?;
    let model = load_classifier(&a.model)?;
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::Argument(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let records = dataset.split(split);
    let eval = evaluate(
        model.as_ref(),
        &records,
        dataset.num_classes(),
        cfg.train.seq_len,
    )?;
    info!(
        "{} records: top-1 {:.4}, top-5 {:.4}, {:.2} ms per record",
        records.len(),
        eval.top1,
        eval.top5,
        eval.mean_latency_ms
    );
    let report = EvalReport {
        split,
        records: records.len(),
        top1: eval.top1,
        top5: eval.top5,
        confusion: eval.confusion,
    };
    match &a.out {
        Some(p) => write_json(p, &report),
        None => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEntry {
    /// Record file name relative to the sentence directory.
    pub file: String,
    pub labels: Vec<u32>,
    pub words: Vec<String>,
}

/// Index written next to the sentence records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceIndex {
    /// Gloss of each class id.
    pub classes: Vec<String>,
    pub sentences: Vec<SentenceEntry>,
}

pub fn cmd_sentences(a: SentencesArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.common)?;
    let split = parse_split(&a.split)?;
    let data = cfg.data_path(&a.data)?;
    let dataset = load_dataset(&data)?;
    let classes: Vec<String> = (0..dataset.num_classes() as u32)
        .map(|c| dataset.manifest.gloss(c).unwrap_or_default().to_string())
        .collect();
    let seed = cfg.seed.unwrap_or(cfg.train.seed);
    let drawn = sample_sentences(
        &dataset.split(split),
        a.count,
        a.min_words,
        a.max_words,
        seed,
    )?;

    create_dir(&a.out)?;
    let mut sentences = Vec::with_capacity(drawn.len());
    for (s, (seq, labels)) in drawn.iter().enumerate() {
        let file = format!("sentence_{s:03}.slf");
        save_record(seq, a.out.join(&file))?;
        sentences.push(SentenceEntry {
            file,
            words: labels
                .iter()
                .map(|&l| classes[l as usize].clone())
                .collect(),
            labels: labels.clone(),
        });
    }
    write_json(
        &a.out.join("sentences.json"),
        &SentenceIndex { classes, sentences },
    )?;
    info!("wrote {} sentences to {}", a.count, a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct DecodedEntry {
    file: String,
    reference: Vec<String>,
    hypothesis: Vec<String>,
    trace: DecodeTrace,
}

pub fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.common)?;
    if let Some(w) = a.window {
        cfg.decode.window = w;
    }
    if let Some(s) = a.step {
        cfg.decode.step = s;
    }
    if let Some(t) = a.threshold {
        cfg.decode.threshold = t;
    }
    cfg.decode.validate()?;
    let index_path = a.sentences.join("sentences.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: SentenceIndex =
        serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
    let model = load_classifier(&a.model)?;
    if model.num_classes() != index.classes.len() {
        return Err(Error::Argument(format!(
            "model predicts {} classes, sentences use {}",
            model.num_classes(),
            index.classes.len()
        )));
    }
    let gloss = |w: u32| {
        index
            .classes
            .get(w as usize)
            .cloned()
            .unwrap_or_else(|| w.to_string())
    };

    let mut entries = Vec::with_capacity(index.sentences.len());
    for s in &index.sentences {
        let seq = load_record(a.sentences.join(&s.file))?;
        let trace = decode(model.as_ref(), &seq, &cfg.decode)?;
        entries.push(DecodedEntry {
            file: s.file.clone(),
            reference: s.words.clone(),
            hypothesis: trace.words().into_iter().map(gloss).collect(),
            trace,
        });
    }
    let decodes: Vec<DecodedSentence> = entries
        .iter()
        .map(|e| DecodedSentence {
            words: e.hypothesis.clone(),
            mean_confidence: e.trace.mean_confidence,
        })
        .collect();
    let refs: Vec<Vec<String>> = entries.iter().map(|e| e.reference.clone()).collect();
    let report = sentence_report(&decodes, &refs)?;

    create_dir(&a.out)?;
    write_json(&a.out.join("decode.json"), &entries)?;
    write_json(&a.out.join("report.json"), &report)?;
    let txt = a.out.join("report.txt");
    fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    info!(
        "{} sentences: mean confidence {:.3}, average errors {:.2}",
        entries.len(),
        report.average_mean_confidence,
        report.average_total_errors
    );
    Ok(())
}
