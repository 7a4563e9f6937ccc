//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signfuse::decoder::{accept_stream, decode, DecodeConfig, WindowPrediction};
use signfuse::ensemble::{
    decode_chromosome, fitness, mutate, run_ga, train_ensemble, uniform_crossover, Chromosome,
    EnsembleModel, GaConfig, MutationRates,
};
use signfuse::featurestore::{
    generate_synthetic_dataset, sample_sentences, Dataset, Split, SynthConfig,
};
use signfuse::metrics::{edit_errors, sentence_report, DecodedSentence};
use signfuse::model::{
    combined_loss, cosine_loss, cross_entropy, label_smooth, positional_encoding, Architecture,
    FusionModel, LossWeights, ModelConfig,
};
use signfuse::seed::rng_for;
use signfuse::train::{adamax_step, evaluate, train_model, AdamaxConfig, AdamaxState, TrainConfig};

type Outcome = Result<String, String>;

/// Models trained by criterion 4 and reused by criterion 6.
#[derive(Default)]
struct Shared {
    dataset: Option<Dataset>,
    ensemble: Option<EnsembleModel>,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn formula_exactness(_: &mut Shared) -> Outcome {
    let mut worst = 0.0f64;
    let mut track = |name: &str, got: f64, want: f64| {
        let r = if want == 0.0 {
            got.abs()
        } else {
            rel(got, want)
        };
        if r > worst {
            worst = r;
        }
        if r >= 1e-6 {
            Err(format!("{name}: got {got}, want {want}"))
        } else {
            Ok(())
        }
    };

    // (1 - 0.15) * onehot + 0.15 / 4
    let s = label_smooth(&[0.0f64, 1.0, 0.0, 0.0], 0.15).unwrap();
    for (i, want) in [0.0375, 0.8875, 0.0375, 0.0375].into_iter().enumerate() {
        track("label_smooth", s[i], want)?;
    }

    let probs = [0.7f64, 0.2, 0.1];
    let target = [0.9f64, 0.05, 0.05];
    // -(0.9 ln 0.7 + 0.05 ln 0.2 + 0.05 ln 0.1)
    let ce_want = 0.9 * 0.356_674_943_938_732_4
        + 0.05 * 1.609_437_912_434_100_3
        + 0.05 * std::f64::consts::LN_10;
    let ce = cross_entropy(&probs, &target);
    track("cross_entropy", ce, ce_want)?;

    // |(1,2,2)| = 3, |(2,0,0)| = 2, dot = 2
    let cos = cosine_loss(&[1.0f64, 2.0, 2.0], &[2.0, 0.0, 0.0]).unwrap();
    track("cosine_loss", cos, -1.0 / 3.0)?;
    track(
        "cosine_loss parallel",
        cosine_loss(&[3.0f64, 4.0], &[6.0, 8.0]).unwrap(),
        -1.0,
    )?;
    track(
        "cosine_loss orthogonal",
        cosine_loss(&[1.0f64, 0.0], &[0.0, 5.0]).unwrap(),
        0.0,
    )?;

    let w = LossWeights::default();
    track(
        "combined_loss",
        combined_loss(ce, cos, w),
        1.8 * ce_want - 0.5 / 3.0,
    )?;

    track("fitness(0)", fitness(0.0), 1.0)?;
    track("fitness(2.5)", fitness(2.5), std::f64::consts::E)?;
    // e^36.08
    track("fitness(90.2)", fitness(90.2), 4_670_301_380_742_187.0)?;

    let pe = positional_encoding::<f64>(3, 4).unwrap();
    let pe_want = [
        [0.0, 1.0, 0.0, 1.0],
        [
            0.841_470_984_807_896_5,
            0.540_302_305_868_139_8,
            0.009_999_833_334_166_665,
            0.999_950_000_416_665_3,
        ],
        [
            0.909_297_426_825_681_7,
            -0.416_146_836_547_142_4,
            0.019_998_666_693_333_08,
            0.999_800_006_666_577_8,
        ],
    ];
    for (p, row) in pe_want.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            track("positional_encoding", pe[[p, j]], want)?;
        }
    }

    // first step by hand: m = 0.05, u = 0.5, step = 0.0012 / 0.1
    let cfg = AdamaxConfig::new(0.0012, 1e-4);
    let mut theta = [1.0f64];
    let mut state = AdamaxState::new(1);
    adamax_step(&mut theta, &[0.5], &mut state, &cfg).unwrap();
    let first = (1.0 - 0.012 * 0.05 / (0.5 + 1e-8)) * (1.0 - 0.0012 * 1e-4);
    track("adamax step 1", theta[0], first)?;

    // five more steps against a scalar transcription of the update
    let grads = [-0.3, 0.8, 0.0, 0.1, -1.2];
    let (mut m, mut u, mut p) = (0.05f64, 0.5f64, first);
    for (t, g) in grads.iter().enumerate() {
        adamax_step(&mut theta, &[*g], &mut state, &cfg).unwrap();
        let t = (t + 2) as i32;
        m = 0.9 * m + 0.1 * g;
        u = f64::max(0.999 * u, g.abs());
        p -= 0.0012 / (1.0 - 0.9f64.powi(t)) * m / (u + 1e-8);
        p *= 1.0 - 0.0012 * 1e-4;
        track("adamax recurrence", theta[0], p)?;
    }
    Ok(format!(
        "all oracles within 1e-6, worst relative error {worst:.1e}"
    ))
}

fn gradient_check_f32(_: &mut Shared) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for arch in [Architecture::Early, Architecture::Late] {
        let (mut n, mut worst) = (0, 0.0f64);
        for seed in 1..=5 {
            let r = gradient_check::<f32>(arch, 40, seed);
            n += r.checked();
            worst = worst.max(r.max_rel);
        }
        ok &= n >= 100 && worst < 1e-3;
        parts.push(format!("{arch}: {n} coordinates, max rel {worst:.2e}"));
    }
    check(ok, parts.join("; "))
}

fn masking_invariance(_: &mut Shared) -> Outcome {
    let mut worst = 0.0f32;
    for arch in [Architecture::Early, Architecture::Late] {
        let model = FusionModel::<f32>::new(
            ModelConfig::for_arch(arch, 10),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for b in 0..50 {
            let len = rng.random_range(5..=40);
            let batch = random_batch(len, 40, 1000 + b);
            let extra = rng.random_range(1..=30);
            let a = model.forward(&batch).map_err(|e| e.to_string())?;
            let c = model
                .forward(&batch.padded_to(40 + extra))
                .map_err(|e| e.to_string())?;
            let diff = (&a.class_probs - &c.class_probs)
                .iter()
                .chain((&a.embedding - &c.embedding).iter())
                .fold(0f32, |m, v| m.max(v.abs()));
            worst = worst.max(diff);
        }
    }
    check(
        worst < 1e-5,
        format!("100 batches, max output change {worst:.2e}"),
    )
}

fn synthetic_end_to_end(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let dataset: Dataset = generate_synthetic_dataset(&SynthConfig::default())
        .map_err(|e| e.to_string())?
        .into();
    let k = dataset.num_classes();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let early =
        train_model(&dataset, &ModelConfig::early(k), &cfg, None).map_err(|e| e.to_string())?;
    let late =
        train_model(&dataset, &ModelConfig::late(k), &cfg, None).map_err(|e| e.to_string())?;
    let chromosome: Chromosome = "2,64,64".parse().unwrap();
    let ens = train_ensemble(
        &early.best.model,
        &late.best.model,
        &chromosome,
        &dataset,
        &TrainConfig::ensemble_default(),
        None,
    )
    .map_err(|e| e.to_string())?;

    let test = dataset.split(Split::Test);
    let score = |m: &dyn signfuse::model::Classifier| evaluate(m, &test, k, 40).map(|e| e.top1);
    let early_test = score(&early.best.model).map_err(|e| e.to_string())?;
    let late_test = score(&late.best.model).map_err(|e| e.to_string())?;
    let ens_test = score(&ens.best.model).map_err(|e| e.to_string())?;
    let best_val =
        |h: &[signfuse::train::EpochLog]| h.iter().map(|e| e.val_top1).fold(0.0, f64::max);
    let (early_val, late_val) = (best_val(&early.history), best_val(&late.history));
    let secs = start.elapsed().as_secs_f64();

    shared.ensemble = Some(ens.best.model);
    shared.dataset = Some(dataset);
    check(
        early_val >= 0.85 && late_val >= 0.85 && ens_test >= early_test.max(late_test) - 0.02 && secs <= 900.0,
        format!(
            "val top-1 early {early_val:.3}, late {late_val:.3}; test top-1 early {early_test:.3}, late \
             {late_test:.3}, ensemble {ens_test:.3}; {secs:.0}s"
        ),
    )
}

fn ga_behavior(_: &mut Shared) -> Outcome {
    let mock = |c: &Chromosome, _: u64| Ok(fitness(mock_accuracy(c)));

    // (a) elitism
    for seed in 0..20 {
        let cfg = GaConfig {
            seed,
            ..GaConfig::default()
        };
        let out = run_ga(mock, &cfg, None).map_err(|e| e.to_string())?;
        if out
            .history
            .windows(2)
            .any(|w| w[1].best_fitness < w[0].best_fitness)
        {
            return Err(format!("best fitness decreased for seed {seed}"));
        }
    }

    // (b) GA against best-of-20 random search, 10 seeds each
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[4] + v[5]) / 2.0
    };
    let ga: Vec<f64> = (0..10)
        .map(|seed| {
            let cfg = GaConfig {
                seed,
                ..GaConfig::default()
            };
            mock_accuracy(&run_ga(mock, &cfg, None).unwrap().best)
        })
        .collect();
    let random: Vec<f64> = (0..10)
        .map(|seed| {
            let mut rng = rng_for(seed, &[99]);
            (0..20)
                .map(|_| mock_accuracy(&Chromosome::random(&mut rng)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (ga_med, rand_med) = (median(ga), median(random));
    if ga_med <= rand_med {
        return Err(format!(
            "GA median {ga_med:.2} does not beat random search {rand_med:.2}"
        ));
    }

    // (c) closure of the operators
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pool: Vec<Chromosome> = (0..20).map(|_| Chromosome::random(&mut rng)).collect();
    let rates = [
        GaConfig::default().rates(),
        MutationRates {
            layer_gene: 0.5,
            neuron_gene: 0.5,
        },
    ];
    for i in 0..10_000 {
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        let c = match i % 3 {
            0 => uniform_crossover(&a, &b, &mut rng),
            1 => mutate(&a, rates[i % 2], &mut rng, false),
            _ => Chromosome::random(&mut rng),
        };
        if let Err(e) = decode_chromosome(c.genes()) {
            return Err(format!(
                "operator {} produced an invalid chromosome: {e}",
                i % 3
            ));
        }
        let slot = rng.random_range(0..pool.len());
        pool[slot] = c;
    }
    Ok(format!(
        "elitism holds on 20 seeds; median mock accuracy GA {ga_med:.2} vs random {rand_med:.2}; 10^4 operator \
         results valid"
    ))
}

fn continuous_decoding(shared: &mut Shared) -> Outcome {
    for (i, (words, want)) in crafted_traces().iter().enumerate() {
        let preds: Vec<WindowPrediction> = words
            .iter()
            .enumerate()
            .map(|(j, &word)| WindowPrediction {
                start: 5 * j,
                word,
                confidence: 0.5,
            })
            .collect();
        let got: Vec<u32> = accept_stream(&preds).iter().map(|a| a.word).collect();
        if &got != want {
            return Err(format!(
                "crafted trace {i}: accepted {got:?}, expected {want:?}"
            ));
        }
    }
    let (Some(dataset), Some(model)) = (&shared.dataset, &shared.ensemble) else {
        return Err("needs the ensemble trained by criterion 4".into());
    };
    let sentences =
        sample_sentences(&dataset.split(Split::Test), 20, 2, 5, 0).map_err(|e| e.to_string())?;
    let cfg = DecodeConfig::default();
    let mut decodes = Vec::new();
    let mut refs = Vec::new();
    for (seq, labels) in &sentences {
        let trace = decode(model, seq, &cfg).map_err(|e| e.to_string())?;
        decodes.push(DecodedSentence {
            words: trace.words().iter().map(u32::to_string).collect(),
            mean_confidence: trace.mean_confidence,
        });
        refs.push(labels.iter().map(u32::to_string).collect());
    }
    let report = sentence_report(&decodes, &refs).map_err(|e| e.to_string())?;
    check(
        report.average_total_errors <= 1.0,
        format!(
            "{} crafted traces exact; 20 sentences: average errors {:.2}, mean confidence {:.3}",
            crafted_traces().len(),
            report.average_total_errors,
            report.average_mean_confidence
        ),
    )
}

fn metrics_oracle(_: &mut Shared) -> Outcome {
    let words = all_words(3, 6);
    let mut pairs = 0usize;
    for (i, src) in words.iter().enumerate() {
        let search = edit_script_search(src, &words, 3, 6);
        for (j, hyp) in words.iter().enumerate() {
            let got = edit_errors(src, hyp);
            let (dist, splits) = &search[j];
            let split = (got.insertions, got.deletions, got.substitutions);
            if got.total() != *dist || !splits.contains(&split) {
                return Err(format!(
                    "pair {i}/{j} {src:?} -> {hyp:?}: got {split:?}, search found distance {dist} via {splits:?}"
                ));
            }
            pairs += 1;
        }
    }
    Ok(format!(
        "{pairs} word pairs agree with exhaustive edit-script search"
    ))
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_signfuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(
        dir.join("run.json"),
        r#"{"seed": 7, "data": "data", "train": {"epochs": 3}, "ensemble": {"epochs": 20}}"#,
    )
    .map_err(|e| e.to_string())?;
    let steps: [&[&str]; 7] = [
        &["synth", "--seed", "7", "--out", "data"],
        &[
            "train", "--config", "run.json", "--arch", "early", "--out", "early",
        ],
        &[
            "train", "--config", "run.json", "--arch", "late", "--out", "late",
        ],
        &[
            "ensemble",
            "--config",
            "run.json",
            "--early",
            "early/model.ckpt",
            "--late",
            "late/model.ckpt",
            "--out",
            "ensemble",
        ],
        &[
            "eval",
            "--config",
            "run.json",
            "--model",
            "ensemble/ensemble.ckpt",
            "--out",
            "metrics.json",
        ],
        &["sentences", "--config", "run.json", "--out", "sentences"],
        &[
            "decode",
            "--config",
            "run.json",
            "--model",
            "ensemble/ensemble.ckpt",
            "--sentences",
            "sentences",
            "--out",
            "decoded",
        ],
    ];
    steps.iter().try_for_each(|s| run_cli(s, dir))
}

fn determinism(_: &mut Shared) -> Outcome {
    let runs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for r in &runs {
        pipeline(r.path())?;
    }
    let files = [
        "metrics.json",
        "early/train_log.jsonl",
        "early/train_summary.json",
        "late/train_summary.json",
        "ensemble/ensemble_summary.json",
        "ensemble/ensemble.ckpt",
        "decoded/decode.json",
        "decoded/report.json",
        "decoded/report.txt",
    ];
    for f in files {
        let a = std::fs::read(runs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(runs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        files.len()
    ))
}

fn main() {
    let criteria: [(&str, fn(&mut Shared) -> Outcome); 8] = [
        ("formula exactness", formula_exactness),
        ("gradient check", gradient_check_f32),
        ("masking invariance", masking_invariance),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("GA behavior", ga_behavior),
        ("continuous decoding", continuous_decoding),
        ("metrics oracle", metrics_oracle),
        ("determinism", determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} [{tag}] {name}: {detail} ({secs:.1}s)", i + 1);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
