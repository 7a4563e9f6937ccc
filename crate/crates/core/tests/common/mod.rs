#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signfuse::featurestore::{FeatureSequence, FrameFeatures, HandCenter};
use signfuse::model::{
    combined_loss, cosine_loss, cross_entropy, smoothed_target, Architecture, EncoderConfig,
    FusionModel, LossWeights, Mode, ModelConfig, Params, Real,
};
use signfuse::preprocess::{assemble_streams, StreamBatch};

/// T=4, d_model=12, 2 heads, 3 classes.
pub fn tiny_config(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::for_arch(arch, 3);
    c.dropout = 0.0;
    match arch {
        Architecture::Late => {
            c.encoders = vec![EncoderConfig::new(4, 2, 6); 3];
            c.fused = Some(EncoderConfig::new(12, 2, 8));
        }
        Architecture::Early => c.encoders = vec![EncoderConfig::new(12, 2, 8)],
    }
    c
}

pub fn random_sequence(len: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
    let frames = (0..len)
        .map(|_| {
            let mut f = FrameFeatures::zeros();
            for v in f
                .hand_shape
                .iter_mut()
                .chain(&mut f.arm_points)
                .chain(&mut f.lip_shape)
            {
                *v = rng.random_range(-1.0..1.0);
            }
            let c = |rng: &mut ChaCha8Rng| {
                rng.random_bool(0.8)
                    .then(|| HandCenter::new(rng.random(), rng.random()))
            };
            f.hand_centers = [c(rng), c(rng)];
            f
        })
        .collect();
    FeatureSequence {
        frames,
        label_id: Some(0),
        signer_id: 0,
        gloss: None,
    }
}

pub fn random_batch(len: usize, t: usize, seed: u64) -> StreamBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = random_sequence(len, &mut rng);
    assemble_streams(&seq, t, &mut rng)
}

pub fn unit_embedding<F: Real>(dim: usize, seed: u64) -> Vec<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| F::from_f64(x / n).unwrap()).collect()
}

/// Combined loss evaluated from the public forward pass only.
pub fn total_loss<F: Real>(
    m: &FusionModel<F>,
    batch: &StreamBatch,
    target: &[F],
    emb: &[F],
) -> f64 {
    let out = m.forward(batch).unwrap();
    let ce = cross_entropy(out.class_probs.as_slice().unwrap(), target);
    let cos = cosine_loss(out.embedding.as_slice().unwrap(), emb).unwrap();
    combined_loss(ce, cos, LossWeights::default())
        .to_f64()
        .unwrap()
}

pub struct GradCheck {
    /// (analytic, finite difference) per checked coordinate.
    pub pairs: Vec<(f64, f64)>,
    pub max_rel: f64,
    pub worst: (usize, f64, f64),
}

impl GradCheck {
    pub fn checked(&self) -> usize {
        self.pairs.len()
    }
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor absorbs rounding noise on
/// gradients that are structurally zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Gradient magnitude below which relative error is measured against this
/// floor instead. Structurally zero gradients, such as attention key biases,
/// otherwise compare rounding noise (~1e-11 in the f64 stencil, ~1e-8 in an
/// f32 backward pass) against itself.
pub const NOISE_FLOOR: f64 = 1e-4;

pub const FD_STEP: f64 = 1e-4;

/// Analytic gradient of the combined loss computed in precision `F`,
/// compared against five-point central differences of the f64 loss on `n` random
/// coordinates. Both use the same weights (the `F`-rounded ones).
pub fn gradient_check<F: Real>(arch: Architecture, n: usize, seed: u64) -> GradCheck {
    let cfg = tiny_config(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FusionModel::<F>::new(cfg.clone(), &mut rng).unwrap();
    let batch = random_batch(3, 4, seed + 1);

    let target: Vec<F> = smoothed_target(1, 3, 0.15).unwrap();
    let emb = unit_embedding::<F>(model.config.embed_dim, seed + 2);
    let (_, grad) = model
        .loss_and_grad(
            &batch,
            &target,
            &emb,
            LossWeights::default(),
            &mut Mode::Eval,
        )
        .unwrap();
    let analytic = grad.to_flat();

    // exact f64 copy of the F weights
    let mut reference = FusionModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    reference.scale(0.0);
    let weights: Vec<f64> = model
        .to_flat()
        .iter()
        .map(|w| w.to_f64().unwrap())
        .collect();
    reference.add_flat(&weights, 1.0);
    let target64: Vec<f64> = target.iter().map(|v| v.to_f64().unwrap()).collect();
    let emb64: Vec<f64> = emb.iter().map(|v| v.to_f64().unwrap()).collect();

    let total = analytic.len();
    let shifted = |k: f64, i: usize| {
        let mut delta = vec![0.0; total];
        delta[i] = k * FD_STEP;
        let mut m = reference.clone();
        m.add_flat(&delta, 1.0);
        total_loss(&m, &batch, &target64, &emb64)
    };
    let mut out = GradCheck {
        pairs: Vec::new(),
        max_rel: 0.0,
        worst: (0, 0.0, 0.0),
    };
    for _ in 0..n {
        let i = rng.random_range(0..total);
        // five-point central stencil, O(h^4)
        let fd = (-shifted(2.0, i) + 8.0 * shifted(1.0, i) - 8.0 * shifted(-1.0, i)
            + shifted(-2.0, i))
            / (12.0 * FD_STEP);
        let a = analytic[i].to_f64().unwrap();
        let rel = relative_error(a, fd, NOISE_FLOOR);
        out.pairs.push((a, fd));
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst = (i, a, fd);
        }
    }
    out
}

/// Every word of length `0..=max_len` over symbols `0..alphabet`, shortest
/// first.
pub fn all_words(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|w: &Vec<u8>| {
                (0..alphabet).map(move |s| {
                    let mut v = w.clone();
                    v.push(s);
                    v
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Breadth-first search over single-word edits from `source`, restricted to
/// words of length `<= max_len` (an optimal script can always be ordered to
/// stay there). For every word in `words` returns the minimal script length
/// and every `(insertions, deletions, substitutions)` split that a minimal
/// script achieves.
pub fn edit_script_search(
    source: &[u8],
    words: &[Vec<u8>],
    alphabet: u8,
    max_len: usize,
) -> Vec<(usize, std::collections::BTreeSet<(usize, usize, usize)>)> {
    use std::collections::{BTreeSet, HashMap, VecDeque};
    let index: HashMap<&[u8], usize> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_slice(), i))
        .collect();
    let mut dist = vec![usize::MAX; words.len()];
    let mut splits: Vec<BTreeSet<(usize, usize, usize)>> = vec![BTreeSet::new(); words.len()];
    let s = index[source];
    dist[s] = 0;
    splits[s].insert((0, 0, 0));
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        let w = &words[u];
        let mut next: Vec<(Vec<u8>, (usize, usize, usize))> = Vec::new();
        for i in 0..w.len() {
            let mut d = w.clone();
            d.remove(i);
            next.push((d, (0, 1, 0)));
            for sym in 0..alphabet {
                if sym != w[i] {
                    let mut r = w.clone();
                    r[i] = sym;
                    next.push((r, (0, 0, 1)));
                }
            }
        }
        if w.len() < max_len {
            for i in 0..=w.len() {
                for sym in 0..alphabet {
                    let mut n = w.clone();
                    n.insert(i, sym);
                    next.push((n, (1, 0, 0)));
                }
            }
        }
        let from: Vec<_> = splits[u].iter().copied().collect();
        for (v, (di, dd, ds)) in next {
            let j = index[v.as_slice()];
            if dist[j] == usize::MAX {
                dist[j] = dist[u] + 1;
                queue.push_back(j);
            }
            if dist[j] == dist[u] + 1 {
                for &(a, b, c) in &from {
                    splits[j].insert((a + di, b + dd, c + ds));
                }
            }
        }
    }
    dist.into_iter().zip(splits).collect()
}

/// Target used by the GA mock fitness.
pub const MOCK_TARGET: [u32; 9] = [5, 310, 693, 465, 638, 513, 0, 0, 0];

/// `100 - mean |gene - target|`, read as a validation accuracy in percent.
pub fn mock_accuracy(c: &signfuse::ensemble::Chromosome) -> f64 {
    let total: f64 = c
        .genes()
        .iter()
        .zip(MOCK_TARGET)
        .map(|(&g, t)| (g as f64 - t as f64).abs())
        .sum();
    100.0 - total / 9.0
}

/// Hand-enumerated dedup traces: window words (None = null) and the words
/// the decoder must accept.
pub fn crafted_traces() -> Vec<(Vec<Option<u32>>, Vec<u32>)> {
    let (a, b, c) = (Some(0), Some(1), Some(2));
    vec![
        (vec![a, a, None, b], vec![0, 1]),
        (vec![a, None, a], vec![0]),
        (vec![None, None], vec![]),
        (vec![], vec![]),
        (vec![a], vec![0]),
        (vec![a, b, a], vec![0, 1, 0]),
        (vec![a, None, None, None, a, b], vec![0, 1]),
        (vec![None, b, b, None, c, c, None, c], vec![1, 2]),
        (vec![a, b, None, b, a, None, a], vec![0, 1, 0]),
        (vec![c, c, c, c], vec![2]),
        (vec![a, b, c, a, b, c], vec![0, 1, 2, 0, 1, 2]),
        (vec![None, a, None, b, None, a, None], vec![0, 1, 0]),
    ]
}

/// Returns the class tagged in the first hand feature of the first frame with
/// probability `confidence`, spreading the rest evenly.
pub struct TagClassifier {
    pub classes: usize,
    pub confidence: f32,
}

impl signfuse::model::Classifier for TagClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn class_probs(&self, batch: &StreamBatch) -> signfuse::Result<Vec<f32>> {
        let tag = batch.stream_a[[0, 0]].round() as usize % self.classes;
        let rest = (1.0 - self.confidence) / (self.classes - 1) as f32;
        let mut p = vec![rest; self.classes];
        p[tag] = self.confidence;
        Ok(p)
    }
}

/// A recording whose every frame carries `tag` in its first hand feature.
pub fn tagged_word(tag: u32, len: usize) -> FeatureSequence {
    let mut f = FrameFeatures::zeros();
    f.hand_shape[0] = tag as f32;
    FeatureSequence {
        frames: vec![f; len],
        label_id: Some(tag),
        signer_id: 0,
        gloss: None,
    }
}
