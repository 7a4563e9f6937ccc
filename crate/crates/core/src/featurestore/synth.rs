//! Seeded synthetic corpus standing in for recorded signers.
//!
//! Each class owns a handful of anchor keyframes in the raw 258-d feature
//! space plus straight-line hand-center trajectories. A record linearly
//! interpolates the anchors over its own length, adds a constant per-signer
//! offset and i.i.d. Gaussian noise. Hand centers drop out over fixed
//! normalized-time intervals chosen per (class, signer), so equal-length
//! noiseless records stay identical while the missing-hand fallbacks still
//! get exercised.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{save_embeddings, ClassEntry, Dataset, FeatureDims};
use super::{
    save_record, DatasetManifest, EmbeddingTable, FeatureSequence, FrameFeatures, HandCenter,
    RecordEntry, Split, ARM_POINTS_DIM, EMBEDDING_DIM, HAND_SHAPE_DIM, RAW_FRAME_DIM,
};
use crate::error::{Error, Result};

const ANCHORS_PER_CLASS: usize = 4;
const CLASS_SCALE: f32 = 0.5;
const ANCHOR_SCALE: f32 = 0.25;
const SIGNER_SCALE: f32 = 0.05;
const DROPOUT_WIDTH: f32 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_signer_class: usize,
    pub n_signers: usize,
    /// Inclusive frame-count range.
    pub length_range: (usize, usize),
    pub noise_sigma: f32,
    /// Probability that a (class, signer, hand) triple has a dropout interval.
    pub center_dropout: f32,
    /// Assign the last two signers to val/test, the rest to train.
    pub split_by_signer: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_per_signer_class: 5,
            n_signers: 5,
            length_range: (21, 116),
            noise_sigma: 0.05,
            center_dropout: 0.5,
            split_by_signer: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(
                "synthetic dataset needs at least 2 classes".into(),
            ));
        }
        if self.n_per_signer_class == 0 || self.n_signers == 0 {
            return Err(Error::Config(
                "need at least one signer and one record per class".into(),
            ));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || hi > 200 || lo > hi {
            return Err(Error::Config(format!(
                "length range [{lo}, {hi}] must lie within [1, 200]"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(
                "noise sigma must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.center_dropout) {
            return Err(Error::Config("center dropout must lie in [0, 1]".into()));
        }
        if self.split_by_signer && self.n_signers < 3 {
            return Err(Error::Config(format!(
                "a signer-disjoint split needs at least 3 signers, got {}",
                self.n_signers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.records`.
    pub records: Vec<FeatureSequence>,
    pub embeddings: EmbeddingTable,
}

impl From<SyntheticDataset> for Dataset {
    /// The in-memory equivalent of writing the dataset and loading it back.
    fn from(ds: SyntheticDataset) -> Self {
        let splits = ds.manifest.records.iter().map(|r| r.split).collect();
        Dataset {
            manifest: ds.manifest,
            records: ds.records,
            splits,
            embeddings: ds.embeddings,
        }
    }
}

struct ClassModel {
    anchors: Vec<Vec<f32>>,
    /// `[left, right]` start and end centers.
    paths: [(HandCenter, HandCenter); 2],
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| scale * sample_normal(rng))
        .collect::<Vec<f32>>()
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    let z: f64 = StandardNormal.sample(rng);
    z as f32
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn split_of(signer: usize, n_signers: usize, enabled: bool) -> Split {
    if !enabled || signer + 2 < n_signers {
        Split::Train
    } else if signer + 2 == n_signers {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let classes: Vec<ClassModel> = (0..cfg.n_classes)
        .map(|_| {
            let base = normal_vec(&mut rng, RAW_FRAME_DIM, CLASS_SCALE);
            let anchors = (0..ANCHORS_PER_CLASS)
                .map(|_| {
                    let d = normal_vec(&mut rng, RAW_FRAME_DIM, ANCHOR_SCALE);
                    base.iter().zip(d).map(|(b, d)| b + d).collect()
                })
                .collect();
            let mut point =
                || HandCenter::new(rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            let paths = [(point(), point()), (point(), point())];
            ClassModel { anchors, paths }
        })
        .collect();

    let signer_offsets: Vec<Vec<f32>> = (0..cfg.n_signers)
        .map(|_| normal_vec(&mut rng, RAW_FRAME_DIM, SIGNER_SCALE))
        .collect();

    let vectors = (0..cfg.n_classes)
        .map(|_| loop {
            let v = normal_vec(&mut rng, EMBEDDING_DIM, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        })
        .collect();
    let embeddings = EmbeddingTable { vectors };

    // (class, signer, hand) -> optional [start, end) in normalized time
    let mut dropouts = vec![[None; 2]; cfg.n_classes * cfg.n_signers];
    for slot in dropouts.iter_mut() {
        for hand in slot.iter_mut() {
            if rng.random::<f32>() < cfg.center_dropout {
                let start = rng.random_range(0.0..(1.0 - DROPOUT_WIDTH));
                *hand = Some((start, start + DROPOUT_WIDTH));
            }
        }
    }

    let mut entries = Vec::new();
    let mut records = Vec::new();
    for signer in 0..cfg.n_signers {
        for (class_id, class) in classes.iter().enumerate() {
            let drop = dropouts[class_id * cfg.n_signers + signer];
            for rep in 0..cfg.n_per_signer_class {
                let len = rng.random_range(cfg.length_range.0..=cfg.length_range.1);
                let frames = (0..len)
                    .map(|i| {
                        let u = if len > 1 {
                            i as f32 / (len - 1) as f32
                        } else {
                            0.0
                        };
                        synth_frame(
                            class,
                            &signer_offsets[signer],
                            drop,
                            u,
                            cfg.noise_sigma,
                            &mut rng,
                        )
                    })
                    .collect();
                records.push(FeatureSequence {
                    frames,
                    label_id: Some(class_id as u32),
                    signer_id: signer as u32,
                    gloss: Some(gloss_name(class_id)),
                });
                entries.push(RecordEntry {
                    path: format!("records/s{signer:02}_c{class_id:03}_r{rep:02}.slf").into(),
                    signer: signer as u32,
                    label: class_id as u32,
                    split: split_of(signer, cfg.n_signers, cfg.split_by_signer),
                });
            }
        }
    }

    let manifest = DatasetManifest {
        classes: (0..cfg.n_classes)
            .map(|i| ClassEntry {
                id: i as u32,
                gloss: gloss_name(i),
            })
            .collect(),
        records: entries,
        embeddings: "embeddings.json".into(),
        dims: FeatureDims::default(),
    };
    Ok(SyntheticDataset {
        manifest,
        records,
        embeddings,
    })
}

fn gloss_name(class_id: usize) -> String {
    format!("word{class_id:03}")
}

fn synth_frame(
    class: &ClassModel,
    offset: &[f32],
    drop: [Option<(f32, f32)>; 2],
    u: f32,
    sigma: f32,
    rng: &mut ChaCha8Rng,
) -> FrameFeatures {
    let pos = u * (ANCHORS_PER_CLASS - 1) as f32;
    let lo = (pos.floor() as usize).min(ANCHORS_PER_CLASS - 2);
    let t = pos - lo as f32;
    let (a, b) = (&class.anchors[lo], &class.anchors[lo + 1]);
    let raw: Vec<f32> = (0..RAW_FRAME_DIM)
        .map(|j| {
            let noise = if sigma > 0.0 {
                sigma * sample_normal(rng)
            } else {
                0.0
            };
            lerp(a[j], b[j], t) + offset[j] + noise
        })
        .collect();
    let mut centers = [None; 2];
    for (hand, slot) in centers.iter_mut().enumerate() {
        if drop[hand].is_some_and(|(s, e)| u >= s && u < e) {
            continue;
        }
        let (start, end) = class.paths[hand];
        let mut jitter = || {
            if sigma > 0.0 {
                0.2 * sigma * sample_normal(rng)
            } else {
                0.0
            }
        };
        let x = (lerp(start.x, end.x, u) + offset[hand] + jitter()).clamp(0.0, 1.0);
        let y = (lerp(start.y, end.y, u) + offset[hand + 2] + jitter()).clamp(0.0, 1.0);
        *slot = Some(HandCenter::new(x, y));
    }
    FrameFeatures {
        hand_shape: raw[..HAND_SHAPE_DIM].to_vec(),
        arm_points: raw[HAND_SHAPE_DIM..HAND_SHAPE_DIM + ARM_POINTS_DIM].to_vec(),
        lip_shape: raw[HAND_SHAPE_DIM + ARM_POINTS_DIM..].to_vec(),
        hand_centers: centers,
    }
}

/// Writes `manifest.json`, `embeddings.json` and `records/*.slf` under `out_dir`.
pub fn write_dataset(ds: &SyntheticDataset, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    let rec_dir = out_dir.join("records");
    fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    for (entry, rec) in ds.manifest.records.iter().zip(&ds.records) {
        save_record(rec, out_dir.join(&entry.path))?;
    }
    save_embeddings(&ds.embeddings, out_dir.join(&ds.manifest.embeddings))?;
    ds.manifest.save(out_dir.join("manifest.json"))
}
