//! Feature data model, the `.slf` record container, dataset manifests,
//! the seeded synthetic corpus generator and sentence concatenation.

mod manifest;
mod record;
mod synth;

pub use manifest::{
    load_embeddings, save_embeddings, split_by_signer, ClassEntry, Dataset, DatasetManifest,
    EmbeddingTable, FeatureDims, RecordEntry, Split, EMBEDDING_DIM,
};
pub use record::{decode_record, encode_record, load_record, save_record, FORMAT_VERSION, MAGIC};
pub use synth::{generate_synthetic_dataset, write_dataset, SynthConfig, SyntheticDataset};

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const HAND_SHAPE_DIM: usize = 126;
pub const ARM_POINTS_DIM: usize = 12;
pub const LIP_SHAPE_DIM: usize = 120;
/// hand + arm + lip, the raw per-frame width before geometry features.
pub const RAW_FRAME_DIM: usize = HAND_SHAPE_DIM + ARM_POINTS_DIM + LIP_SHAPE_DIM;

/// Normalized image-space center of a detected hand box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandCenter {
    pub x: f32,
    pub y: f32,
}

impl HandCenter {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

/// One frame of extracted features. An all-zero sub-vector means the feature
/// was unavailable for the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub hand_shape: Vec<f32>,
    pub arm_points: Vec<f32>,
    pub lip_shape: Vec<f32>,
    /// `[left, right]`; `None` means the hand was not detected.
    pub hand_centers: [Option<HandCenter>; 2],
}

impl FrameFeatures {
    pub fn zeros() -> Self {
        Self {
            hand_shape: vec![0.0; HAND_SHAPE_DIM],
            arm_points: vec![0.0; ARM_POINTS_DIM],
            lip_shape: vec![0.0; LIP_SHAPE_DIM],
            hand_centers: [None, None],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hand_shape", self.hand_shape.len(), HAND_SHAPE_DIM),
            ("arm_points", self.arm_points.len(), ARM_POINTS_DIM),
            ("lip_shape", self.lip_shape.len(), LIP_SHAPE_DIM),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::Argument(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
        }
        for c in self.hand_centers.iter().flatten() {
            if !c.in_unit_square() {
                return Err(Error::Argument(format!(
                    "hand center ({}, {}) outside [0,1]^2",
                    c.x, c.y
                )));
            }
        }
        Ok(())
    }
}

/// A variable-length recording of one sign.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<FrameFeatures>,
    pub label_id: Option<u32>,
    pub signer_id: u32,
    pub gloss: Option<String>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Argument("sequence has no frames".into()));
        }
        self.frames.iter().try_for_each(FrameFeatures::validate)
    }
}

/// Joins word recordings end to end into one sentence-like sequence.
///
/// Returns the joined sequence and the ordered reference labels.
pub fn concat_sentence(records: &[FeatureSequence]) -> Result<(FeatureSequence, Vec<u32>)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Argument("cannot build a sentence from zero records".into()))?;
    let mut glosses = Vec::with_capacity(records.len());
    let mut frames = Vec::with_capacity(records.iter().map(FeatureSequence::len).sum());
    let mut names = Vec::new();
    for rec in records {
        rec.validate()?;
        let label = rec
            .label_id
            .ok_or_else(|| Error::Argument("sentence words must carry a label".into()))?;
        glosses.push(label);
        if let Some(g) = &rec.gloss {
            names.push(g.clone());
        }
        frames.extend(rec.frames.iter().cloned());
    }
    let gloss = (names.len() == records.len()).then(|| names.join(" "));
    let seq = FeatureSequence {
        frames,
        label_id: None,
        signer_id: first.signer_id,
        gloss,
    };
    Ok((seq, glosses))
}

/// Draws `count` sentences of `min_words..=max_words` distinct classes from
/// `records`, each word a random recording of its class. Repeated words are
/// avoided because the decoder cannot tell them apart.
pub fn sample_sentences(
    records: &[&FeatureSequence],
    count: usize,
    min_words: usize,
    max_words: usize,
    seed: u64,
) -> Result<Vec<(FeatureSequence, Vec<u32>)>> {
    if min_words == 0 || min_words > max_words {
        return Err(Error::Argument("need 1 <= min words <= max words".into()));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let label = r
            .label_id
            .ok_or_else(|| Error::Argument("sentence words must carry a label".into()))?;
        by_class.entry(label).or_default().push(i);
    }
    let classes: Vec<u32> = by_class.keys().copied().collect();
    if classes.len() < max_words {
        return Err(Error::Argument(format!(
            "only {} classes available for sentences of up to {max_words} words",
            classes.len()
        )));
    }
    (0..count)
        .map(|s| {
            let mut rng = rng_for(seed, &[7, s as u64]);
            let n = rng.random_range(min_words..=max_words);
            let mut order = classes.clone();
            order.shuffle(&mut rng);
            let words: Vec<FeatureSequence> = order[..n]
                .iter()
                .map(|c| records[*by_class[c].choose(&mut rng).expect("non-empty class")].clone())
                .collect();
            concat_sentence(&words)
        })
        .collect()
}
