//! Sliding-window decoding of concatenated word sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::FeatureSequence;
use crate::metrics::argmax;
use crate::model::Classifier;
use crate::preprocess::assemble_streams;
use crate::seed::rng_for;

/// Seed handed to stream assembly. Windows are never longer than the model
/// input, so no frames are dropped and the output does not depend on it.
pub const DECODE_SEED: u64 = 0xDEC0_DE00;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub window: usize,
    pub step: usize,
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            window: 40,
            step: 5,
            threshold: 0.2,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.step == 0 {
            return Err(Error::Config("window and step must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub start: usize,
    /// `None` when the best class does not clear the threshold.
    pub word: Option<u32>,
    /// Highest class probability.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptedWord {
    pub word: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub windows: Vec<WindowPrediction>,
    pub accepted: Vec<AcceptedWord>,
    /// Mean confidence of the accepted words, 0 when none were accepted.
    pub mean_confidence: f64,
}

impl DecodeTrace {
    pub fn words(&self) -> Vec<u32> {
        self.accepted.iter().map(|a| a.word).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.accepted.iter().map(|a| a.confidence).collect()
    }
}

/// Window start offsets. A sequence shorter than one window yields a single
/// window at 0 that is padded when classified.
pub fn windows(seq_len: usize, config: &DecodeConfig) -> Vec<usize> {
    if seq_len < config.window {
        return vec![0];
    }
    (0..=seq_len - config.window).step_by(config.step).collect()
}

/// Labels `probs` with its argmax when the maximum strictly exceeds the
/// threshold. The comparison runs at the model's f32 precision, so a
/// probability of exactly 0.2 does not exceed a 0.2 threshold.
pub fn classify_probs(start: usize, probs: &[f32], threshold: f64) -> WindowPrediction {
    let best = argmax(probs);
    WindowPrediction {
        start,
        word: (probs[best] > threshold as f32).then_some(best as u32),
        confidence: probs[best] as f64,
    }
}

/// Classifies `frames` padded or cut to `config.window` frames.
pub fn classify_window(
    model: &dyn Classifier,
    frames: &FeatureSequence,
    start: usize,
    config: &DecodeConfig,
) -> Result<WindowPrediction> {
    let batch = assemble_streams(
        frames,
        config.window,
        &mut rng_for(DECODE_SEED, &[start as u64]),
    );
    let probs = model.class_probs(&batch)?;
    Ok(classify_probs(start, &probs, config.threshold))
}

/// Accepts a word when it differs from the last accepted one. Null windows
/// leave that memory untouched, so a word separated from its previous
/// acceptance only by nulls is still dropped.
pub fn accept_stream(preds: &[WindowPrediction]) -> Vec<AcceptedWord> {
    let mut last: Option<u32> = None;
    let mut out = Vec::new();
    for p in preds {
        if let Some(w) = p.word {
            if last != Some(w) {
                out.push(AcceptedWord {
                    word: w,
                    confidence: p.confidence,
                });
                last = Some(w);
            }
        }
    }
    out
}

pub fn decode(
    model: &dyn Classifier,
    seq: &FeatureSequence,
    config: &DecodeConfig,
) -> Result<DecodeTrace> {
    config.validate()?;
    if seq.is_empty() {
        return Err(Error::Argument("cannot decode an empty sequence".into()));
    }
    let starts = windows(seq.len(), config);
    let preds = starts
        .par_iter()
        .map(|&start| {
            let end = (start + config.window).min(seq.len());
            let frames = FeatureSequence {
                frames: seq.frames[start..end].to_vec(),
                label_id: None,
                signer_id: seq.signer_id,
                gloss: None,
            };
            classify_window(model, &frames, start, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let accepted = accept_stream(&preds);
    let mean_confidence = if accepted.is_empty() {
        0.0
    } else {
        accepted.iter().map(|a| a.confidence).sum::<f64>() / accepted.len() as f64
    };
    Ok(DecodeTrace {
        windows: preds,
        accepted,
        mean_confidence,
    })
}
