//! Early- and late-fusion transformer classifiers with a class head and an
//! auxiliary word-embedding regression head.

pub mod checkpoint;
mod layers;
pub mod loss;

use ndarray::{s, Array1, Array2, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{positional_encoding, Encoder, EncoderBlock, LayerNorm, Linear, Mode};
pub use loss::{
    combined_loss, cosine_loss, cosine_loss_with_grad, cross_entropy, label_smooth,
    smoothed_target, softmax, LossWeights,
};

use crate::error::{Error, Result};
use crate::featurestore::EMBEDDING_DIM;
use crate::preprocess::{StreamBatch, FUSED_INPUT_DIM, STREAM_A_DIM, STREAM_B_DIM, STREAM_C_DIM};

/// Floating-point element type of model tensors.
pub trait Real: NdFloat + FromPrimitive {}
impl<T: NdFloat + FromPrimitive> Real for T {}

pub(crate) fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Uniform access to every learnable tensor of a model, in a fixed order.
pub trait Params<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// `self += scale * flat`, where `flat` follows [`Params::to_flat`] order.
    fn add_flat(&mut self, flat: &[F], scale: F) {
        let mut off = 0;
        self.visit_mut("", &mut |_, _, d| {
            let n = d.len();
            for (x, g) in d.iter_mut().zip(&flat[off..off + n]) {
                *x += scale * *g;
            }
            off += n;
        });
    }

    fn scale(&mut self, factor: F) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|x| *x *= factor));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Early,
    Late,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Early => "early",
            Architecture::Late => "late",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Architecture::Early),
            "late" => Ok(Architecture::Late),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub blocks: usize,
}

impl EncoderConfig {
    pub fn new(d_model: usize, heads: usize, ffn_width: usize) -> Self {
        Self {
            d_model,
            heads,
            ffn_width,
            blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even",
                self.d_model
            )));
        }
        if self.ffn_width == 0 || self.blocks == 0 {
            return Err(Error::Config(
                "ffn width and block count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    /// Late fusion: one encoder per stream (A, B, C). Early fusion: a single
    /// encoder over the concatenated frame.
    pub encoders: Vec<EncoderConfig>,
    /// Late fusion only: encoder over the concatenated stream outputs.
    pub fused: Option<EncoderConfig>,
    /// Streams fed to the model; disabled streams are zeroed on input.
    #[serde(default = "all_streams")]
    pub streams: [bool; 3],
}

fn all_streams() -> [bool; 3] {
    [true; 3]
}

impl ModelConfig {
    /// Hand/lip/arm encoders of widths 120/120/24 (dense 256/64/256) and a
    /// 264-wide fused encoder (dense 512), all with 12 heads.
    pub fn late(num_classes: usize) -> Self {
        Self {
            arch: Architecture::Late,
            num_classes,
            embed_dim: EMBEDDING_DIM,
            dropout: 0.1,
            encoders: vec![
                EncoderConfig::new(120, 12, 256),
                EncoderConfig::new(120, 12, 64),
                EncoderConfig::new(24, 12, 256),
            ],
            fused: Some(EncoderConfig::new(264, 12, 512)),
            streams: all_streams(),
        }
    }

    /// One 264-wide encoder (12 heads, dense 512) over the 260-d concatenated frame.
    pub fn early(num_classes: usize) -> Self {
        Self {
            arch: Architecture::Early,
            num_classes,
            embed_dim: EMBEDDING_DIM,
            dropout: 0.1,
            encoders: vec![EncoderConfig::new(264, 12, 512)],
            fused: None,
            streams: all_streams(),
        }
    }

    pub fn for_arch(arch: Architecture, num_classes: usize) -> Self {
        match arch {
            Architecture::Early => Self::early(num_classes),
            Architecture::Late => Self::late(num_classes),
        }
    }

    pub fn input_dims(&self) -> Vec<usize> {
        match self.arch {
            Architecture::Early => vec![FUSED_INPUT_DIM],
            Architecture::Late => vec![STREAM_A_DIM, STREAM_B_DIM, STREAM_C_DIM],
        }
    }

    /// Width of the pooled representation feeding the heads.
    pub fn pooled_dim(&self) -> usize {
        match (&self.fused, self.arch) {
            (Some(f), Architecture::Late) => f.d_model,
            _ => self.encoders[0].d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.streams.iter().any(|s| *s) {
            return Err(Error::Config("at least one stream must be enabled".into()));
        }
        for e in self.encoders.iter().chain(&self.fused) {
            e.validate()?;
        }
        match self.arch {
            Architecture::Late => {
                if self.encoders.len() != 3 {
                    return Err(Error::Config(
                        "late fusion needs exactly 3 stream encoders".into(),
                    ));
                }
                let width: usize = self.encoders.iter().map(|e| e.d_model).sum();
                match &self.fused {
                    Some(f) if f.d_model == width => {}
                    Some(f) => {
                        return Err(Error::Config(format!(
                            "fused encoder width {} must equal the summed stream widths {width}",
                            f.d_model
                        )))
                    }
                    None => return Err(Error::Config("late fusion needs a fused encoder".into())),
                }
            }
            Architecture::Early => {
                if self.encoders.len() != 1 || self.fused.is_some() {
                    return Err(Error::Config(
                        "early fusion takes one encoder and no fused encoder".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub logits: Array1<F>,
    pub class_probs: Array1<F>,
    pub embedding: Array1<F>,
}

pub struct ForwardCache<F> {
    encoders: Vec<layers::EncoderCache<F>>,
    fused: Option<layers::EncoderCache<F>>,
    pooled: Array2<F>,
    mask: Vec<bool>,
}

/// Per-sample loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<F> {
    pub cross_entropy: F,
    pub cosine: F,
    pub total: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<F> {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder<F>>,
    pub fused: Option<Encoder<F>>,
    pub class_head: Linear<F>,
    pub embed_head: Linear<F>,
}

fn build_encoder<F: Real, R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    input_dim: Option<usize>,
    rng: &mut R,
) -> Encoder<F> {
    Encoder {
        projection: input_dim.map(|d| Linear::init(d, cfg.d_model, rng)),
        add_positions: input_dim.is_some(),
        blocks: (0..cfg.blocks)
            .map(|_| EncoderBlock::init(cfg.d_model, cfg.heads, cfg.ffn_width, rng))
            .collect(),
    }
}

impl<F: Real> FusionModel<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoders = config
            .encoders
            .iter()
            .zip(config.input_dims())
            .map(|(c, d)| build_encoder(c, Some(d), rng))
            .collect();
        let fused = config.fused.as_ref().map(|c| build_encoder(c, None, rng));
        let pooled = config.pooled_dim();
        Ok(Self {
            class_head: Linear::init(pooled, config.num_classes, rng),
            embed_head: Linear::init(pooled, config.embed_dim, rng),
            encoders,
            fused,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let c = &self.class_head;
        let e = &self.embed_head;
        Self {
            config: self.config.clone(),
            encoders: self.encoders.iter().map(Encoder::zeros_like).collect(),
            fused: self.fused.as_ref().map(Encoder::zeros_like),
            class_head: Linear::zeros(c.fan_in(), c.fan_out()),
            embed_head: Linear::zeros(e.fan_in(), e.fan_out()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn inputs(&self, batch: &StreamBatch) -> Vec<Array2<F>> {
        let batch = if self.config.streams.iter().all(|s| *s) {
            std::borrow::Cow::Borrowed(batch)
        } else {
            std::borrow::Cow::Owned(batch.with_toggles(self.config.streams))
        };
        let conv = |a: &Array2<f32>| a.mapv(|v| F::from_f32(v).expect("f32 fits"));
        match self.config.arch {
            Architecture::Early => vec![conv(&batch.fused())],
            Architecture::Late => batch.streams().into_iter().map(conv).collect(),
        }
    }

    pub fn forward(&self, batch: &StreamBatch) -> Result<ForwardOutput<F>> {
        self.forward_cached(batch, &mut Mode::Eval).map(|(o, _)| o)
    }

    pub fn forward_cached(
        &self,
        batch: &StreamBatch,
        mode: &mut Mode<'_>,
    ) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
        let mask = &batch.mask;
        let valid = batch.valid_len();
        if valid == 0 {
            return Err(Error::DegenerateInput("batch has no valid frame".into()));
        }
        let mut outs = Vec::with_capacity(self.encoders.len());
        let mut enc_caches = Vec::with_capacity(self.encoders.len());
        for (enc, x) in self.encoders.iter().zip(self.inputs(batch)) {
            let (y, c) = enc.forward_cached(&x, mask, mode)?;
            outs.push(y);
            enc_caches.push(c);
        }
        let (hidden, fused_cache) = match &self.fused {
            Some(f) => {
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                let cat = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
                let (y, c) = f.forward_cached(&cat, mask, mode)?;
                (y, Some(c))
            }
            None => (outs.pop().expect("one encoder"), None),
        };
        let inv = cast::<F>(1.0 / valid as f64);
        let mut pooled = Array1::zeros(hidden.ncols());
        for (row, &m) in hidden.rows().into_iter().zip(mask) {
            if m {
                pooled += &row;
            }
        }
        let pooled = (pooled * inv).insert_axis(Axis(0));
        let logits = self.class_head.forward(&pooled.view()).row(0).to_owned();
        let embedding = self.embed_head.forward(&pooled.view()).row(0).to_owned();
        let class_probs = softmax(&logits);
        Ok((
            ForwardOutput {
                logits,
                class_probs,
                embedding,
            },
            ForwardCache {
                encoders: enc_caches,
                fused: fused_cache,
                pooled,
                mask: mask.clone(),
            },
        ))
    }

    /// Loss terms for one sample and the gradient of the weighted total.
    pub fn loss_and_grad(
        &self,
        batch: &StreamBatch,
        class_target: &[F],
        embedding_target: &[F],
        weights: LossWeights,
        mode: &mut Mode<'_>,
    ) -> Result<(LossParts<F>, Self)> {
        let (out, cache) = self.forward_cached(batch, mode)?;
        let probs = out.class_probs.as_slice().expect("contiguous");
        let ce = cross_entropy(probs, class_target);
        let (cos, demb) =
            cosine_loss_with_grad(out.embedding.as_slice().unwrap(), embedding_target)?;
        let total = combined_loss(ce, cos, weights);
        let parts = LossParts {
            cross_entropy: ce,
            cosine: cos,
            total,
        };

        let wc = cast::<F>(weights.class);
        let we = cast::<F>(weights.embedding);
        let dlogits =
            Array1::from_iter(probs.iter().zip(class_target).map(|(&p, &y)| wc * (p - y)))
                .insert_axis(Axis(0));
        let demb = Array1::from_iter(demb.into_iter().map(|g| we * g)).insert_axis(Axis(0));

        let mut grad = self.zeros_like();
        let pooled = cache.pooled.view();
        let mut dpooled = self
            .class_head
            .backward(&pooled, &dlogits, &mut grad.class_head, true)
            .unwrap();
        dpooled += &self
            .embed_head
            .backward(&pooled, &demb, &mut grad.embed_head, true)
            .unwrap();

        let valid = cache.mask.iter().filter(|m| **m).count();
        let inv = cast::<F>(1.0 / valid as f64);
        let mut dhidden = Array2::zeros((cache.mask.len(), dpooled.ncols()));
        for (mut row, &m) in dhidden.rows_mut().into_iter().zip(&cache.mask) {
            if m {
                row.assign(&(&dpooled.row(0) * inv));
            }
        }

        match (&self.fused, &cache.fused) {
            (Some(f), Some(fc)) => {
                let dcat = f
                    .backward(fc, &dhidden, grad.fused.as_mut().unwrap())
                    .expect("fused encoder has no projection");
                let mut col = 0;
                for ((enc, c), g) in self
                    .encoders
                    .iter()
                    .zip(&cache.encoders)
                    .zip(&mut grad.encoders)
                {
                    let w = enc.d_model();
                    let part = dcat.slice(s![.., col..col + w]).to_owned();
                    enc.backward(c, &part, g);
                    col += w;
                }
            }
            _ => {
                self.encoders[0].backward(&cache.encoders[0], &dhidden, &mut grad.encoders[0]);
            }
        }
        Ok((parts, grad))
    }
}

impl<F: Real> Params<F> for FusionModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&format!("{prefix}encoder{i}"), f);
        }
        if let Some(e) = &self.fused {
            e.visit(&format!("{prefix}fused"), f);
        }
        self.class_head.visit(&format!("{prefix}class_head"), f);
        self.embed_head.visit(&format!("{prefix}embed_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}encoder{i}"), f);
        }
        if let Some(e) = &mut self.fused {
            e.visit_mut(&format!("{prefix}fused"), f);
        }
        self.class_head.visit_mut(&format!("{prefix}class_head"), f);
        self.embed_head.visit_mut(&format!("{prefix}embed_head"), f);
    }
}

/// Anything that maps a stream batch to class probabilities.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn class_probs(&self, batch: &StreamBatch) -> Result<Vec<f32>>;
}

impl<F: Real> Classifier for FusionModel<F> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn class_probs(&self, batch: &StreamBatch) -> Result<Vec<f32>> {
        let out = self.forward(batch)?;
        Ok(out
            .class_probs
            .iter()
            .map(|p| p.to_f32().expect("finite probability"))
            .collect())
    }
}
