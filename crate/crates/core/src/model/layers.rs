//! Dense, layer-norm and encoder-block primitives with explicit backward passes.
//!
//! Every `forward_*` that feeds training returns a cache; the matching
//! `backward` consumes it, accumulates parameter gradients into a
//! same-shaped gradient struct and returns the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{cast, Params, Real};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Dropout policy for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout: f64,
        rng: &'a mut dyn rand::RngCore,
    },
}

impl Mode<'_> {
    /// Inverted-dropout keep mask, or `None` when dropout is inactive.
    fn dropout_mask<F: Real>(&mut self, shape: (usize, usize)) -> Option<Array2<F>> {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let scale = cast::<F>(1.0 / keep);
                Some(Array2::from_shape_simple_fn(shape, || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        F::zero()
                    }
                }))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in x out`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    /// Glorot-uniform weights, zero bias. Draws in f64 so every float type
    /// gets the same initial values.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                cast(rng.random_range(-limit..limit))
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates `dW`, `db` into `grad`; returns `dx` when asked for it.
    pub fn backward(
        &self,
        x: &ArrayView2<F>,
        dy: &Array2<F>,
        grad: &mut Self,
        want_input_grad: bool,
    ) -> Option<Array2<F>> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        want_input_grad.then(|| dy.dot(&self.weight.t()))
    }
}

impl<F: Real> Params<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(
            &format!("{prefix}.weight"),
            self.weight.shape(),
            slice(&self.weight),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.shape(),
            self.bias.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let shape = self.weight.shape().to_vec();
        f(
            &format!("{prefix}.weight"),
            &shape,
            self.weight.as_slice_mut().unwrap(),
        );
        let shape = self.bias.shape().to_vec();
        f(
            &format!("{prefix}.bias"),
            &shape,
            self.bias.as_slice_mut().unwrap(),
        );
    }
}

fn slice<F>(a: &Array2<F>) -> &[F] {
    a.as_slice()
        .expect("parameters are kept in standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let n = cast::<F>(x.ncols() as f64);
        let eps = cast::<F>(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) / n;
            *is = F::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<F>,
        dy: &Array2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = cast::<F>(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), is) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / n;
            let mean_dx = row.dot(&xh) / n;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|d, &x| *d = (*d - mean_d - x * mean_dx) * *is);
        }
        dx
    }
}

impl<F: Real> Params<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.shape(),
            self.gamma.as_slice().unwrap(),
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.shape(),
            self.beta.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let shape = self.gamma.shape().to_vec();
        f(
            &format!("{prefix}.gamma"),
            &shape,
            self.gamma.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.beta"),
            &shape,
            self.beta.as_slice_mut().unwrap(),
        );
    }
}

/// Sinusoidal position table, `t x d_model`.
pub fn positional_encoding<F: Real>(t: usize, d_model: usize) -> Result<Array2<F>> {
    if t == 0 || d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs T >= 1 and an even d_model, got T={t}, d_model={d_model}"
        )));
    }
    Ok(Array2::from_shape_fn((t, d_model), |(pos, j)| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
        cast(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

fn zero_masked_rows<F: Real>(x: &mut Array2<F>, mask: &[bool]) {
    for (mut row, &m) in x.rows_mut().into_iter().zip(mask) {
        if !m {
            row.fill(F::zero());
        }
    }
}

/// One post-norm transformer encoder block with masked multi-head attention.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<F> {
    pub heads: usize,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub ln1: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
    pub ln2: LayerNorm<F>,
}

struct AttentionCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// One `T x T` attention matrix per head.
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
}

pub struct BlockCache<F> {
    x: Array2<F>,
    attn: AttentionCache<F>,
    drop1: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    h: Array2<F>,
    pre_relu: Array2<F>,
    relu: Array2<F>,
    drop2: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
    mask: Vec<bool>,
}

impl<F: Real> EncoderBlock<F> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            heads,
            wq: Linear::init(d_model, d_model, rng),
            wk: Linear::init(d_model, d_model, rng),
            wv: Linear::init(d_model, d_model, rng),
            wo: Linear::init(d_model, d_model, rng),
            ln1: LayerNorm::new(d_model),
            ff1: Linear::init(d_model, ffn, rng),
            ff2: Linear::init(ffn, d_model, rng),
            ln2: LayerNorm::new(d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.d_model();
        let ffn = self.ff1.fan_out();
        Self {
            heads: self.heads,
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln1: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, ffn),
            ff2: Linear::zeros(ffn, d),
            ln2: LayerNorm::zeros(d),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.fan_in()
    }

    fn check(&self, x: &Array2<F>, mask: &[bool]) -> Result<()> {
        if x.ncols() != self.d_model() || x.nrows() != mask.len() {
            return Err(Error::Config(format!(
                "encoder block expects T x {} input with a T-entry mask, got {:?} and {} mask entries",
                self.d_model(),
                x.dim(),
                mask.len()
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::DegenerateInput(
                "attention mask has no valid frame".into(),
            ));
        }
        Ok(())
    }

    fn attention_forward(&self, x: &Array2<F>, mask: &[bool]) -> (Array2<F>, AttentionCache<F>) {
        let t = x.nrows();
        let d = self.d_model();
        let dh = d / self.heads;
        let scale = cast::<F>(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(&x.view());
        let k = self.wk.forward(&x.view());
        let v = self.wv.forward(&x.view());
        let mut concat = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            for mut row in p.rows_mut() {
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, m)| **m)
                    .map(|(v, _)| *v)
                    .fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for (v, &m) in row.iter_mut().zip(mask) {
                    *v = if m {
                        ((*v - max) * scale).exp()
                    } else {
                        F::zero()
                    };
                    sum += *v;
                }
                row.mapv_inplace(|v| v / sum);
            }
            concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.wo.forward(&concat.view());
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    fn attention_backward(
        &self,
        x: &Array2<F>,
        cache: &AttentionCache<F>,
        dout: &Array2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let d = self.d_model();
        let dh = d / self.heads;
        let scale = cast::<F>(1.0 / (dh as f64).sqrt());
        let dconcat = self
            .wo
            .backward(&cache.concat.view(), dout, &mut grad.wo, true)
            .unwrap();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dho = dconcat.slice(cols);
            let dp = dho.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dho));
            // softmax backward, folded with the 1/sqrt(dh) scale
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                Zip::from(&mut row)
                    .and(&prow)
                    .for_each(|g, &pv| *g = (*g - dot * pv) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let xv = x.view();
        let mut dx = self.wq.backward(&xv, &dq, &mut grad.wq, true).unwrap();
        dx += &self.wk.backward(&xv, &dk, &mut grad.wk, true).unwrap();
        dx += &self.wv.backward(&xv, &dv, &mut grad.wv, true).unwrap();
        dx
    }

    /// Masked multi-head self-attention including the output projection.
    pub fn masked_attention(&self, x: &Array2<F>, mask: &[bool]) -> Result<Array2<F>> {
        self.check(x, mask)?;
        Ok(self.attention_forward(x, mask).0)
    }

    /// Evaluation-mode block output.
    pub fn forward(&self, x: &Array2<F>, mask: &[bool]) -> Result<Array2<F>> {
        self.forward_cached(x, mask, &mut Mode::Eval)
            .map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        x: &Array2<F>,
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<(Array2<F>, BlockCache<F>)> {
        self.check(x, mask)?;
        let (mut a, attn) = self.attention_forward(x, mask);
        let drop1 = mode.dropout_mask(a.dim());
        if let Some(m) = &drop1 {
            a *= m;
        }
        let (h, ln1) = self.ln1.forward(&(x + &a));
        let pre_relu = self.ff1.forward(&h.view());
        let relu = pre_relu.mapv(|v| v.max(F::zero()));
        let mut f = self.ff2.forward(&relu.view());
        let drop2 = mode.dropout_mask(f.dim());
        if let Some(m) = &drop2 {
            f *= m;
        }
        let (mut y, ln2) = self.ln2.forward(&(&h + &f));
        zero_masked_rows(&mut y, mask);
        let cache = BlockCache {
            x: x.clone(),
            attn,
            drop1,
            ln1,
            h,
            pre_relu,
            relu,
            drop2,
            ln2,
            mask: mask.to_vec(),
        };
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &BlockCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let mut dy = dy.clone();
        zero_masked_rows(&mut dy, &cache.mask);
        let ds2 = self.ln2.backward(&cache.ln2, &dy, &mut grad.ln2);
        let mut df = ds2.clone();
        if let Some(m) = &cache.drop2 {
            df *= m;
        }
        let mut drelu = self
            .ff2
            .backward(&cache.relu.view(), &df, &mut grad.ff2, true)
            .unwrap();
        Zip::from(&mut drelu)
            .and(&cache.pre_relu)
            .for_each(|g, &z| {
                if z <= F::zero() {
                    *g = F::zero()
                }
            });
        let mut dh = ds2;
        dh += &self
            .ff1
            .backward(&cache.h.view(), &drelu, &mut grad.ff1, true)
            .unwrap();
        let ds1 = self.ln1.backward(&cache.ln1, &dh, &mut grad.ln1);
        let mut da = ds1.clone();
        if let Some(m) = &cache.drop1 {
            da *= m;
        }
        let mut dx = ds1;
        dx += &self.attention_backward(&cache.x, &cache.attn, &da, grad);
        dx
    }
}

impl<F: Real> Params<F> for EncoderBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.wq.visit(&format!("{prefix}.attn.q"), f);
        self.wk.visit(&format!("{prefix}.attn.k"), f);
        self.wv.visit(&format!("{prefix}.attn.v"), f);
        self.wo.visit(&format!("{prefix}.attn.out"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ff1.visit(&format!("{prefix}.ffn.0"), f);
        self.ff2.visit(&format!("{prefix}.ffn.1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        self.wq.visit_mut(&format!("{prefix}.attn.q"), f);
        self.wk.visit_mut(&format!("{prefix}.attn.k"), f);
        self.wv.visit_mut(&format!("{prefix}.attn.v"), f);
        self.wo.visit_mut(&format!("{prefix}.attn.out"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.ff1.visit_mut(&format!("{prefix}.ffn.0"), f);
        self.ff2.visit_mut(&format!("{prefix}.ffn.1"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
    }
}

/// Optional input projection + position table, a block stack, and an
/// additive skip from the (projected) input to the stack output.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub projection: Option<Linear<F>>,
    pub add_positions: bool,
    pub blocks: Vec<EncoderBlock<F>>,
}

pub struct EncoderCache<F> {
    input: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    mask: Vec<bool>,
}

impl<F: Real> Encoder<F> {
    pub fn d_model(&self) -> usize {
        self.blocks[0].d_model()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            projection: self
                .projection
                .as_ref()
                .map(|p| Linear::zeros(p.fan_in(), p.fan_out())),
            add_positions: self.add_positions,
            blocks: self.blocks.iter().map(EncoderBlock::zeros_like).collect(),
        }
    }

    pub fn forward_cached(
        &self,
        x: &Array2<F>,
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        let mut z0 = match &self.projection {
            Some(p) => {
                if x.ncols() != p.fan_in() {
                    return Err(Error::Config(format!(
                        "input has {} features, projection expects {}",
                        x.ncols(),
                        p.fan_in()
                    )));
                }
                p.forward(&x.view())
            }
            None => x.clone(),
        };
        if self.add_positions {
            z0 += &positional_encoding::<F>(z0.nrows(), z0.ncols())?;
        }
        zero_masked_rows(&mut z0, mask);
        let mut z = z0.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_cached(&z, mask, mode)?;
            caches.push(c);
            z = y;
        }
        z += &z0;
        Ok((
            z,
            EncoderCache {
                input: x.clone(),
                blocks: caches,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Returns the gradient w.r.t. the raw input only when there is no projection.
    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        dout: &Array2<F>,
        grad: &mut Self,
    ) -> Option<Array2<F>> {
        let mut dz = dout.clone();
        for ((b, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dz = b.backward(c, &dz, g);
        }
        let mut dz0 = dz + dout;
        zero_masked_rows(&mut dz0, &cache.mask);
        match (&self.projection, grad.projection.as_mut()) {
            (Some(p), Some(gp)) => {
                p.backward(&cache.input.view(), &dz0, gp, false);
                None
            }
            _ => Some(dz0),
        }
    }
}

impl<F: Real> Params<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        if let Some(p) = &self.projection {
            p.visit(&format!("{prefix}.proj"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        if let Some(p) = &mut self.projection {
            p.visit_mut(&format!("{prefix}.proj"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
    }
}
