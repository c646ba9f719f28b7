//! Pre-norm transformer encoder: multi-head self-attention and a position-wise
//! feed-forward network, each wrapped as `x + Block(LN(x))`.
//!
//! No positional information is injected, so every layer (and the stack) is
//! equivariant to permutations of the token axis. Attention is confined to
//! tokens of the same batch element.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, LayerNormParams, Linear, Params};
use crate::tensor::{Real, Tape, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub channels: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub activation: Activation,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig { channels: 16, depth: 8, num_heads: 4, ffn_expansion: 4, activation: Activation::Gelu }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("stack config", msg));
        if self.channels == 0 || self.num_heads == 0 {
            return bad("channels and num_heads must be positive".into());
        }
        if !self.channels.is_multiple_of(self.num_heads) {
            return bad(format!("num_heads {} does not divide channels {}", self.num_heads, self.channels));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub num_heads: usize,
}

impl<T: Real> AttentionParams<T> {
    pub fn init(rng: &mut impl Rng, channels: usize, num_heads: usize) -> Result<Self> {
        check_heads(channels, num_heads)?;
        Ok(AttentionParams {
            q: Linear::init(rng, channels, channels),
            k: Linear::init(rng, channels, channels),
            v: Linear::init(rng, channels, channels),
            o: Linear::init(rng, channels, channels),
            num_heads,
        })
    }

    pub fn zeros(channels: usize, num_heads: usize) -> Result<Self> {
        check_heads(channels, num_heads)?;
        Ok(AttentionParams {
            q: Linear::zeros(channels, channels),
            k: Linear::zeros(channels, channels),
            v: Linear::zeros(channels, channels),
            o: Linear::zeros(channels, channels),
            num_heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.q.in_features()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads
    }
}

fn check_heads(channels: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || !channels.is_multiple_of(num_heads) {
        return Err(Error::invalid("attention", format!("num_heads {num_heads} must divide channels {channels}")));
    }
    Ok(())
}

impl<T: Real> Params<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
    pub activation: Activation,
}

impl<T: Real> FfnParams<T> {
    pub fn init(rng: &mut impl Rng, channels: usize, hidden: usize, activation: Activation) -> Self {
        FfnParams { up: Linear::init(rng, channels, hidden), down: Linear::init(rng, hidden, channels), activation }
    }

    pub fn zeros(channels: usize, hidden: usize, activation: Activation) -> Self {
        FfnParams { up: Linear::zeros(channels, hidden), down: Linear::zeros(hidden, channels), activation }
    }

    pub fn hidden(&self) -> usize {
        self.up.out_features()
    }
}

impl<T: Real> Params<T> for FfnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T: Real> EncoderLayerParams<T> {
    pub fn init(rng: &mut impl Rng, cfg: &StackConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(EncoderLayerParams {
            ln1: LayerNormParams::new(c),
            attn: AttentionParams::init(rng, c, cfg.num_heads)?,
            ln2: LayerNormParams::new(c),
            ffn: FfnParams::init(rng, c, c * cfg.ffn_expansion, cfg.activation),
        })
    }

    /// Layer whose attention and FFN blocks output exactly zero.
    pub fn zeros(cfg: &StackConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(EncoderLayerParams {
            ln1: LayerNormParams::new(c),
            attn: AttentionParams::zeros(c, cfg.num_heads)?,
            ln2: LayerNormParams::new(c),
            ffn: FfnParams::zeros(c, c * cfg.ffn_expansion, cfg.activation),
        })
    }

    pub fn channels(&self) -> usize {
        self.attn.channels()
    }
}

impl<T: Real> Params<T> for EncoderLayerParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStack<T> {
    pub layers: Vec<EncoderLayerParams<T>>,
}

impl<T: Real> EncoderStack<T> {
    pub fn init(rng: &mut impl Rng, cfg: &StackConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth).map(|_| EncoderLayerParams::init(rng, cfg)).collect::<Result<_>>()?;
        Ok(EncoderStack { layers })
    }

    pub fn zeros(cfg: &StackConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth).map(|_| EncoderLayerParams::zeros(cfg)).collect::<Result<_>>()?;
        Ok(EncoderStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.layers[0].channels()
    }
}

impl<T: Real> Params<T> for EncoderStack<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

fn expect_tokens<T: Real>(op: &'static str, z: &Tensor<T>, channels: usize) -> Result<()> {
    if z.rank() != 3 || z.shape()[2] != channels {
        return Err(Error::shapes(op, z.shape(), &[0, 0, channels]));
    }
    Ok(())
}

/// Multi-head scaled dot-product self-attention over `[B, T, C]` tokens.
pub fn multi_head_attention<T: Real>(tape: &Tape<T>, z: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    attention_with_weights(tape, z, p).map(|(out, _)| out)
}

/// As [`multi_head_attention`], also returning each head's `[B, T, T]`
/// attention matrix (rows are distributions over keys).
pub fn attention_with_weights<T: Real>(
    tape: &Tape<T>,
    z: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    expect_tokens("multi_head_attention", z, p.channels())?;
    let q = p.q.forward(tape, z)?;
    let k = p.k.forward(tape, z)?;
    let v = p.v.forward(tape, z)?;
    let d = p.head_dim();
    let scale = T::one() / T::of(d as f64).sqrt();
    let heads = vec![d; p.num_heads];
    let (qs, ks, vs) = if p.num_heads == 1 {
        (vec![q], vec![k], vec![v])
    } else {
        (tape.split(&q, 2, &heads)?, tape.split(&k, 2, &heads)?, tape.split(&v, 2, &heads)?)
    };
    let mut outs = Vec::with_capacity(p.num_heads);
    let mut maps = Vec::with_capacity(p.num_heads);
    for ((qh, kh), vh) in qs.iter().zip(&ks).zip(&vs) {
        let kt = tape.transpose_last_two(kh)?;
        let scores = tape.scale(&tape.matmul(qh, &kt)?, scale)?;
        let attn = tape.softmax(&scores, 2)?;
        outs.push(tape.matmul(&attn, vh)?);
        maps.push(attn);
    }
    let merged = if outs.len() == 1 { outs.pop().expect("one head") } else { tape.concat(&outs, 2)? };
    Ok((p.o.forward(tape, &merged)?, maps))
}

/// `down(act(up(z)))`, applied independently at each token position.
pub fn feed_forward<T: Real>(tape: &Tape<T>, z: &Tensor<T>, p: &FfnParams<T>) -> Result<Tensor<T>> {
    if z.rank() < 1 || z.shape()[z.rank() - 1] != p.up.in_features() {
        return Err(Error::shapes("feed_forward", z.shape(), p.up.weight.shape()));
    }
    let h = p.up.forward(tape, z)?;
    let h = match p.activation {
        Activation::Gelu => tape.gelu(&h)?,
        Activation::Relu => tape.relu(&h)?,
    };
    p.down.forward(tape, &h)
}

/// One pre-norm layer: `z' = MHA(LN1(z)) + z`, then `FFN(LN2(z')) + z'`.
pub fn encoder_layer<T: Real>(tape: &Tape<T>, z_prev: &Tensor<T>, p: &EncoderLayerParams<T>) -> Result<Tensor<T>> {
    let eps = T::of(LN_EPS);
    let normed = p.ln1.forward(tape, z_prev, eps)?;
    let attended = multi_head_attention(tape, &normed, &p.attn)?;
    let mid = tape.add(&attended, z_prev)?;
    let normed = p.ln2.forward(tape, &mid, eps)?;
    let fed = feed_forward(tape, &normed, &p.ffn)?;
    tape.add(&fed, &mid)
}

/// Runs every layer in order and returns the last layer's output.
pub fn encoder_stack_forward<T: Real>(tape: &Tape<T>, z0: &Tensor<T>, stack: &EncoderStack<T>) -> Result<Tensor<T>> {
    if stack.layers.is_empty() {
        return Err(Error::invalid("encoder_stack_forward", "stack has no layers"));
    }
    stack.layers.iter().try_fold(z0.clone(), |z, layer| encoder_layer(tape, &z, layer))
}
