//! The N-to-one fusion block.
//!
//! Feature maps of the available modalities are flattened into `C`-dimensional
//! tokens, mixed by a transformer stack (correlation extraction), turned into
//! per-voxel weights by a softmax across modalities (modal attention), and the
//! weights convexly combine the *original* feature maps:
//!
//! ```text
//! z0       = concat_k tokens(f_k)                       [B, R·|K|, C]
//! I'       = split(reshape(stack(z0)))                  f'_k: [B, C, R_f]
//! m_k^i    = exp(v_k^i) / Σ_{j∈K} exp(v_j^i)
//! f_s      = Σ_{k∈K} f_k · m_k
//! ```
//!
//! Missing modalities are never materialised; one parameter set serves every
//! non-empty subset.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Params};
use crate::tensor::{numel, Real, Tape, Tensor};
use crate::transformer::{encoder_stack_forward, Activation, EncoderStack, StackConfig};

/// Feature maps of the available modalities, keyed by id in `1..=total`.
#[derive(Clone, Debug)]
pub struct ModalitySet<T> {
    total: usize,
    entries: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> ModalitySet<T> {
    /// Every tensor must be `[B, C, R_f...]` with at least one feature axis,
    /// and all must share one shape.
    pub fn new(total: usize, entries: impl IntoIterator<Item = (usize, Tensor<T>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, t) in entries {
            if id == 0 || id > total {
                return Err(Error::ModalityOutOfRange { id, max: total });
            }
            if map.insert(id, t).is_some() {
                return Err(Error::invalid("modality set", format!("duplicate modality id {id}")));
            }
        }
        let first = map.values().next().ok_or(Error::NoModalities)?;
        if first.rank() < 3 {
            return Err(Error::invalid(
                "modality set",
                format!("features must be [B, C, R_f...], got {:?}", first.shape()),
            ));
        }
        for t in map.values() {
            if t.shape() != first.shape() {
                return Err(Error::shapes("modality set", first.shape(), t.shape()));
            }
        }
        Ok(ModalitySet { total, entries: map })
    }

    /// Total number of possible modalities, `S`.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Number of available modalities, `|K|`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Available ids in ascending order.
    pub fn ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.values()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensors().next().expect("non-empty").shape()
    }

    pub fn batch(&self) -> usize {
        self.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.shape()[1]
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.shape()[2..]
    }

    /// Voxels per feature map, `R = prod(R_f)`.
    pub fn voxels(&self) -> usize {
        numel(self.feature_shape())
    }

    /// Same tensors under new ids: `mapping(old) -> new`.
    pub fn relabel(&self, mapping: impl Fn(usize) -> usize) -> Result<Self> {
        Self::new(self.total, self.iter().map(|(k, t)| (mapping(k), t.clone())))
    }

    /// Keeps only the given ids, all of which must be present.
    pub fn restrict(&self, ids: &[usize]) -> Result<Self> {
        let picked = ids
            .iter()
            .map(|&id| self.get(id).cloned().map(|t| (id, t)).ok_or(Error::ModalityOutOfRange { id, max: self.total }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.total, picked)
    }

    fn same_layout<U: Real>(&self, other: &ModalitySet<U>, op: &'static str) -> Result<()> {
        if self.ids() != other.ids() {
            return Err(Error::invalid(op, format!("modality ids {:?} vs {:?}", self.ids(), other.ids())));
        }
        if self.shape() != other.shape() {
            return Err(Error::shapes(op, self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Output of correlation extraction: `f'_k`, same ids and shapes as the input.
#[derive(Clone, Debug)]
pub struct TransformedSet<T>(pub ModalitySet<T>);

/// Per-modality, per-voxel fusion weights `m_k`.
#[derive(Clone, Debug)]
pub struct WeightMaps<T>(pub ModalitySet<T>);

/// Token sequence `[B, T, C]` with `T = R·|K|`; modality `layout[j]` owns
/// token positions `j·R .. (j+1)·R`.
#[derive(Clone, Debug)]
pub struct TokenBatch<T> {
    pub values: Tensor<T>,
    pub layout: Vec<usize>,
    pub feature_shape: Vec<usize>,
    pub total: usize,
}

impl<T: Real> TokenBatch<T> {
    pub fn num_tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn voxels(&self) -> usize {
        numel(&self.feature_shape)
    }
}

/// Flattens each `f_k` to `[B, R, C]` (channel-last tokens) and concatenates
/// along the token axis in ascending id order.
pub fn tokenize<T: Real>(tape: &Tape<T>, input: &ModalitySet<T>) -> Result<TokenBatch<T>> {
    tokenize_embedded(tape, input, None)
}

fn tokenize_embedded<T: Real>(
    tape: &Tape<T>,
    input: &ModalitySet<T>,
    embeddings: Option<&ModalityEmbeddings<T>>,
) -> Result<TokenBatch<T>> {
    if input.is_empty() {
        return Err(Error::NoModalities);
    }
    let (b, c, r) = (input.batch(), input.channels(), input.voxels());
    let mut runs = Vec::with_capacity(input.len());
    for (id, f) in input.iter() {
        let flat = tape.reshape(f, &[b, c, r])?;
        let mut tokens = tape.transpose_last_two(&flat)?;
        if let Some(emb) = embeddings {
            let e = emb.get(id)?;
            tokens = tape.add_bias(&tokens, e)?;
        }
        runs.push(tokens);
    }
    let values = if runs.len() == 1 { runs.pop().expect("one run") } else { tape.concat(&runs, 1)? };
    Ok(TokenBatch { values, layout: input.ids(), feature_shape: input.feature_shape().to_vec(), total: input.total() })
}

/// Inverse of [`tokenize`]: reshape `[B, T, C]` back into `|K|` maps of `[B, C, R_f]`.
pub fn detokenize<T: Real>(tape: &Tape<T>, tokens: &TokenBatch<T>) -> Result<ModalitySet<T>> {
    let v = &tokens.values;
    let r = tokens.voxels();
    if v.rank() != 3 || v.shape()[1] != r * tokens.layout.len() {
        return Err(Error::invalid(
            "detokenize",
            format!("token tensor {:?} does not hold {} modalities of {r} voxels", v.shape(), tokens.layout.len()),
        ));
    }
    let (b, c) = (v.shape()[0], v.shape()[2]);
    let runs =
        if tokens.layout.len() == 1 { vec![v.clone()] } else { tape.split(v, 1, &vec![r; tokens.layout.len()])? };
    let mut shape = vec![b, c];
    shape.extend_from_slice(&tokens.feature_shape);
    let entries = tokens
        .layout
        .iter()
        .zip(runs)
        .map(|(&id, run)| {
            let chw = tape.transpose_last_two(&run)?;
            Ok((id, tape.reshape(&chw, &shape)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ModalitySet::new(tokens.total, entries)
}

/// Runs the encoder stack on `z0` and reverts `z_l` to per-modality maps.
pub fn correlation_extraction<T: Real>(
    tape: &Tape<T>,
    z0: &TokenBatch<T>,
    stack: &EncoderStack<T>,
) -> Result<TransformedSet<T>> {
    let c = z0.values.shape().get(2).copied().unwrap_or(0);
    if stack.channels() != c {
        return Err(Error::shapes("correlation_extraction", z0.values.shape(), &[stack.channels()]));
    }
    let zl = encoder_stack_forward(tape, &z0.values, stack)?;
    let out =
        TokenBatch { values: zl, layout: z0.layout.clone(), feature_shape: z0.feature_shape.clone(), total: z0.total };
    Ok(TransformedSet(detokenize(tape, &out)?))
}

/// Stacks the maps as `[|K|, N]` rows in id order.
fn stack_rows<T: Real>(tape: &Tape<T>, set: &ModalitySet<T>) -> Result<Tensor<T>> {
    let n = numel(set.shape());
    let rows = set.tensors().map(|t| tape.reshape(t, &[1, n])).collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows.into_iter().next().expect("one row"))
    } else {
        tape.concat(&rows, 0)
    }
}

/// Softmax across modalities, independently at every (batch, channel, voxel).
pub fn modal_attention<T: Real>(tape: &Tape<T>, transformed: &TransformedSet<T>) -> Result<WeightMaps<T>> {
    let set = &transformed.0;
    let scores = stack_rows(tape, set)?;
    let weights = tape.softmax(&scores, 0)?;
    let pieces = if set.len() == 1 { vec![weights] } else { tape.split(&weights, 0, &vec![1; set.len()])? };
    let entries = set
        .ids()
        .into_iter()
        .zip(pieces)
        .map(|(id, p)| Ok((id, tape.reshape(&p, set.shape())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightMaps(ModalitySet::new(set.total(), entries)?))
}

/// `f_s = Σ_k f_k · m_k` over the original (untransformed) inputs.
pub fn fuse<T: Real>(tape: &Tape<T>, original: &ModalitySet<T>, weights: &WeightMaps<T>) -> Result<Tensor<T>> {
    original.same_layout(&weights.0, "fuse")?;
    let products =
        original.tensors().zip(weights.0.tensors()).map(|(f, m)| tape.mul(f, m)).collect::<Result<Vec<_>>>()?;
    let product_set = ModalitySet::new(original.total(), original.ids().into_iter().zip(products))?;
    sum_over_modalities(tape, &product_set)
}

pub(crate) fn sum_over_modalities<T: Real>(tape: &Tape<T>, set: &ModalitySet<T>) -> Result<Tensor<T>> {
    let rows = stack_rows(tape, set)?;
    let total = tape.sum_axis(&rows, 0)?;
    tape.reshape(&total, set.shape())
}

/// The full block: `F(I) -> f_s`.
pub fn tfusion_forward<T: Real>(tape: &Tape<T>, input: &ModalitySet<T>, stack: &EncoderStack<T>) -> Result<Tensor<T>> {
    let z0 = tokenize(tape, input)?;
    let transformed = correlation_extraction(tape, &z0, stack)?;
    let weights = modal_attention(tape, &transformed)?;
    fuse(tape, input, &weights)
}

/// Ablation: modal attention applied directly to the raw inputs.
pub fn tfusion_without_ce<T: Real>(tape: &Tape<T>, input: &ModalitySet<T>) -> Result<Tensor<T>> {
    let weights = modal_attention(tape, &TransformedSet(input.clone()))?;
    fuse(tape, input, &weights)
}

/// Ablation: unweighted sum of the transformed maps `Σ_k f'_k`.
pub fn tfusion_without_ma<T: Real>(
    tape: &Tape<T>,
    input: &ModalitySet<T>,
    stack: &EncoderStack<T>,
) -> Result<Tensor<T>> {
    let z0 = tokenize(tape, input)?;
    let transformed = correlation_extraction(tape, &z0, stack)?;
    sum_over_modalities(tape, &transformed.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoCe,
    NoMa,
}

/// Block configuration as it appears in experiment config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub channels: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub activation: Activation,
    pub modality_embeddings: bool,
    pub variant: Variant,
}

impl Default for BlockConfig {
    fn default() -> Self {
        let s = StackConfig::default();
        BlockConfig {
            channels: s.channels,
            depth: s.depth,
            num_heads: s.num_heads,
            ffn_expansion: s.ffn_expansion,
            activation: s.activation,
            modality_embeddings: false,
            variant: Variant::Full,
        }
    }
}

impl BlockConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            channels: self.channels,
            depth: self.depth,
            num_heads: self.num_heads,
            ffn_expansion: self.ffn_expansion,
            activation: self.activation,
        }
    }
}

/// Learned per-modality vectors added to that modality's tokens.
#[derive(Clone, Debug)]
pub struct ModalityEmbeddings<T> {
    pub table: Vec<Tensor<T>>,
}

impl<T: Real> ModalityEmbeddings<T> {
    pub fn init(rng: &mut impl Rng, total: usize, channels: usize) -> Self {
        let table = (0..total)
            .map(|_| {
                let v = (0..channels).map(|_| T::of(rng.random_range(-0.02..0.02))).collect();
                Tensor::from_parts(&[channels], v)
            })
            .collect();
        ModalityEmbeddings { table }
    }

    fn get(&self, id: usize) -> Result<&Tensor<T>> {
        self.table.get(id.wrapping_sub(1)).ok_or(Error::ModalityOutOfRange { id, max: self.table.len() })
    }
}

impl<T: Real> Params<T> for ModalityEmbeddings<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, t) in self.table.iter().enumerate() {
            f(&join(prefix, &format!("{}", i + 1)), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, t) in self.table.iter_mut().enumerate() {
            f(&join(prefix, &format!("{}", i + 1)), t);
        }
    }
}

/// Learnable state of one fusion block plus its variant.
#[derive(Clone, Debug)]
pub struct TFusionBlock<T> {
    pub variant: Variant,
    pub stack: Option<EncoderStack<T>>,
    pub embeddings: Option<ModalityEmbeddings<T>>,
}

impl<T: Real> TFusionBlock<T> {
    pub fn init(rng: &mut impl Rng, cfg: &BlockConfig, total: usize) -> Result<Self> {
        let stack = match cfg.variant {
            Variant::NoCe => None,
            _ => Some(EncoderStack::init(rng, &cfg.stack())?),
        };
        let embeddings =
            (cfg.modality_embeddings && stack.is_some()).then(|| ModalityEmbeddings::init(rng, total, cfg.channels));
        Ok(TFusionBlock { variant: cfg.variant, stack, embeddings })
    }

    pub fn forward(&self, tape: &Tape<T>, input: &ModalitySet<T>) -> Result<Tensor<T>> {
        let Some(stack) = &self.stack else {
            return tfusion_without_ce(tape, input);
        };
        let z0 = tokenize_embedded(tape, input, self.embeddings.as_ref())?;
        let transformed = correlation_extraction(tape, &z0, stack)?;
        match self.variant {
            Variant::NoMa => sum_over_modalities(tape, &transformed.0),
            _ => {
                let weights = modal_attention(tape, &transformed)?;
                fuse(tape, input, &weights)
            }
        }
    }
}

impl<T: Real> Params<T> for TFusionBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(s) = &self.stack {
            s.visit(&join(prefix, "stack"), f);
        }
        if let Some(e) = &self.embeddings {
            e.visit(&join(prefix, "embed"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(s) = &mut self.stack {
            s.visit_mut(&join(prefix, "stack"), f);
        }
        if let Some(e) = &mut self.embeddings {
            e.visit_mut(&join(prefix, "embed"), f);
        }
    }
}
