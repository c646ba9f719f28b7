//! Competing N-to-one strategies sharing the [`ModalitySet`] interface.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{sum_over_modalities, ModalitySet};
use crate::nn::{join, Linear, Params};
use crate::tensor::{numel, Real, Tape, Tensor};

/// Voxelwise arithmetic mean over the available modalities (divides by `|K|`).
pub fn mean_fusion<T: Real>(tape: &Tape<T>, input: &ModalitySet<T>) -> Result<Tensor<T>> {
    if input.is_empty() {
        return Err(Error::NoModalities);
    }
    let sum = sum_over_modalities(tape, input)?;
    if input.len() == 1 {
        return Ok(sum);
    }
    tape.scale(&sum, T::of(1.0 / input.len() as f64))
}

/// Voxelwise maximum; ties resolve to the lowest modality id.
pub fn max_fusion<T: Real>(tape: &Tape<T>, input: &ModalitySet<T>) -> Result<Tensor<T>> {
    if input.is_empty() {
        return Err(Error::NoModalities);
    }
    let n = numel(input.shape());
    let rows = input.tensors().map(|t| tape.reshape(t, &[1, n])).collect::<Result<Vec<_>>>()?;
    let stacked = if rows.len() == 1 { rows.into_iter().next().expect("one row") } else { tape.concat(&rows, 0)? };
    let best = tape.max_axis(&stacked, 0)?;
    tape.reshape(&best, input.shape())
}

/// Fixed-arity channel-concatenation fuser: absent modalities become zeros.
///
/// The first projection maps `S·C -> C`; further layers are `C -> C` with a
/// ReLU in between.
#[derive(Clone, Debug)]
pub struct ConvFusionParams<T> {
    pub total: usize,
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> ConvFusionParams<T> {
    pub fn init(rng: &mut impl Rng, total: usize, channels: usize, depth: usize) -> Result<Self> {
        Self::check(total, channels, depth)?;
        let layers =
            (0..depth).map(|i| Linear::init(rng, if i == 0 { total * channels } else { channels }, channels)).collect();
        Ok(ConvFusionParams { total, layers })
    }

    pub fn zeros(total: usize, channels: usize, depth: usize) -> Result<Self> {
        Self::check(total, channels, depth)?;
        let layers =
            (0..depth).map(|i| Linear::zeros(if i == 0 { total * channels } else { channels }, channels)).collect();
        Ok(ConvFusionParams { total, layers })
    }

    fn check(total: usize, channels: usize, depth: usize) -> Result<()> {
        if total == 0 || channels == 0 || depth == 0 {
            return Err(Error::invalid(
                "conv fusion",
                format!("need S, C, depth ≥ 1, got S={total} C={channels} depth={depth}"),
            ));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.layers[0].out_features()
    }
}

impl<T: Real> Params<T> for ConvFusionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Concatenates all `S` channel blocks in id order (zeros where absent) and
/// applies the 1×1 projection at every voxel.
pub fn zero_pad_conv_fusion<T: Real>(
    tape: &Tape<T>,
    input: &ModalitySet<T>,
    p: &ConvFusionParams<T>,
) -> Result<Tensor<T>> {
    if input.is_empty() {
        return Err(Error::NoModalities);
    }
    if let Some(&id) = input.ids().iter().find(|&&id| id > p.total) {
        return Err(Error::ModalityOutOfRange { id, max: p.total });
    }
    let (b, c, r) = (input.batch(), input.channels(), input.voxels());
    if c * p.total != p.layers[0].in_features() {
        return Err(Error::shapes("zero_pad_conv_fusion", input.shape(), p.layers[0].weight.shape()));
    }
    let zero = Tensor::zeros(&[b, c, r]);
    let blocks = (1..=p.total)
        .map(|id| match input.get(id) {
            Some(f) => tape.reshape(f, &[b, c, r]),
            None => Ok(zero.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked =
        if blocks.len() == 1 { blocks.into_iter().next().expect("one block") } else { tape.concat(&blocks, 1)? };
    let mut h = tape.transpose_last_two(&stacked)?;
    for (i, layer) in p.layers.iter().enumerate() {
        if i > 0 {
            h = tape.relu(&h)?;
        }
        h = layer.forward(tape, &h)?;
    }
    let chw = tape.transpose_last_two(&h)?;
    tape.reshape(&chw, input.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[(usize, f64)], total: usize) -> ModalitySet<f64> {
        ModalitySet::new(total, values.iter().map(|&(k, v)| (k, Tensor::full(&[1, 2, 3], v)))).unwrap()
    }

    fn constant(t: &Tensor<f64>) -> f64 {
        let v = t.data()[0];
        assert!(t.data().iter().all(|&x| x == v), "not constant: {t:?}");
        v
    }

    #[test]
    fn mean_hand_values() {
        let tape = Tape::new();
        assert_eq!(constant(&mean_fusion(&tape, &set(&[(1, 2.0), (2, 4.0)], 4)).unwrap()), 3.0);
        assert_eq!(constant(&mean_fusion(&tape, &set(&[(1, 1.0), (2, 2.0), (4, 6.0)], 4)).unwrap()), 3.0);
        let one = set(&[(2, 1.7)], 4);
        assert!(mean_fusion(&tape, &one).unwrap().bit_eq(one.get(2).unwrap()));
    }

    #[test]
    fn max_hand_values_and_tie_gradient() {
        let tape = Tape::new();
        assert_eq!(constant(&max_fusion(&tape, &set(&[(1, 2.0), (2, 4.0)], 2)).unwrap()), 4.0);
        assert_eq!(constant(&max_fusion(&tape, &set(&[(1, -3.0), (2, -1.0)], 2)).unwrap()), -1.0);
        let one = set(&[(3, 0.25)], 4);
        assert!(max_fusion(&tape, &one).unwrap().bit_eq(one.get(3).unwrap()));

        let a = tape.leaf(&Tensor::full(&[1, 1, 1], 5.0));
        let b = tape.leaf(&Tensor::full(&[1, 1, 1], 5.0));
        let tied = ModalitySet::new(2, [(1, a.clone()), (2, b.clone())]).unwrap();
        let out = tape.sum_all(&max_fusion(&tape, &tied).unwrap()).unwrap();
        let g = tape.backward(&out).unwrap();
        assert_eq!(g.wrt(&a).unwrap().item(), 1.0);
        assert_eq!(g.wrt(&b).unwrap().item(), 0.0);
    }

    fn averaging(total: usize, channels: usize) -> ConvFusionParams<f64> {
        let mut p = ConvFusionParams::zeros(total, channels, 1).unwrap();
        let mut w = vec![0.0; total * channels * channels];
        for s in 0..total {
            for c in 0..channels {
                w[(s * channels + c) * channels + c] = 1.0 / total as f64;
            }
        }
        p.layers[0].weight = Tensor::new(&[total * channels, channels], w).unwrap();
        p
    }

    #[test]
    fn conv_with_averaging_weights_is_mean_when_all_present() {
        let tape = Tape::new();
        let full = ModalitySet::new(
            3,
            (1..=3).map(|k| (k, Tensor::from_f64(&[1, 2, 2], &[k as f64, 1.0, -2.0 * k as f64, 0.5]).unwrap())),
        )
        .unwrap();
        let conv = zero_pad_conv_fusion(&tape, &full, &averaging(3, 2)).unwrap();
        let mean = mean_fusion(&tape, &full).unwrap();
        assert!(conv.max_abs_diff(&mean).unwrap() < 1e-12);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let tape = Tape::new();
        let mut p = ConvFusionParams::<f64>::zeros(2, 2, 1).unwrap();
        p.layers[0].bias = Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap();
        let out = zero_pad_conv_fusion(&tape, &set(&[(1, 9.0)], 2), &p).unwrap();
        assert_eq!(out.to_vec(), [0.5, 0.5, 0.5, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn conv_rejects_ids_beyond_fixed_arity() {
        let tape = Tape::new();
        let p = ConvFusionParams::<f64>::zeros(2, 2, 1).unwrap();
        assert!(matches!(
            zero_pad_conv_fusion(&tape, &set(&[(1, 1.0), (3, 1.0)], 3), &p),
            Err(Error::ModalityOutOfRange { id: 3, max: 2 })
        ));
    }

    #[test]
    fn conv_absence_equals_zero_features() {
        let tape = Tape::new();
        let p = averaging(2, 2);
        let absent = zero_pad_conv_fusion(&tape, &set(&[(1, 4.0)], 2), &p).unwrap();
        let zero = zero_pad_conv_fusion(&tape, &set(&[(1, 4.0), (2, 0.0)], 2), &p).unwrap();
        assert!(absent.bit_eq(&zero));
        assert_eq!(constant(&absent), 2.0);
    }

    #[test]
    fn deeper_conv_keeps_shape() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = ConvFusionParams::<f64>::init(&mut rng, 4, 2, 3).unwrap();
        assert_eq!(p.named_params().len(), 6);
        let tape = Tape::new();
        let out = zero_pad_conv_fusion(&tape, &set(&[(2, 1.0), (4, -1.0)], 4), &p).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3]);
    }
}
