use nfuse::baselines::{max_fusion, mean_fusion, zero_pad_conv_fusion, ConvFusionParams};
use nfuse::fusion::{
    correlation_extraction, detokenize, fuse, modal_attention, tfusion_forward, tfusion_without_ce, tfusion_without_ma,
    tokenize, ModalitySet, TransformedSet,
};
use nfuse::transformer::{EncoderStack, StackConfig};
use nfuse::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOTAL: usize = 4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap()
}

fn stack(rng: &mut ChaCha8Rng, depth: usize) -> EncoderStack<f32> {
    let cfg = StackConfig { channels: 4, depth, num_heads: 2, ..StackConfig::default() };
    EncoderStack::init(rng, &cfg).unwrap()
}

/// A random set over `ids` with layout `[batch, 4, feature...]`.
fn random_set(rng: &mut ChaCha8Rng, ids: &[usize], batch: usize, feature: &[usize]) -> ModalitySet<f32> {
    let mut shape = vec![batch, 4];
    shape.extend_from_slice(feature);
    ModalitySet::new(TOTAL, ids.iter().map(|&id| (id, random_tensor(rng, &shape)))).unwrap()
}

fn scenario() -> impl Strategy<Value = (Vec<usize>, usize, Vec<usize>, usize, u64)> {
    (
        proptest::sample::subsequence((1..=TOTAL).collect::<Vec<_>>(), 1..=TOTAL),
        1usize..=2,
        proptest::collection::vec(1usize..=3, 1..=3),
        1usize..=2,
        any::<u64>(),
    )
}

fn constant(shape: &[usize], v: f32) -> Tensor<f32> {
    Tensor::full(shape, v)
}

#[test]
fn single_modality_weights_are_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = random_set(&mut rng, &[3], 2, &[2, 3]);
    let weights = modal_attention(&Tape::new(), &TransformedSet(set)).unwrap();
    assert!(weights.0.tensors().next().unwrap().data().iter().all(|&w| w == 1.0));
}

#[test]
fn identical_scores_split_evenly() {
    let shape = [1, 4, 3];
    let set = ModalitySet::new(2, [(1, constant(&shape, 0.7)), (2, constant(&shape, 0.7))]).unwrap();
    let weights = modal_attention(&Tape::new(), &TransformedSet(set)).unwrap();
    for m in weights.0.tensors() {
        assert!(m.data().iter().all(|&w| w == 0.5));
    }
}

#[test]
fn without_ce_on_zero_inputs_gives_zero_output() {
    let shape = [2, 4, 5];
    let set = ModalitySet::new(2, [(1, constant(&shape, 0.0)), (2, constant(&shape, 0.0))]).unwrap();
    let out = tfusion_without_ce(&Tape::new(), &set).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn without_ma_sums_rather_than_averages() {
    let shape = [1, 4, 3];
    let zero =
        EncoderStack::<f32>::zeros(&StackConfig { channels: 4, depth: 2, num_heads: 2, ..StackConfig::default() })
            .unwrap();
    for k in 1..=TOTAL {
        let set = ModalitySet::new(TOTAL, (1..=k).map(|id| (id, constant(&shape, 1.0)))).unwrap();
        let out = tfusion_without_ma(&Tape::new(), &set, &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == k as f32), "k={k}");
    }
}

#[test]
fn empty_sets_are_rejected_everywhere() {
    assert!(matches!(ModalitySet::<f32>::new(4, []), Err(Error::NoModalities)));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = random_set(&mut rng, &[1, 2], 1, &[2]);
    assert!(matches!(set.restrict(&[]), Err(Error::NoModalities)));
}

#[test]
fn tokenize_detokenize_roundtrip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = random_set(&mut rng, &[1, 2, 4], 2, &[4, 4]);
    let tape = Tape::new();
    let tokens = tokenize(&tape, &set).unwrap();
    assert_eq!(tokens.values.shape(), &[2, 48, 4]);
    let back = detokenize(&tape, &tokens).unwrap();
    assert_eq!(back.ids(), set.ids());
    for (a, b) in back.tensors().zip(set.tensors()) {
        assert!(a.bit_eq(b));
    }
}

/// Absent and zero-present modalities are indistinguishable to the
/// zero-padding baseline, but TFusion never materializes absent ones, so a
/// present zero modality takes part in its softmax and changes the result.
#[test]
fn zero_padding_conflates_absence_with_zero_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let shape = [2, 4, 6];
    let f1 = random_tensor(&mut rng, &shape);
    let f2 = random_tensor(&mut rng, &shape);
    let zeros = Tensor::<f32>::zeros(&shape);
    let absent = ModalitySet::new(3, [(1, f1.clone()), (2, f2.clone())]).unwrap();
    let zero_present = ModalitySet::new(3, [(1, f1.clone()), (2, f2.clone()), (3, zeros)]).unwrap();
    let tape = Tape::new();

    let conv = ConvFusionParams::<f32>::init(&mut rng, 3, 4, 1).unwrap();
    let conv_absent = zero_pad_conv_fusion(&tape, &absent, &conv).unwrap();
    let conv_zero = zero_pad_conv_fusion(&tape, &zero_present, &conv).unwrap();
    assert!(conv_absent.bit_eq(&conv_zero));

    let st = stack(&mut rng, 2);
    let tf_absent = tfusion_forward(&tape, &absent, &st).unwrap();
    let tf_zero = tfusion_forward(&tape, &zero_present, &st).unwrap();
    let tf_gap = tf_absent.max_abs_diff(&tf_zero).unwrap();
    assert!(tf_gap > 1e-3, "TFusion gap {tf_gap}");

    let f3 = random_tensor(&mut rng, &shape);
    let present = ModalitySet::new(3, [(1, f1), (2, f2), (3, f3)]).unwrap();
    let conv_gap = zero_pad_conv_fusion(&tape, &present, &conv).unwrap().max_abs_diff(&conv_absent).unwrap();
    assert!(conv_gap > 1e-3, "conv gap {conv_gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_form_a_partition_of_unity((ids, batch, feature, depth, seed) in scenario()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, &ids, batch, &feature);
        let st = stack(&mut rng, depth);
        let tape = Tape::new();
        let z0 = tokenize(&tape, &set).unwrap();
        let weights = modal_attention(&tape, &correlation_extraction(&tape, &z0, &st).unwrap()).unwrap();
        let n = set.shape().iter().product::<usize>();
        for v in 0..n {
            let s: f64 = weights.0.tensors().map(|m| m.data()[v] as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "voxel {v} sums to {s}");
            prop_assert!(weights.0.tensors().all(|m| m.data()[v] >= 0.0));
        }
    }

    #[test]
    fn fused_values_are_convex_combinations((ids, batch, feature, depth, seed) in scenario()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, &ids, batch, &feature);
        let st = stack(&mut rng, depth);
        let tape = Tape::new();
        let outputs = [
            tfusion_forward(&tape, &set, &st).unwrap(),
            tfusion_without_ce(&tape, &set).unwrap(),
            mean_fusion(&tape, &set).unwrap(),
            max_fusion(&tape, &set).unwrap(),
        ];
        for (v, _) in set.tensors().next().unwrap().data().iter().enumerate() {
            let lo = set.tensors().map(|f| f.data()[v]).fold(f32::INFINITY, f32::min) as f64;
            let hi = set.tensors().map(|f| f.data()[v]).fold(f32::NEG_INFINITY, f32::max) as f64;
            for out in &outputs {
                let x = out.data()[v] as f64;
                prop_assert!(x >= lo - 1e-6 && x <= hi + 1e-6, "{x} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn one_modality_passes_through_bitwise(id in 1usize..=TOTAL, feature in proptest::collection::vec(1usize..=3, 1..=3), depth in 1usize..=3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, &[id], 2, &feature);
        let st = stack(&mut rng, depth);
        let input = set.get(id).unwrap();
        let tape = Tape::new();
        prop_assert!(tfusion_forward(&tape, &set, &st).unwrap().bit_eq(input));
        prop_assert!(tfusion_without_ce(&tape, &set).unwrap().bit_eq(input));
        prop_assert!(mean_fusion(&tape, &set).unwrap().bit_eq(input));
        prop_assert!(max_fusion(&tape, &set).unwrap().bit_eq(input));
    }

    #[test]
    fn relabeling_modalities_leaves_the_fusion_unchanged((ids, batch, feature, depth, seed) in scenario(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, &ids, batch, &feature);
        let st = stack(&mut rng, depth);
        let mut perm: Vec<usize> = (1..=TOTAL).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let relabeled = set.relabel(|k| perm[k - 1]).unwrap();
        let tape = Tape::new();
        let a = tfusion_forward(&tape, &set, &st).unwrap();
        let b = tfusion_forward(&tape, &relabeled, &st).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
    }

    #[test]
    fn every_fuser_keeps_the_per_modality_shape((ids, batch, feature, depth, seed) in scenario()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, &ids, batch, &feature);
        let st = stack(&mut rng, depth);
        let conv = ConvFusionParams::<f32>::init(&mut rng, TOTAL, 4, depth).unwrap();
        let tape = Tape::new();
        let z0 = tokenize(&tape, &set).unwrap();
        let weights = modal_attention(&tape, &correlation_extraction(&tape, &z0, &st).unwrap()).unwrap();
        for out in [
            tfusion_forward(&tape, &set, &st).unwrap(),
            fuse(&tape, &set, &weights).unwrap(),
            tfusion_without_ma(&tape, &set, &st).unwrap(),
            zero_pad_conv_fusion(&tape, &set, &conv).unwrap(),
        ] {
            prop_assert_eq!(out.shape(), set.shape());
        }
    }
}
