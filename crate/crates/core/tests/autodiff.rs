use nfuse::suites::{checked_op_families, gradcheck, Scope};
use nfuse::tensor::{finite_difference_grad, max_relative_error, OpKind};
use nfuse::transformer::{
    encoder_layer, encoder_stack_forward, feed_forward, Activation, EncoderStack, FfnParams, StackConfig,
};
use nfuse::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn backward_of_sum_of_squares_is_twice_x() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    let loss = tape.sum_all(&tape.mul(&x, &x).unwrap()).unwrap();
    let g = tape.backward(&loss).unwrap().wrt(&x).unwrap();
    assert_eq!(g.to_f64_vec(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_summed_matmul_is_ones_times_b_transposed() {
    let tape = Tape::new();
    let a = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]));
    let b = tape.leaf(&t(&[3, 2], &[0.2, -0.7, 1.1, 0.4, -0.3, 2.0]));
    let loss = tape.sum_all(&tape.matmul(&a, &b).unwrap()).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let expected_row: Vec<f64> = (0..3).map(|i| b.data()[2 * i] + b.data()[2 * i + 1]).collect();
    let da = grads.wrt(&a).unwrap().to_f64_vec();
    for row in da.chunks(3) {
        for (got, want) in row.iter().zip(&expected_row) {
            assert!((got - want).abs() < 1e-12);
        }
    }
    let db = grads.wrt(&b).unwrap().to_f64_vec();
    let col_sums: Vec<f64> = (0..3).map(|k| a.data()[k] + a.data()[3 + k]).collect();
    for (k, pair) in db.chunks(2).enumerate() {
        assert!((pair[0] - col_sums[k]).abs() < 1e-12 && (pair[1] - col_sums[k]).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss_and_foreign_nodes() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let y = tape.exp(&x).unwrap();
    assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    let other = Tape::<f64>::new();
    let z = other.sum_all(&other.leaf(&t(&[2], &[1.0, 2.0]))).unwrap();
    assert!(matches!(tape.backward(&z), Err(Error::NotOnTape)));
    assert!(matches!(tape.backward(&Tensor::scalar(1.0)), Err(Error::NotOnTape)));
}

#[test]
fn layer_norm_edge_cases() {
    let tape = Tape::<f64>::new();
    let constant = tape.layer_norm(&t(&[4], &[5.0; 4]), &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert!(constant.to_f64_vec().iter().all(|v| v.abs() < 1e-6));
    let affine =
        tape.layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), &Tensor::zeros(&[3]), &Tensor::full(&[3], 7.0), 1e-5).unwrap();
    assert_eq!(affine.to_f64_vec(), vec![7.0; 3]);
    assert!(tape.layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), &Tensor::ones(&[2]), &Tensor::zeros(&[3]), 1e-5).is_err());
}

#[test]
fn feed_forward_identity_construction_on_nonnegative_input() {
    let c = 4;
    let hidden = 8;
    let mut p = FfnParams::<f64>::zeros(c, hidden, Activation::Relu);
    let mut up = vec![0.0; c * hidden];
    let mut down = vec![0.0; hidden * c];
    for i in 0..c {
        up[i * hidden + i] = 1.0;
        down[i * c + i] = 1.0;
    }
    p.up.weight = t(&[c, hidden], &up);
    p.down.weight = t(&[hidden, c], &down);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..2 * 5 * c).map(|_| rng.random_range(0.0..4.0)).collect();
    let x = t(&[2, 5, c], &x);
    let y = feed_forward(&Tape::new(), &x, &p).unwrap();
    assert!(y.bit_eq(&x));
    let zero = feed_forward(&Tape::new(), &x, &FfnParams::zeros(c, hidden, Activation::Gelu)).unwrap();
    assert!(zero.to_f64_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_eight_layer_stack_is_exact_identity() {
    let cfg = StackConfig { channels: 8, depth: 8, num_heads: 4, ..StackConfig::default() };
    let stack = EncoderStack::<f32>::zeros(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f32> = (0..2 * 12 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Tensor::new(&[2, 12, 8], x).unwrap();
    let y = encoder_stack_forward(&Tape::new(), &x, &stack).unwrap();
    assert_eq!(y.shape(), &[2, 12, 8]);
    assert!(y.bit_eq(&x));
    let layer = encoder_layer(&Tape::new(), &x, &stack.layers[0]).unwrap();
    assert!(layer.bit_eq(&x));
}

#[test]
fn every_scope_passes_in_double_precision() {
    for scope in Scope::ALL {
        let reports = gradcheck::<f64>(scope, 0, None).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
    }
}

#[test]
fn op_coverage_lists_every_differentiable_op() {
    let listed = checked_op_families();
    let expected: Vec<&str> = OpKind::ALL.iter().filter(|&&k| k != OpKind::Leaf).map(|k| k.name()).collect();
    assert_eq!(listed, expected);
}

#[test]
fn a_corrupted_backward_rule_is_caught_and_named() {
    for op in OpKind::ALL.iter().copied().filter(|&k| k != OpKind::Leaf) {
        let reports = gradcheck::<f64>(Scope::Ops, 0, Some(op)).unwrap();
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.group.as_str()).collect();
        assert!(failed.contains(&op.name()), "fault in {} went unnoticed: {failed:?}", op.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_and_softmax_gradients_match_finite_differences(
        m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.5..1.5)).collect() };
        let a = t(&[m, k], &draw(m * k));
        let b = t(&[k, n], &draw(k * n));
        let w = t(&[m, n], &draw(m * n));
        let f = |tape: &Tape<f64>, a: &Tensor<f64>| -> nfuse::Result<Tensor<f64>> {
            let y = tape.softmax(&tape.matmul(a, &b)?, 1)?;
            tape.sum_all(&tape.mul(&y, &w)?)
        };
        let tape = Tape::new();
        let leaf = tape.leaf(&a);
        let analytic = tape.backward(&f(&tape, &leaf).unwrap()).unwrap().wrt(&leaf).unwrap();
        let numeric = finite_difference_grad(|x| Ok(f(&Tape::new(), x)?.item()), &a, 1e-6).unwrap();
        let err = max_relative_error(&analytic, &numeric).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }
}
