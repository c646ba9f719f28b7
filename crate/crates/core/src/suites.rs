//! Verification suites: finite-difference gradient checks and randomized
//! invariant checks on the fusion block.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{max_fusion, mean_fusion, zero_pad_conv_fusion, ConvFusionParams};
use crate::error::Result;
use crate::fusion::{
    correlation_extraction, modal_attention, tfusion_forward, tokenize, BlockConfig, ModalitySet, TFusionBlock,
};
use crate::harness::rng;
use crate::model::{FuserKind, FusionModel, ModelConfig};
use crate::nn::Params;
use crate::tensor::{finite_difference_grad, max_relative_error, numel, OpKind, Real, Tape, Tensor};
use crate::transformer::{encoder_layer, EncoderLayerParams, EncoderStack, StackConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Layer,
    Block,
    EndToEnd,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Layer, Scope::Block, Scope::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Layer => "layer",
            Scope::Block => "block",
            Scope::EndToEnd => "end_to_end",
        }
    }

    /// Maximum relative error accepted at this scope.
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Ops | Scope::Layer => 1e-4,
            Scope::Block | Scope::EndToEnd => 1e-3,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub scope: Scope,
    /// Op family or parameter name.
    pub group: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<10} {:<32} max_rel_err {:.3e} (tol {:.0e})",
            if self.passed() { "ok" } else { "FAIL" },
            self.scope,
            self.group,
            self.max_rel_error,
            self.tolerance
        )
    }
}

fn step<T: Real>() -> T {
    T::of(if T::NAME == "f64" { 1e-6 } else { 1e-3 })
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..numel(shape)).map(|_| T::of(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `Σ y ⊙ w` for a fixed random `w`, so that no output direction is ignored.
fn probe<T: Real>(tape: &Tape<T>, y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    tape.sum_all(&tape.mul(y, w)?)
}

const GROUP_FLOOR: f64 = 1e-3;

type ParamFn<'a, T, P> = dyn Fn(&Tape<T>, &P, &[Tensor<T>]) -> Result<Tensor<T>> + 'a;

type ScalarFn<'a, T> = dyn Fn(&Tape<T>, &[Tensor<T>]) -> Result<Tensor<T>> + 'a;

/// Worst relative error over all inputs of a scalar function.
fn check_inputs<T: Real>(inputs: &[Tensor<T>], f: &ScalarFn<'_, T>, fault: Option<OpKind>) -> Result<f64> {
    let tape = Tape::new();
    tape.inject_fault(fault);
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let grads = tape.backward(&f(&tape, &leaves)?)?;
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let analytic = grads.wrt(&leaves[i])?;
        let numeric = finite_difference_grad(
            |xi| {
                let mut probe_in = inputs.to_vec();
                probe_in[i] = xi.clone();
                Ok(f(&Tape::new(), &probe_in)?.item())
            },
            &inputs[i],
            step(),
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}

fn replace_param<T: Real, P: Params<T>>(p: &mut P, index: usize, value: &Tensor<T>) {
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == index {
            *t = value.clone();
        }
        i += 1;
    });
}

/// One report per named parameter of `model` plus one per extra input.
fn check_params<T: Real, P: Params<T> + Clone>(
    scope: Scope,
    model: &P,
    inputs: &[(String, Tensor<T>)],
    f: &ParamFn<'_, T, P>,
    fault: Option<OpKind>,
) -> Result<Vec<GradReport>> {
    let tape = Tape::new();
    tape.inject_fault(fault);
    let bound = model.bind(&tape);
    let leaves: Vec<_> = inputs.iter().map(|(_, x)| tape.leaf(x)).collect();
    let grads = tape.backward(&f(&tape, &bound, &leaves)?)?;
    let param_grads = bound.gradients(&grads)?;
    let values: Vec<_> = inputs.iter().map(|(_, x)| x.clone()).collect();
    let mut pairs = Vec::new();
    for (i, (name, value)) in model.named_params().into_iter().enumerate() {
        let numeric = finite_difference_grad(
            |p| {
                let mut m = model.clone();
                replace_param(&mut m, i, p);
                Ok(f(&Tape::new(), &m, &values)?.item())
            },
            &value,
            step(),
        )?;
        pairs.push((name, param_grads[i].clone(), numeric));
    }
    for (i, (name, value)) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(
            |x| {
                let mut v = values.clone();
                v[i] = x.clone();
                Ok(f(&Tape::new(), model, &v)?.item())
            },
            value,
            step(),
        )?;
        pairs.push((name.clone(), grads.wrt(&leaves[i])?, numeric));
    }
    // Groups whose gradient is structurally zero (a key bias under softmax
    // shift invariance) are measured against a floor of GROUP_FLOOR times the
    // largest gradient of the check instead of against their own FD noise.
    let global = pairs
        .iter()
        .flat_map(|(_, a, n)| a.data().iter().chain(n.data().iter()))
        .map(|v| v.f64().abs())
        .fold(0.0, f64::max);
    pairs
        .into_iter()
        .map(|(group, analytic, numeric)| {
            let own = max_relative_error(&analytic, &numeric)?;
            let scale = analytic.data().iter().chain(numeric.data().iter()).map(|v| v.f64().abs()).fold(0.0, f64::max);
            let floored = scale.max(GROUP_FLOOR * global);
            Ok(GradReport {
                scope,
                group,
                max_rel_error: if floored > scale { own * scale.max(1e-12) / floored } else { own },
                tolerance: scope.tolerance(),
            })
        })
        .collect()
}

fn op_checks<T: Real>(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    let mut u = |shape: &[usize]| uniform::<T>(rng, shape, -1.5, 1.5);
    let a = u(&[2, 3, 4]);
    let b = u(&[2, 3, 4]);
    let w234 = u(&[2, 3, 4]);
    let w24 = u(&[2, 4]);
    let w6_4 = u(&[6, 4]);
    let w243 = u(&[2, 4, 3]);
    let w264 = u(&[2, 6, 4]);
    let w231 = u(&[2, 3, 1]);
    let w233 = u(&[2, 3, 3]);
    let w235 = u(&[2, 3, 5]);
    let m = u(&[2, 4, 5]);
    let pw = u(&[4, 5]);
    let bias = u(&[4]);
    let gamma = u(&[4]);
    let beta = u(&[4]);
    let logits = u(&[4, 3]);
    let small = uniform::<T>(rng, &[2, 3, 4], -1.0, 1.0);

    type Case<'a, T> = (OpKind, Vec<Tensor<T>>, Box<ScalarFn<'a, T>>);
    let cases: Vec<Case<'_, T>> = vec![
        (OpKind::Add, vec![a.clone(), b.clone()], Box::new(|t, x| probe(t, &t.add(&x[0], &x[1])?, &w234))),
        (OpKind::Sub, vec![a.clone(), b.clone()], Box::new(|t, x| probe(t, &t.sub(&x[0], &x[1])?, &w234))),
        (OpKind::Mul, vec![a.clone(), b.clone()], Box::new(|t, x| t.sum_all(&t.mul(&x[0], &x[1])?))),
        (OpKind::Scale, vec![a.clone()], Box::new(|t, x| probe(t, &t.scale(&x[0], T::of(-1.7))?, &w234))),
        (OpKind::Exp, vec![small.clone()], Box::new(|t, x| probe(t, &t.exp(&x[0])?, &w234))),
        (OpKind::Relu, vec![a.clone()], Box::new(|t, x| probe(t, &t.relu(&x[0])?, &w234))),
        (OpKind::Gelu, vec![a.clone()], Box::new(|t, x| probe(t, &t.gelu(&x[0])?, &w234))),
        (OpKind::SumAxis, vec![a.clone()], Box::new(|t, x| probe(t, &t.sum_axis(&x[0], 1)?, &w24))),
        (OpKind::MeanAxis, vec![a.clone()], Box::new(|t, x| probe(t, &t.mean_axis(&x[0], 1)?, &w24))),
        (OpKind::MaxAxis, vec![a.clone()], Box::new(|t, x| probe(t, &t.max_axis(&x[0], 1)?, &w24))),
        (OpKind::Reshape, vec![a.clone()], Box::new(|t, x| probe(t, &t.reshape(&x[0], &[6, 4])?, &w6_4))),
        (OpKind::TransposeLastTwo, vec![a.clone()], Box::new(|t, x| probe(t, &t.transpose_last_two(&x[0])?, &w243))),
        (
            OpKind::Concat,
            vec![a.clone(), b.clone()],
            Box::new(|t, x| probe(t, &t.concat(&[x[0].clone(), x[1].clone()], 1)?, &w264)),
        ),
        (
            OpKind::Split,
            vec![a.clone()],
            Box::new(|t, x| {
                let parts = t.split(&x[0], 2, &[1, 3])?;
                t.add(&probe(t, &parts[0], &w231)?, &probe(t, &parts[1], &w233)?)
            }),
        ),
        (OpKind::Matmul, vec![a.clone(), m.clone()], Box::new(|t, x| probe(t, &t.matmul(&x[0], &x[1])?, &w235))),
        (OpKind::Project, vec![a.clone(), pw.clone()], Box::new(|t, x| probe(t, &t.project(&x[0], &x[1])?, &w235))),
        (OpKind::AddBias, vec![a.clone(), bias.clone()], Box::new(|t, x| probe(t, &t.add_bias(&x[0], &x[1])?, &w234))),
        (OpKind::Softmax, vec![a.clone()], Box::new(|t, x| probe(t, &t.softmax(&x[0], 1)?, &w234))),
        (
            OpKind::LayerNorm,
            vec![a.clone(), gamma.clone(), beta.clone()],
            Box::new(|t, x| probe(t, &t.layer_norm(&x[0], &x[1], &x[2], T::of(1e-5))?, &w234)),
        ),
        (OpKind::CrossEntropy, vec![logits.clone()], Box::new(|t, x| t.cross_entropy(&x[0], &[2, 0, 1, 1]))),
    ];
    cases
        .into_iter()
        .map(|(kind, inputs, f)| {
            Ok(GradReport {
                scope: Scope::Ops,
                group: kind.name().to_string(),
                max_rel_error: check_inputs(&inputs, f.as_ref(), fault)?,
                tolerance: Scope::Ops.tolerance(),
            })
        })
        .collect()
}

/// Op families exercised by the `ops` scope.
pub fn checked_op_families() -> Vec<&'static str> {
    OpKind::ALL.iter().filter(|k| **k != OpKind::Leaf).map(|k| k.name()).collect()
}

/// Finite-difference verification at `scope`; one report per op family or parameter.
pub fn gradcheck<T: Real>(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    let mut r = rng::stream(seed, scope.name());
    match scope {
        Scope::Ops => op_checks::<T>(&mut r, fault),
        Scope::Layer => {
            let cfg = StackConfig { channels: 4, depth: 1, num_heads: 2, ..StackConfig::default() };
            let layer = perturbed(EncoderLayerParams::<T>::init(&mut r, &cfg)?, &mut r);
            let x = uniform::<T>(&mut r, &[2, 5, 4], -1.0, 1.0);
            let w = uniform::<T>(&mut r, &[2, 5, 4], -1.0, 1.0);
            check_params(
                scope,
                &layer,
                &[("input".into(), x)],
                &|t, p, x| probe(t, &encoder_layer(t, &x[0], p)?, &w),
                fault,
            )
        }
        Scope::Block => {
            let cfg = BlockConfig { channels: 4, depth: 2, num_heads: 2, ..BlockConfig::default() };
            let block = TFusionBlock::<T>::init(&mut r, &cfg, 2)?;
            let stack = perturbed(block.stack.expect("full variant has a stack"), &mut r);
            let f1 = uniform::<T>(&mut r, &[1, 4, 3], -1.0, 1.0);
            let f2 = uniform::<T>(&mut r, &[1, 4, 3], -1.0, 1.0);
            let w = uniform::<T>(&mut r, &[1, 4, 3], -1.0, 1.0);
            check_params(
                scope,
                &stack,
                &[("input.f1".into(), f1), ("input.f2".into(), f2)],
                &|t, s, x| {
                    let set = ModalitySet::new(2, [(1, x[0].clone()), (2, x[1].clone())])?;
                    probe(t, &tfusion_forward(t, &set, s)?, &w)
                },
                fault,
            )
        }
        Scope::EndToEnd => {
            let block = BlockConfig { channels: 4, depth: 2, num_heads: 2, ..BlockConfig::default() };
            let cfg = ModelConfig {
                fuser: FuserKind::Tfusion,
                total: 3,
                channels: 4,
                feature_shape: vec![3],
                num_classes: 3,
                block,
                conv_depth: 1,
            };
            let model = perturbed(FusionModel::<T>::init(&mut r, &cfg)?, &mut r);
            let f1 = uniform::<T>(&mut r, &[2, 4, 3], -1.0, 1.0);
            let f3 = uniform::<T>(&mut r, &[2, 4, 3], -1.0, 1.0);
            check_params(
                scope,
                &model,
                &[("input.f1".into(), f1), ("input.f3".into(), f3)],
                &|t, m, x| {
                    let set = ModalitySet::new(3, [(1, x[0].clone()), (3, x[1].clone())])?;
                    t.cross_entropy(&m.logits(t, &set)?, &[2, 0])
                },
                fault,
            )
        }
    }
}

/// Adds small noise to every parameter so zero biases and unit gains are not
/// special points of the check.
fn perturbed<T: Real, P: Params<T>>(mut p: P, r: &mut ChaCha8Rng) -> P {
    p.visit_mut("", &mut |_, t| {
        let noisy = t.data().iter().map(|&v| v + T::of(r.random_range(-0.1..0.1))).collect();
        *t = Tensor::new(t.shape(), noisy).expect("same shape");
    });
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Seed and shape of the first failing trial.
    pub first_failure: Option<String>,
    /// Largest deviation observed, in the invariant's own units.
    pub worst: f64,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<26} trials {:>4}  failures {:>3}  worst {:.3e}",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.trials,
            self.failures,
            self.worst
        )?;
        if let Some(first) = &self.first_failure {
            write!(f, "  first failure: {first}")?;
        }
        Ok(())
    }
}

/// A random fusion problem.
struct Trial {
    seed: u64,
    total: usize,
    shape: Vec<usize>,
    ids: Vec<usize>,
    stack: EncoderStack<f32>,
    set: ModalitySet<f32>,
}

impl Trial {
    fn describe(&self) -> String {
        format!("seed={} shape={:?} K={:?} S={}", self.seed, self.shape, self.ids, self.total)
    }

    /// Trial `index` has feature rank `1 + index % 3` and, unless `arity`
    /// is given, `1 + (index / 3) % 4` modalities, so any 12 consecutive
    /// trials cover every combination.
    fn draw(seed: u64, index: usize, arity: Option<usize>) -> Result<Trial> {
        let mut r = rng::stream(seed, "invariants");
        let total = 4;
        let k = arity.unwrap_or(1 + (index / 3) % total);
        let mut ids: Vec<usize> = (1..=total).collect();
        ids.shuffle(&mut r);
        ids.truncate(k);
        ids.sort_unstable();
        let dims = 1 + index % 3;
        let mut shape = vec![r.random_range(1..=2), 4];
        shape.extend((0..dims).map(|_| r.random_range(1..=3)));
        let cfg = StackConfig { channels: 4, depth: r.random_range(1..=2), num_heads: 2, ..StackConfig::default() };
        let stack = EncoderStack::init(&mut r, &cfg)?;
        let set = ModalitySet::new(total, ids.iter().map(|&id| (id, uniform::<f32>(&mut r, &shape, -3.0, 3.0))))?;
        Ok(Trial { seed, total, shape, ids, stack, set })
    }
}

struct Tally {
    report: InvariantReport,
}

impl Tally {
    fn new(name: &str) -> Self {
        Tally { report: InvariantReport { name: name.into(), trials: 0, failures: 0, first_failure: None, worst: 0.0 } }
    }

    fn record(&mut self, deviation: f64, ok: bool, describe: impl FnOnce() -> String) {
        let r = &mut self.report;
        r.trials += 1;
        r.worst = r.worst.max(deviation);
        if !ok {
            r.failures += 1;
            r.first_failure.get_or_insert_with(describe);
        }
    }
}

/// Runs the normalization, identity, convex-bound, permutation and arity suites.
pub fn invariants(seed: u64, trials: usize) -> Result<Vec<InvariantReport>> {
    let trial_seed = |i: usize| seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
    let mut normalization = Tally::new("weight_normalization");
    let mut identity = Tally::new("single_modality_identity");
    let mut convex = Tally::new("convex_bound");
    let mut permutation = Tally::new("permutation_invariance");
    let mut arity = Tally::new("arity_robustness");

    for i in 0..trials {
        let t = Trial::draw(trial_seed(i), i, None)?;
        let tape = Tape::new();
        let z0 = tokenize(&tape, &t.set)?;
        let weights = modal_attention(&tape, &correlation_extraction(&tape, &z0, &t.stack)?)?;
        let n = numel(&t.shape);
        let mut dev = 0.0f64;
        for v in 0..n {
            let s: f64 = weights.0.tensors().map(|m| m.data()[v] as f64).sum();
            dev = dev.max((s - 1.0).abs());
        }
        normalization.record(dev, dev <= 1e-6, || t.describe());

        let fs = tfusion_forward(&tape, &t.set, &t.stack)?;
        let mut dev = 0.0f64;
        for v in 0..n {
            let vals = t.set.tensors().map(|f| f.data()[v] as f64);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            let x = fs.data()[v] as f64;
            dev = dev.max(lo - x).max(x - hi);
        }
        convex.record(dev.max(0.0), dev <= 1e-6, || t.describe());

        let one = Trial::draw(trial_seed(i), i, Some(1))?;
        let out = tfusion_forward(&tape, &one.set, &one.stack)?;
        let input = one.set.tensors().next().expect("one modality");
        let same = out.bit_eq(input);
        identity.record(if same { 0.0 } else { out.max_abs_diff(input)? }, same, || one.describe());

        arity.record(0.0, arity_trial(&t).is_ok(), || t.describe());
    }

    for i in 0..trials {
        let t = Trial::draw(trial_seed(i).wrapping_add(0x5eed), i, None)?;
        let mut r = rng::indexed(t.seed, "permutation", i as u64);
        let mut perm: Vec<usize> = (1..=t.total).collect();
        perm.shuffle(&mut r);
        let relabeled = t.set.relabel(|k| perm[k - 1])?;
        let tape = Tape::new();
        let a = tfusion_forward(&tape, &t.set, &t.stack)?;
        let b = tfusion_forward(&tape, &relabeled, &t.stack)?;
        let dev = a.max_abs_diff(&b)?;
        permutation.record(dev, dev < 1e-4, || format!("{} perm={perm:?}", t.describe()));
    }

    Ok(vec![normalization.report, identity.report, convex.report, permutation.report, arity.report])
}

/// Every fuser accepts the trial's subset and returns `[B, C, R_f...]`.
fn arity_trial(t: &Trial) -> Result<()> {
    let tape = Tape::new();
    let mut r = rng::stream(t.seed, "arity");
    let conv = ConvFusionParams::<f32>::init(&mut r, t.total, 4, 1)?;
    let outputs = [
        tfusion_forward(&tape, &t.set, &t.stack)?,
        mean_fusion(&tape, &t.set)?,
        max_fusion(&tape, &t.set)?,
        zero_pad_conv_fusion(&tape, &t.set, &conv)?,
    ];
    if outputs.iter().all(|o| o.shape() == t.set.shape()) {
        Ok(())
    } else {
        Err(crate::error::Error::invalid("arity", "fused shape differs from input shape"))
    }
}
