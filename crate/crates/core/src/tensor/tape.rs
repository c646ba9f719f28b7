use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}#{}", self.tape, self.index)
    }
}

/// Operation families, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Relu,
    Gelu,
    SumAxis,
    MeanAxis,
    MaxAxis,
    Reshape,
    TransposeLastTwo,
    Concat,
    Split,
    Matmul,
    Project,
    AddBias,
    Softmax,
    LayerNorm,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::MaxAxis => "max_axis",
            OpKind::Reshape => "reshape",
            OpKind::TransposeLastTwo => "transpose_last_two",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Matmul => "matmul",
            OpKind::Project => "project",
            OpKind::AddBias => "add_bias",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Exp,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::MaxAxis,
        OpKind::Reshape,
        OpKind::TransposeLastTwo,
        OpKind::Concat,
        OpKind::Split,
        OpKind::Matmul,
        OpKind::Project,
        OpKind::AddBias,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::CrossEntropy,
    ];
}

/// Index decomposition of a shape around one axis: `[outer, len, inner]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        AxisSplit { outer: numel(&shape[..axis]), len: shape[axis], inner: numel(&shape[axis + 1..]) }
    }
}

/// Saved state for the backward rule of each recorded op.
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul { a: Arc<[T]>, b: Arc<[T]> },
    Scale(T),
    Exp { out: Arc<[T]> },
    Relu { input: Arc<[T]> },
    Gelu { input: Arc<[T]> },
    SumAxis(AxisSplit),
    MeanAxis(AxisSplit),
    MaxAxis { split: AxisSplit, argmax: Vec<usize> },
    Reshape,
    TransposeLastTwo { batch: usize, rows: usize, cols: usize },
    Concat { outer: usize, inner: usize, sizes: Vec<usize> },
    Slice { split: AxisSplit, start: usize, len: usize },
    Matmul { a: Arc<[T]>, b: Arc<[T]>, batch: usize, m: usize, k: usize, n: usize },
    Project { x: Arc<[T]>, w: Arc<[T]>, rows: usize, k: usize, n: usize },
    AddBias { rows: usize, n: usize },
    Softmax { out: Vec<T>, split: AxisSplit },
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T>, gamma: Arc<[T]>, rows: usize, c: usize },
    CrossEntropy { probs: Vec<T>, labels: Vec<usize>, rows: usize, classes: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Exp { .. } => OpKind::Exp,
            Op::Relu { .. } => OpKind::Relu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::SumAxis(_) => OpKind::SumAxis,
            Op::MeanAxis(_) => OpKind::MeanAxis,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::Reshape => OpKind::Reshape,
            Op::TransposeLastTwo { .. } => OpKind::TransposeLastTwo,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Split,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Project { .. } => OpKind::Project,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

/// Append-only operation record. Confined to one thread of execution.
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<OpKind>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a differentiable leaf and returns a tracked copy.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Op::Leaf, Vec::new(), t.shape());
        t.detach().with_node(id)
    }

    /// Corrupts the backward rule of `kind` (input gradients scaled by 1.5).
    /// Test fixture for the gradient-check harness.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn push(&self, op: Op<T>, inputs: Vec<Option<usize>>, shape: &[usize]) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op, inputs, shape: shape.to_vec() });
        NodeId { tape: self.id, index }
    }

    fn input_index(&self, t: &Tensor<T>) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::NotOnTape),
        }
    }

    /// Attaches `out` to the tape when any input is tracked. `make_op` runs
    /// only in that case so untracked forward passes skip saving state.
    pub(crate) fn record(
        &self,
        out: Tensor<T>,
        inputs: &[&Tensor<T>],
        make_op: impl FnOnce() -> Op<T>,
    ) -> Result<Tensor<T>> {
        let idx = inputs.iter().map(|t| self.input_index(t)).collect::<Result<Vec<_>>>()?;
        if idx.iter().all(Option::is_none) {
            return Ok(out);
        }
        let id = self.push(make_op(), idx, out.shape());
        Ok(out.with_node(id))
    }

    /// Reverse-mode sweep from a scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.len() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = self.input_index(loss)?.ok_or(Error::NotOnTape)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        let fault = self.fault.get();

        for index in (0..=root).rev() {
            let node = &nodes[index];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let wanted: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let mut local = input_grads(&node.op, &upstream, &wanted);
            if fault == Some(node.op.kind()) {
                let k = T::of(1.5);
                for g in local.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v = *v * k);
                }
            }
            for (input, g) in node.inputs.iter().zip(local) {
                if let (Some(i), Some(g)) = (input, g) {
                    accumulate(&mut grads[*i], g);
                }
            }
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let value = grads[i].take().unwrap_or_else(|| vec![T::zero(); numel(&n.shape)]);
                (i, Tensor::from_parts(&n.shape, value))
            })
            .collect();
        Ok(Gradients { tape: self.id, leaves })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
pub struct Gradients<T> {
    tape: u64,
    leaves: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let n = t.node()?;
        if n.tape != self.tape {
            return None;
        }
        self.leaves.binary_search_by_key(&n.index, |(i, _)| *i).ok().map(|pos| &self.leaves[pos].1)
    }

    /// Gradient with respect to a leaf, failing if `t` is not one of this tape's leaves.
    pub fn wrt(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.get(t).cloned().ok_or(Error::NotOnTape)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn input_grads<T: Real>(op: &Op<T>, g: &[T], wanted: &[bool]) -> Vec<Option<Vec<T>>> {
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.iter().map(|&x| -x).collect())],
        Op::Mul { a, b } => vec![
            want(0).then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
            want(1).then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
        ],
        Op::Scale(s) => vec![Some(g.iter().map(|&x| x * *s).collect())],
        Op::Exp { out } => vec![Some(g.iter().zip(out.iter()).map(|(&g, &y)| g * y).collect())],
        Op::Relu { input } => {
            vec![Some(g.iter().zip(input.iter()).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect())]
        }
        Op::Gelu { input } => {
            vec![Some(g.iter().zip(input.iter()).map(|(&g, &x)| g * super::ops::gelu_grad(x)).collect())]
        }
        Op::SumAxis(s) => vec![Some(broadcast_axis(g, *s, T::one()))],
        Op::MeanAxis(s) => vec![Some(broadcast_axis(g, *s, T::one() / T::of(s.len as f64)))],
        Op::MaxAxis { split, argmax } => {
            let mut out = vec![T::zero(); split.outer * split.len * split.inner];
            for o in 0..split.outer {
                for i in 0..split.inner {
                    let r = o * split.inner + i;
                    out[(o * split.len + argmax[r]) * split.inner + i] = g[r];
                }
            }
            vec![Some(out)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::TransposeLastTwo { batch, rows, cols } => {
            // forward mapped [rows, cols] -> [cols, rows]; undo it
            vec![Some(super::ops::transpose_raw(g, *batch, *cols, *rows))]
        }
        Op::Concat { outer, inner, sizes } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(j, &len)| {
                    let start = offset;
                    offset += len;
                    want(j).then(|| {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + start) * inner;
                            out.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out
                    })
                })
                .collect()
        }
        Op::Slice { split, start, len } => {
            let mut out = vec![T::zero(); split.outer * split.len * split.inner];
            for o in 0..split.outer {
                let dst = (o * split.len + start) * split.inner;
                let src = o * len * split.inner;
                out[dst..dst + len * split.inner].copy_from_slice(&g[src..src + len * split.inner]);
            }
            vec![Some(out)]
        }
        Op::Matmul { a, b, batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let da = want(0).then(|| {
                let mut da = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    super::ops::gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    super::ops::gemm_tn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                db
            });
            vec![da, db]
        }
        Op::Project { x, w, rows, k, n } => {
            let dx = want(0).then(|| {
                let mut dx = vec![T::zero(); rows * k];
                super::ops::gemm_nt(g, w, &mut dx, *rows, *n, *k);
                dx
            });
            let dw = want(1).then(|| {
                let mut dw = vec![T::zero(); k * n];
                super::ops::gemm_tn(x, g, &mut dw, *rows, *k, *n);
                dw
            });
            vec![dx, dw]
        }
        Op::AddBias { rows, n } => {
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); *n];
                for r in 0..*rows {
                    for (d, &v) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d = *d + v;
                    }
                }
                db
            });
            vec![want(0).then(|| g.to_vec()), db]
        }
        Op::Softmax { out, split } => {
            let mut dx = vec![T::zero(); out.len()];
            for o in 0..split.outer {
                for i in 0..split.inner {
                    let at = |j: usize| (o * split.len + j) * split.inner + i;
                    let dot = (0..split.len).fold(T::zero(), |acc, j| acc + g[at(j)] * out[at(j)]);
                    for j in 0..split.len {
                        dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::LayerNorm { xhat, inv_std, gamma, rows, c } => {
            let (rows, c) = (*rows, *c);
            let dx = want(0).then(|| {
                let mut dx = vec![T::zero(); rows * c];
                let cf = T::of(c as f64);
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_x = T::zero();
                    for j in 0..c {
                        let dy = gr[j] * gamma[j];
                        sum_dy = sum_dy + dy;
                        sum_dy_x = sum_dy_x + dy * xr[j];
                    }
                    for j in 0..c {
                        let dy = gr[j] * gamma[j];
                        dx[r * c + j] = inv_std[r] * (dy - sum_dy / cf - xr[j] * sum_dy_x / cf);
                    }
                }
                dx
            });
            let dgamma = want(1).then(|| {
                let mut d = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        d[j] = d[j] + g[r * c + j] * xhat[r * c + j];
                    }
                }
                d
            });
            let dbeta = want(2).then(|| {
                let mut d = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        d[j] = d[j] + g[r * c + j];
                    }
                }
                d
            });
            vec![dx, dgamma, dbeta]
        }
        Op::CrossEntropy { probs, labels, rows, classes } => {
            let scale = g[0] / T::of(*rows as f64);
            let mut d = probs.clone();
            for r in 0..*rows {
                d[r * classes + labels[r]] = d[r * classes + labels[r]] - T::one();
            }
            d.iter_mut().for_each(|v| *v = *v * scale);
            vec![Some(d)]
        }
    }
}

fn broadcast_axis<T: Real>(g: &[T], s: AxisSplit, factor: T) -> Vec<T> {
    let mut out = Vec::with_capacity(s.outer * s.len * s.inner);
    for o in 0..s.outer {
        let row = &g[o * s.inner..(o + 1) * s.inner];
        for _ in 0..s.len {
            out.extend(row.iter().map(|&v| v * factor));
        }
    }
    out
}
