//! Differentiable primitives. Every op validates shapes up front, refuses to
//! broadcast (scalar `scale` and the explicit `add_bias` aside), and reports a
//! non-finite result as an error instead of propagating it.

use super::tape::{AxisSplit, Op, Tape};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        row.iter_mut().for_each(|v| *v = T::zero());
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c[m,k] = g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<T: Real>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
}

/// `c[k,n] = a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + aip * gv;
            }
        }
    }
}

/// Transposes the trailing `[rows, cols]` block of each of `batch` matrices.
pub(crate) fn transpose_raw<T: Real>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

fn finite<T: Real>(op: &'static str, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(Tensor::from_parts(shape, data))
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shapes(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Real> Tape<T> {
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", a, b)?;
        let out = finite("add", zip_map(a, b, |x, y| x + y), a.shape())?;
        self.record(out, &[a, b], || Op::Add)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", a, b)?;
        let out = finite("sub", zip_map(a, b, |x, y| x - y), a.shape())?;
        self.record(out, &[a, b], || Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", a, b)?;
        let out = finite("mul", zip_map(a, b, |x, y| x * y), a.shape())?;
        self.record(out, &[a, b], || Op::Mul { a: a.data_arc(), b: b.data_arc() })
    }

    pub fn scale(&self, a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        let out = finite("scale", a.data().iter().map(|&x| x * s).collect(), a.shape())?;
        self.record(out, &[a], || Op::Scale(s))
    }

    pub fn exp(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let out = finite("exp", a.data().iter().map(|x| x.exp()).collect(), a.shape())?;
        let saved = out.data_arc();
        self.record(out, &[a], || Op::Exp { out: saved })
    }

    pub fn relu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let out =
            finite("relu", a.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(), a.shape())?;
        self.record(out, &[a], || Op::Relu { input: a.data_arc() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let out = finite("gelu", a.data().iter().map(|&x| gelu(x)).collect(), a.shape())?;
        self.record(out, &[a], || Op::Gelu { input: a.data_arc() })
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum_axis", axis, a.rank())?;
        let s = AxisSplit::new(a.shape(), axis);
        let out = finite("sum_axis", reduce(a.data(), s, |acc, x| acc + x), &drop_axis(a.shape(), axis))?;
        self.record(out, &[a], || Op::SumAxis(s))
    }

    pub fn mean_axis(&self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        check_axis("mean_axis", axis, a.rank())?;
        let s = AxisSplit::new(a.shape(), axis);
        let len = T::of(s.len as f64);
        let data = reduce(a.data(), s, |acc, x| acc + x).into_iter().map(|v| v / len).collect();
        let out = finite("mean_axis", data, &drop_axis(a.shape(), axis))?;
        self.record(out, &[a], || Op::MeanAxis(s))
    }

    /// Maximum over `axis`. The gradient is routed to the first maximal element.
    pub fn max_axis(&self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        check_axis("max_axis", axis, a.rank())?;
        let s = AxisSplit::new(a.shape(), axis);
        let x = a.data();
        let mut values = Vec::with_capacity(s.outer * s.inner);
        let mut argmax = Vec::with_capacity(s.outer * s.inner);
        for o in 0..s.outer {
            for i in 0..s.inner {
                let mut best = 0;
                let mut best_v = x[o * s.len * s.inner + i];
                for j in 1..s.len {
                    let v = x[(o * s.len + j) * s.inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                values.push(best_v);
                argmax.push(best);
            }
        }
        let out = finite("max_axis", values, &drop_axis(a.shape(), axis))?;
        self.record(out, &[a], || Op::MaxAxis { split: s, argmax })
    }

    pub fn reshape(&self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != a.len() || shape.contains(&0) {
            return Err(Error::shapes("reshape", a.shape(), shape));
        }
        let out = Tensor::from_parts(shape, a.to_vec());
        self.record(out, &[a], || Op::Reshape)
    }

    pub fn transpose_last_two(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let r = a.rank();
        if r < 2 {
            return Err(Error::invalid("transpose_last_two", format!("needs rank >= 2, got shape {:?}", a.shape())));
        }
        let (rows, cols) = (a.shape()[r - 2], a.shape()[r - 1]);
        let batch = numel(&a.shape()[..r - 2]);
        let mut shape = a.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::from_parts(&shape, transpose_raw(a.data(), batch, rows, cols));
        self.record(out, &[a], || Op::TransposeLastTwo { batch, rows, cols })
    }

    pub fn concat(&self, parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no tensors to concatenate"))?;
        check_axis("concat", axis, first.rank())?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shapes("concat", first.shape(), p.shape()));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::from_parts(&shape, data);
        let inputs: Vec<&Tensor<T>> = parts.iter().collect();
        self.record(out, &inputs, || Op::Concat { outer, inner, sizes })
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&self, a: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        check_axis("split", axis, a.rank())?;
        if sizes.iter().sum::<usize>() != a.shape()[axis] || sizes.contains(&0) {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} do not partition axis {axis} of {:?}", a.shape()),
            ));
        }
        let s = AxisSplit::new(a.shape(), axis);
        let mut start = 0;
        let mut pieces = Vec::with_capacity(sizes.len());
        for &len in sizes {
            let mut data = Vec::with_capacity(s.outer * len * s.inner);
            for o in 0..s.outer {
                let base = (o * s.len + start) * s.inner;
                data.extend_from_slice(&a.data()[base..base + len * s.inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            let piece = Tensor::from_parts(&shape, data);
            let at = start;
            pieces.push(self.record(piece, &[a], || Op::Slice { split: s, start: at, len })?);
            start += len;
        }
        Ok(pieces)
    }

    /// Batched matrix product `[.., M, K] · [.., K, N] -> [.., M, N]`; leading dims must match.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ra, rb) = (a.rank(), b.rank());
        if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] || a.shape()[ra - 1] != b.shape()[rb - 2] {
            return Err(Error::shapes("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[ra - 2], a.shape()[ra - 1], b.shape()[rb - 1]);
        let batch = numel(&a.shape()[..ra - 2]);
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a.shape().to_vec();
        shape[ra - 1] = n;
        let out = finite("matmul", data, &shape)?;
        self.record(out, &[a, b], || Op::Matmul { a: a.data_arc(), b: b.data_arc(), batch, m, k, n })
    }

    /// Applies a `[K, N]` weight along the last axis: `[.., K] -> [.., N]`.
    pub fn project(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() < 1 || w.rank() != 2 || x.shape()[x.rank() - 1] != w.shape()[0] {
            return Err(Error::shapes("project", x.shape(), w.shape()));
        }
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let rows = x.len() / k;
        let mut data = vec![T::zero(); rows * n];
        gemm_nn(x.data(), w.data(), &mut data, rows, k, n);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let out = finite("project", data, &shape)?;
        self.record(out, &[x, w], || Op::Project { x: x.data_arc(), w: w.data_arc(), rows, k, n })
    }

    /// Adds a `[N]` vector to every row of a `[.., N]` tensor.
    pub fn add_bias(&self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() < 1 || b.rank() != 1 || x.shape()[x.rank() - 1] != b.len() {
            return Err(Error::shapes("add_bias", x.shape(), b.shape()));
        }
        let n = b.len();
        let rows = x.len() / n;
        let data = x.data().chunks(n).flat_map(|row| row.iter().zip(b.data()).map(|(&v, &bv)| v + bv)).collect();
        let out = finite("add_bias", data, x.shape())?;
        self.record(out, &[x, b], || Op::AddBias { rows, n })
    }

    /// Softmax along `axis` with max subtraction; a singleton axis yields exactly 1.
    pub fn softmax(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", axis, x.rank())?;
        let s = AxisSplit::new(x.shape(), axis);
        let v = x.data();
        let mut out = vec![T::zero(); v.len()];
        for o in 0..s.outer {
            for i in 0..s.inner {
                let at = |j: usize| (o * s.len + j) * s.inner + i;
                let max = (1..s.len).fold(v[at(0)], |m, j| m.max(v[at(j)]));
                let mut total = T::zero();
                for j in 0..s.len {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..s.len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let result = finite("softmax", out, x.shape())?;
        self.record(result.clone(), &[x], || Op::Softmax { out: result.to_vec(), split: s })
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        if x.rank() < 1 {
            return Err(Error::invalid("layer_norm", "input must have rank >= 1"));
        }
        let c = x.shape()[x.rank() - 1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shapes("layer_norm", x.shape(), gamma.shape()));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let rows = x.len() / c;
        let cf = T::of(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / cf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                data[r * c + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let out = finite("layer_norm", data, x.shape())?;
        self.record(out, &[x, gamma, beta], || Op::LayerNorm { xhat, inv_std, gamma: gamma.data_arc(), rows, c })
    }

    /// Mean softmax cross-entropy of `[N, classes]` logits against integer labels.
    pub fn cross_entropy(&self, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        if logits.rank() != 2 || logits.shape()[0] != labels.len() {
            return Err(Error::shapes("cross_entropy", logits.shape(), &[labels.len()]));
        }
        let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let max = row.iter().fold(row[0], |m, &v| m.max(v));
            let total = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let log_z = max + total.ln();
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - log_z).exp();
            }
            loss = loss + log_z - row[labels[r]];
        }
        let out = finite("cross_entropy", vec![loss / T::of(rows as f64)], &[])?;
        let labels = labels.to_vec();
        self.record(out, &[logits], || Op::CrossEntropy { probs, labels, rows, classes })
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let flat = self.reshape(a, &[a.len()])?;
        self.sum_axis(&flat, 0)
    }
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &e)| e).collect()
}

/// Folds along the axis starting from the first element, so a singleton axis
/// returns its element bit for bit.
fn reduce<T: Real>(x: &[T], s: AxisSplit, f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(s.outer * s.inner);
    for o in 0..s.outer {
        for i in 0..s.inner {
            let mut acc = x[o * s.len * s.inner + i];
            for j in 1..s.len {
                acc = f(acc, x[(o * s.len + j) * s.inner + i]);
            }
            out.push(acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let tape = Tape::new();
        let out = tape.add(&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn elementwise_rejects_mismatch_naming_both_shapes() {
        let tape = Tape::new();
        let err = tape.mul(&t(&[2], &[1.0, 2.0]), &t(&[1, 2], &[3.0, 4.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mul") && msg.contains("[2]") && msg.contains("[1, 2]"), "{msg}");
    }

    #[test]
    fn axis_out_of_range() {
        let tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(tape.sum_axis(&x, 2), Err(Error::AxisOutOfRange { axis: 2, rank: 2, .. })));
        assert!(tape.softmax(&x, 5).is_err());
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let tape = Tape::new();
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t(&[2, 3, 4], &v);
        let y = tape.reshape(&x, &[2, 12]).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        assert_eq!(y.data(), x.data());
        assert!(tape.reshape(&x, &[5, 5]).is_err());
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let tape = Tape::new();
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let parts = tape.split(&c, 1, &[1, 2]).unwrap();
        assert!(parts[0].bit_eq(&a));
        assert!(parts[1].bit_eq(&b));
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let tape = Tape::new();
        let x = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 2.0, -1.0, 7.0, 0.25]);
        assert!(tape.matmul(&Tensor::eye(3), &x).unwrap().bit_eq(&x));
        let y = tape.matmul(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2, 1], &[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
        let err = tape.matmul(&x, &t(&[2, 1], &[1.0, 1.0])).unwrap_err();
        assert!(err.to_string().contains("[3, 3]"));
    }

    #[test]
    fn softmax_known_values() {
        let tape = Tape::new();
        assert_eq!(tape.softmax(&t(&[1], &[123.4]), 0).unwrap().data(), &[1.0]);
        let s = tape.softmax(&t(&[2], &[1.0, 2.0]), 0).unwrap();
        // 1 / (1 + e) and e / (1 + e)
        let e = std::f64::consts::E;
        assert!((s.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((s.data()[0] - 0.26894).abs() < 1e-5);
        assert!((s.data()[1] - 0.73106).abs() < 1e-5);
        let big = Tape::new().softmax(&Tensor::<f32>::full(&[2], 1000.0), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_known_values() {
        let tape = Tape::new();
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::zeros(&[3]);
        let y = tape.layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), &ones, &zeros, 1e-5).unwrap();
        for (got, want) in y.data().iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        let c = tape.layer_norm(&Tensor::full(&[4], 5.0), &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let aff = tape.layer_norm(&t(&[3], &[0.3, -1.0, 8.0]), &zeros, &Tensor::full(&[3], 7.0), 1e-5).unwrap();
        assert!(aff.data().iter().all(|&v| v == 7.0));
        assert!(tape.layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), &Tensor::ones(&[2]), &zeros, 1e-5).is_err());
    }

    #[test]
    fn max_axis_breaks_ties_low() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[2.0, 5.0, 5.0]));
        let m = tape.max_axis(&x, 0).unwrap();
        assert_eq!(m.item(), 5.0);
        let g = tape.backward(&m).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let tape = Tape::new();
        let x = Tensor::<f32>::full(&[2], 100.0);
        assert!(matches!(tape.exp(&x), Err(Error::NonFinite { op: "exp" })));
        let y = Tensor::<f32>::full(&[2], 3.0e38);
        assert!(matches!(tape.add(&y, &y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let l = tape.cross_entropy(&Tensor::<f64>::zeros(&[2, 4]), &[0, 3]).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(&Tensor::<f64>::zeros(&[2, 4]), &[0, 4]).is_err());
    }
}
