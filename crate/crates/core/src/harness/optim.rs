//! Adam with bias correction, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Halve the rate every `every` steps.
    StepHalving { every: usize },
    /// `lr · (1 - epoch / max_epochs)^0.9`.
    Polynomial { max_epochs: usize },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepHalving { every } => base * 0.5f64.powi((step / every.max(1)) as i32),
            LrSchedule::Polynomial { max_epochs } => {
                let frac = (epoch as f64 / max_epochs.max(1) as f64).min(1.0);
                base * (1.0 - frac).powf(0.9)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, one tensor per parameter in visit order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &impl Params<T>) -> Self {
        let zeros: Vec<_> = params.named_params().into_iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
///
/// `grads` are aligned with the parameters' visit order.
pub fn adam_step<T: Real>(
    params: &mut impl Params<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam_step", "step counter starts at 1"));
    }
    let named = params.named_params();
    if grads.len() != named.len() || state.m.len() != named.len() || state.v.len() != named.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} gradients and {} moments for {} parameters", grads.len(), state.m.len(), named.len()),
        ));
    }
    for ((name, p), (g, m)) in named.iter().zip(grads.iter().zip(&state.m)) {
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::invalid(
                "adam_step",
                format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps, one) = (T::of(lr), T::of(cfg.eps), T::one());
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        let g = grads[i].data();
        let (mut m, mut v, mut w) = (state.m[i].to_vec(), state.v[i].to_vec(), p.to_vec());
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            w[j] = w[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        state.m[i] = Tensor::from_parts(p.shape(), m);
        state.v[i] = Tensor::from_parts(p.shape(), v);
        *p = Tensor::from_parts(p.shape(), w);
        i += 1;
    });
    Ok(())
}

/// Euclidean norm over all gradient entries.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data().iter()).map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Linear::<f64>::zeros(2, 3);
        let mut st = AdamState::zeros_like(&p);
        let grads = [Tensor::ones(&[2, 3]), Tensor::ones(&[3])];
        adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 1e-3, 1).unwrap();
        // m̂ = g, v̂ = g² ⇒ Δ = -lr·g/(|g| + eps)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!(p.weight.data().iter().all(|&w| (w - want).abs() < 1e-15));
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Linear::<f64>::zeros(2, 2);
        p.bias = Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap();
        let before = p.bias.clone();
        let mut st = AdamState::zeros_like(&p);
        let grads = [Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 0.1, 1).unwrap();
        assert!(p.bias.bit_eq(&before));
    }

    #[test]
    fn opposite_gradients_move_symmetrically() {
        let mut p = Linear::<f64>::zeros(1, 2);
        let mut st = AdamState::zeros_like(&p);
        let grads = [Tensor::from_f64(&[1, 2], &[0.7, -0.7]).unwrap(), Tensor::zeros(&[2])];
        for t in 1..=3 {
            adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 0.01, t).unwrap();
        }
        let w = p.weight.data();
        assert!(w[0] < 0.0 && w[0] == -w[1]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Linear::<f64>::zeros(2, 2);
        let mut st = AdamState::zeros_like(&p);
        let grads = [Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])];
        assert!(adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 0.1, 1).is_err());
        assert!(adam_step(&mut p, &grads[..1], &mut st, &AdamConfig::default(), 0.1, 1).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.rate(1e-4, 10_000, 3), 1e-4);
        let halving = LrSchedule::StepHalving { every: 100_000 };
        assert_eq!(halving.rate(1e-4, 99_999, 0), 1e-4);
        assert_eq!(halving.rate(1e-4, 200_000, 0), 2.5e-5);
        let poly = LrSchedule::Polynomial { max_epochs: 200 };
        assert_eq!(poly.rate(1.0, 0, 0), 1.0);
        assert!((poly.rate(1.0, 0, 100) - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert_eq!(poly.rate(1.0, 0, 200), 0.0);
    }
}
