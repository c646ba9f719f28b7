use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for each element `i`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(Error::invalid("finite_difference_grad", "step h must be positive"));
    }
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let two_h = h + h;
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let up = f(&Tensor::from_parts(x.shape(), probe.clone()))?;
        probe[i] = base[i] - h;
        let down = f(&Tensor::from_parts(x.shape(), probe))?;
        grad.push((up - down) / two_h);
    }
    Ok(Tensor::from_parts(x.shape(), grad))
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, with a tiny floor so that two all-zero
/// gradients compare equal.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let norm = |t: &Tensor<T>| t.data().iter().map(|v| v.f64().abs()).fold(0.0, f64::max);
    let scale = norm(analytic).max(norm(numeric)).max(1e-12);
    Ok(diff / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference_grad(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_exp() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v.exp()).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-4);
        assert!((g.data()[1] - std::f64::consts::E).abs() < 1e-4);
    }

    #[test]
    fn softmax_first_component_matches_closed_form_jacobian_row() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| Ok(Tape::new().softmax(t, 0)?.data()[0]);
        let g = finite_difference_grad(f, &x, 1e-5).unwrap();
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        let (s1, s2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        assert!((g.data()[0] - s1 * (1.0 - s1)).abs() < 1e-5);
        assert!((g.data()[1] + s1 * s2).abs() < 1e-5);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_difference_grad(|t| Ok(t.item()), &x, 0.0).is_err());
    }
}
