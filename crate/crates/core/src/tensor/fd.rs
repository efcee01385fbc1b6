use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let h = T::from_f64(step);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
                what: format!("objective at element {i}"),
            });
        }
        grad.push((plus - minus) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Denominator floor for [`max_relative_error`]; elements whose analytic and
/// numeric gradients are both below it are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -2.0, 7.5]);
        let g = finite_difference_grad(|t| Ok(t.data().iter().sum()), &x, 1e-3).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_vec(vec![3.0]);
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 0.0]);
        let lse = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v.exp()).sum::<f64>().ln());
        let g = finite_difference_grad(lse, &x, 1e-3).unwrap();
        for v in g.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_objective() {
        let x = Tensor::<f64>::from_vec(vec![1.0]);
        assert!(finite_difference_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &x, 1e-3).is_err());
    }
}
