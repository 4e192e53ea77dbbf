//! Central finite differences, the independent oracle for `Tape::backward`.

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient estimate of `f` at `params`.
///
/// For each coordinate p of each parameter, evaluates
/// `(f(p + eps) - f(p - eps)) / (2 eps)` with all other coordinates held
/// fixed. Returns one gradient tensor per parameter.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid(format!("finite_diff_grad eps must be positive, got {eps}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].shape().numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = f(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = f(&work)?;
            work[pi].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite_diff_grad: f returned {up} / {down} at param {pi} coordinate {j}"
                )));
            }
            g[j] = (up - down) / (2.0 * eps);
        }
        grads.push(Tensor::new(params[pi].shape(), g)?);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn quadratic_derivative_at_three() {
        let p = Tensor::scalar(3.0);
        let g = finite_diff_grad(|ps| Ok(ps[0].data()[0].powi(2)), &[p], 1e-4).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::filled(Shape::image(1, 2, 3), 0.7);
        let g = finite_diff_grad(|_| Ok(42.0), &[p], 1e-4).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        // The probe at p-eps lands on sqrt of a negative number (NaN).
        let p = Tensor::scalar(1.0);
        let err = finite_diff_grad(|ps| Ok((ps[0].data()[0] - 1.005).sqrt()), &[p], 1e-2)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let p = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &[p], 0.0).is_err());
    }
}
