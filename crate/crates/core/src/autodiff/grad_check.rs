use crate::error::TensorError;
use crate::scalar::Scalar;

use super::tape::Tape;
use super::tensor::Tensor;

/// Compares tape gradients of a scalar function against central finite
/// differences at `point`.
///
/// Returns the max over all coordinates of
/// `|analytic - central| / (|central| + 1e-12)`.
pub fn grad_check<F, Func>(f: Func, point: &[Tensor<F>], step: F) -> Result<F, TensorError>
where
    F: Scalar,
    Func: Fn(&[Tensor<F>]) -> Result<Tensor<F>, TensorError>,
{
    if step <= F::zero() {
        return Err(TensorError::InvalidValue {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        });
    }

    // Analytic gradients through the tape.
    let tape = Tape::new();
    let leaves: Vec<Tensor<F>> = point.iter().map(|p| tape.leaf(p)).collect();
    let root = f(&leaves)?;
    if !root.is_scalar() {
        return Err(TensorError::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    if !root.item().is_finite() {
        return Err(TensorError::InvalidValue {
            op: "grad_check",
            msg: format!("function value {} is not finite at point", root.item()),
        });
    }
    let grads = tape.backward(&root)?;

    let eval = |pts: &[Tensor<F>]| -> Result<F, TensorError> {
        let y = f(pts)?;
        if !y.item().is_finite() {
            return Err(TensorError::InvalidValue {
                op: "grad_check",
                msg: "function value not finite at perturbed point".into(),
            });
        }
        Ok(y.item())
    };

    let floor = F::c(1e-12);
    let two = F::c(2.0);
    let mut max_err = F::zero();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf).expect("every leaf has a gradient entry");
        for j in 0..point[i].numel() {
            let mut plus: Vec<Tensor<F>> = point.to_vec();
            let mut minus: Vec<Tensor<F>> = point.to_vec();
            let mut d = point[i].data().to_vec();
            d[j] += step;
            plus[i] = Tensor::new(point[i].shape().to_vec(), d.clone())?;
            d[j] -= two * step;
            minus[i] = Tensor::new(point[i].shape().to_vec(), d)?;
            let central = (eval(&plus)? - eval(&minus)?) / (two * step);
            let err = (analytic.data()[j] - central).abs() / (central.abs() + floor);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
