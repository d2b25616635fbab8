use crate::error::{Error, Result};

use super::backward::backward;
use super::params::Params;
use super::tensor::Tensor;

/// Largest element-wise disagreement between reverse-mode gradients of `f`
/// and central differences, measured as `|a - n| / max(1, |a|, |n|)`.
pub fn numeric_grad_check<F>(f: F, params: &Params, epsilon: f64) -> Result<f64>
where
    F: Fn(&Params) -> Result<Tensor>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let leaves = params.to_leaves();
    let loss = f(&leaves)?;
    let analytic = backward(&loss, &leaves, false)?;

    let eval = |name: &str, index: usize, delta: f64| -> Result<f64> {
        let mut shifted = params.detached();
        let base = params.get(name)?;
        let mut values = base.to_vec();
        values[index] += delta;
        shifted.insert(name, Tensor::new(values, base.shape())?);
        let v = f(&shifted)?.item()?;
        if v.is_nan() {
            return Err(Error::NonFinite {
                op: "numeric_grad_check",
            });
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let a_grad = analytic.get(name)?;
        for i in 0..t.numel() {
            let numeric = (eval(name, i, epsilon)? - eval(name, i, -epsilon)?) / (2.0 * epsilon);
            let a = a_grad.values()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
