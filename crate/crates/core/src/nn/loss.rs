use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn rows(op: &'static str, logits: &Tensor) -> Result<(usize, usize)> {
    match *logits.shape() {
        [n, k] => Ok((n, k)),
        _ => Err(Error::shape(
            op,
            format!("expected [N, K], got {:?}", logits.shape()),
        )),
    }
}

/// Row-wise log-softmax, stabilized by subtracting each row's maximum.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = rows("log_softmax", logits)?;
    let maxes: Vec<f64> = logits
        .values()
        .chunks(k)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    // The shift is a constant: log-softmax is invariant to it.
    let shift = Tensor::new(maxes, &[n])?.broadcast_mid(1, k, &[n, k])?;
    let shifted = logits.sub(&shift)?;
    let lse = shifted.exp()?.sum_mid(1, n, k, &[n])?.ln()?;
    shifted.sub(&lse.broadcast_mid(1, k, &[n, k])?)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    log_softmax(logits)?.exp()
}

/// Mean over the batch of `−log softmax(logits)[target]`.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, k) = rows("cross_entropy_loss", logits)?;
    if targets.len() != n {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{} targets for {n} rows", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!(
            "target class {bad} out of range 0..{k}"
        )));
    }
    let index: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| r * k + t)
        .collect();
    log_softmax(logits)?
        .gather(Arc::new(index), &[n])?
        .mean()?
        .neg()
}

/// How squared errors are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Divide by the element count.
    #[default]
    Mean,
    /// Plain squared L2 norm `‖x − y‖²`.
    Sum,
}

/// Mean squared difference between `y` and `x`.
pub fn mse_loss(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    squared_error(y, x, Reduction::Mean)
}

pub fn squared_error(y: &Tensor, x: &Tensor, reduction: Reduction) -> Result<Tensor> {
    if y.shape() != x.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", y.shape(), x.shape()),
        ));
    }
    let sq = y.sub(x)?.square()?;
    match reduction {
        Reduction::Mean => sq.mean(),
        Reduction::Sum => sq.sum(),
    }
}

/// Column index of the largest value in each row of `[N, K]`; ties go to
/// the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let [_, k] = *scores.shape() else {
        return Err(Error::shape(
            "argmax_rows",
            format!("expected rank 2, got {:?}", scores.shape()),
        ));
    };
    Ok(scores
        .values()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect())
}
