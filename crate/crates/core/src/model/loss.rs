use ndarray::{Array2, Axis};

use super::Scalar;
use crate::discretizer::TokenId;
use crate::error::{Error, Result};
use crate::ingest::BinaryLabel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss<T> {
    /// Mean cross-entropy over selected positions and features.
    pub value: T,
    pub selected_positions: usize,
}

fn log_sum_exp<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn check_lengths(logits: &[Array2<impl Scalar>], targets: &[TokenId], selection: &[bool]) -> Result<()> {
    let n = selection.len();
    let features = logits.len();
    if targets.len() != n * features || logits.iter().any(|l| l.nrows() != n) {
        return Err(Error::Precondition(format!(
            "MLM loss shapes disagree: {} positions, {} targets, {features} features",
            n,
            targets.len()
        )));
    }
    Ok(())
}

/// Sum of cross-entropies over selected (position, feature) pairs and the
/// gradient of `scale · sum` with respect to the logits.
pub(crate) fn mlm_loss_sum_grad<T: Scalar>(
    logits: &[Array2<T>],
    targets: &[TokenId],
    selection: &[bool],
    scale: T,
) -> Result<(T, Vec<Array2<T>>)> {
    check_lengths(logits, targets, selection)?;
    let features = logits.len();
    let mut total = T::zero();
    let mut grads: Vec<Array2<T>> = logits.iter().map(|l| Array2::zeros(l.raw_dim())).collect();
    for (pos, _) in selection.iter().enumerate().filter(|(_, &s)| s) {
        for (f, (l, g)) in logits.iter().zip(grads.iter_mut()).enumerate() {
            let target = targets[pos * features + f] as usize;
            let row = l.row(pos);
            if target >= row.len() {
                return Err(Error::Index(format!(
                    "MLM target {target} at position {pos} is not a real token of feature {f}"
                )));
            }
            let lse = log_sum_exp(row);
            total += lse - row[target];
            let mut grow = g.row_mut(pos);
            for (gv, &lv) in grow.iter_mut().zip(row.iter()) {
                *gv = (lv - lse).exp() * scale;
            }
            grow[target] -= scale;
        }
    }
    Ok((total, grads))
}

/// Mean categorical cross-entropy of per-feature logits against the original
/// tokens, over selected positions only. An empty selection yields zero.
pub fn mlm_loss<T: Scalar>(logits: &[Array2<T>], targets: &[TokenId], selection: &[bool]) -> Result<MlmLoss<T>> {
    Ok(mlm_loss_with_grad(logits, targets, selection)?.0)
}

pub fn mlm_loss_with_grad<T: Scalar>(
    logits: &[Array2<T>],
    targets: &[TokenId],
    selection: &[bool],
) -> Result<(MlmLoss<T>, Vec<Array2<T>>)> {
    let selected = selection.iter().filter(|&&s| s).count();
    let denom = T::from_usize((selected * logits.len()).max(1)).unwrap();
    let (sum, grads) = mlm_loss_sum_grad(logits, targets, selection, T::one() / denom)?;
    Ok((
        MlmLoss {
            value: sum / denom,
            selected_positions: selected,
        },
        grads,
    ))
}

fn real_count(labels: &[BinaryLabel], attention: &[bool], rows: usize) -> Result<usize> {
    if labels.len() != rows || attention.len() != rows {
        return Err(Error::Precondition(format!(
            "{} labels / {} mask entries for {rows} positions",
            labels.len(),
            attention.len()
        )));
    }
    let real = attention.iter().filter(|&&a| a).count();
    if real == 0 {
        return Err(Error::Precondition("no non-PAD positions to score".into()));
    }
    Ok(real)
}

/// Mean over non-PAD positions of `-ln p(label)`.
pub fn classification_loss<T: Scalar>(
    probabilities: &Array2<T>,
    labels: &[BinaryLabel],
    attention: &[bool],
) -> Result<T> {
    let real = real_count(labels, attention, probabilities.nrows())?;
    let sum = probabilities
        .axis_iter(Axis(0))
        .zip(labels.iter().zip(attention))
        .filter(|(_, (_, &a))| a)
        .map(|(row, (label, _))| -row[label.index()].ln())
        .sum::<T>();
    Ok(sum / T::from_usize(real).unwrap())
}

pub(crate) fn classification_sum_grad<T: Scalar>(
    logits: &Array2<T>,
    labels: &[BinaryLabel],
    attention: &[bool],
    scale: T,
) -> (T, Array2<T>) {
    let mut total = T::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for (pos, row) in logits.axis_iter(Axis(0)).enumerate() {
        if !attention[pos] {
            continue;
        }
        let lse = log_sum_exp(row);
        let target = labels[pos].index();
        total += lse - row[target];
        for (c, g) in grad.row_mut(pos).iter_mut().enumerate() {
            *g = (row[c] - lse).exp() * scale;
        }
        grad[[pos, target]] -= scale;
    }
    (total, grad)
}

/// Same loss as [`classification_loss`], computed stably from logits, plus its
/// gradient with respect to the logits.
pub fn classification_loss_from_logits<T: Scalar>(
    logits: &Array2<T>,
    labels: &[BinaryLabel],
    attention: &[bool],
) -> Result<(T, Array2<T>)> {
    let real = T::from_usize(real_count(labels, attention, logits.nrows())?).unwrap();
    let (sum, grad) = classification_sum_grad(logits, labels, attention, T::one() / real);
    Ok((sum / real, grad))
}
