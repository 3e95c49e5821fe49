use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    logits.ensure_finite("softmax_cross_entropy")?;
    let scale = T::one() / T::from_usize(n).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for ((row, g), &label) in logits.data().chunks(k).zip(grad.chunks_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z - max).exp();
            denom = denom + *gv;
        }
        loss = loss + (denom.ln() - (row[label] - max));
        for gv in g.iter_mut() {
            *gv = *gv / denom * scale;
        }
        g[label] = g[label] - scale;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((loss, Tensor::new(&[n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::full(&[3, 10], 0.25);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 200.0] {
            let mut logits = Tensor::<f64>::zeros(&[1, 4]);
            logits.data_mut()[2] = margin;
            let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let logits = Tensor::<f64>::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[0]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((g.data()[0] - (1f64.exp() / z - 1.0)).abs() < 1e-12);
        assert!((g.data()[2] - 3f64.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
