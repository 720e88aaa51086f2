use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / N`. Logits are max-shifted per row.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("softmax_xent labels", &[labels.len()], &[n]));
    }
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange {
            sample,
            label,
            classes: k,
        });
    }
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = vec![T::zero(); n * k];
    let mut total = T::zero();
    for ((row, g), &label) in logits.data().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            let e = (v - max).exp();
            *gi = e;
            z = z + e;
        }
        total = total + (z.ln() - (row[label] - max));
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_n;
        }
        g[label] = g[label] - inv_n;
    }
    Ok((total * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Number of rows whose argmax (first maximum) equals the label.
pub fn accuracy_count<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("accuracy labels", &[labels.len()], &[n]));
    }
    Ok(logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::full(&[3, 10], 0.7);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn per_sample_gradient_sums_to_zero() {
        let mut rng = Rng::new(1);
        let logits = Tensor::<f64>::normal(&[4, 6], 3.0, &mut rng);
        let (_, g) = softmax_xent(&logits, &[0, 5, 2, 2]).unwrap();
        for row in g.data().chunks_exact(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-7);
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            softmax_xent(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { sample: 1, label: 3, classes: 3 })
        ));
    }

    #[test]
    fn stable_for_huge_logits() {
        let logits = Tensor::<f32>::new(vec![1, 2], vec![1e4, -1e4]).unwrap();
        let (loss, g) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && g.is_finite());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::<f64>::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(accuracy_count(&logits, &[0, 1, 1]).unwrap(), 2);
    }
}
