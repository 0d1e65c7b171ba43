use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of `(N, K)` logits.
///
/// Returns the loss and its gradient `(softmax - onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match logits.shape() {
        &[n, k] => (n, k),
        other => return Err(Error::shape(format!("logits must be (N, K), got {other:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::BadLabel { label, classes: k });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for ((row, g), &label) in logits.data().chunks(k).zip(grad.chunks_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[label];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax cross-entropy".into()));
    }
    Ok((loss, Tensor::raw(vec![n, k], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let (loss, grad) = softmax_xent(&Tensor::zeros(&[1, 7]), &[3]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((loss - 1.945_910).abs() < 1e-6);
        assert!(grad.sum().abs() < 1e-12);
    }

    #[test]
    fn confident_logits() {
        let mut row = vec![0.0; 7];
        row[2] = 30.0;
        let (loss, _) = softmax_xent(&Tensor::new(&[1, 7], &row).unwrap(), &[2]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-11);
    }

    #[test]
    fn rows_sum_to_zero() {
        let logits = Tensor::new(&[2, 3], &[1.0, -2.0, 0.5, 300.0, 299.0, -40.0]).unwrap();
        let (loss, grad) = softmax_xent(&logits, &[0, 2]).unwrap();
        assert!(loss >= 0.0);
        for row in grad.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn bad_label() {
        assert!(matches!(
            softmax_xent(&Tensor::zeros(&[1, 7]), &[7]),
            Err(Error::BadLabel { label: 7, classes: 7 })
        ));
    }
}
