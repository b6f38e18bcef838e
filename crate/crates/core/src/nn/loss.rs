use super::Real;
use crate::error::{Error, Result};

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
///
/// `logits` is `[B, M]` row-major. Returns the loss and its gradient with
/// respect to the logits, `(softmax - onehot) / B`.
pub fn softmax_xent<F: Real>(logits: &[F], n_outputs: usize, labels: &[usize]) -> Result<(F, Vec<F>)> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::InvalidInput("cross-entropy over an empty batch".into()));
    }
    if logits.len() != batch * n_outputs {
        return Err(Error::Shape(format!(
            "{} logits for {batch} labels x {n_outputs} outputs",
            logits.len()
        )));
    }
    let bf = F::from_usize(batch).unwrap();
    let mut total = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_outputs {
            return Err(Error::OutOfRange(format!("label {y} >= {n_outputs} outputs")));
        }
        let row = &logits[i * n_outputs..(i + 1) * n_outputs];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        let g = &mut grad[i * n_outputs..(i + 1) * n_outputs];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / bf;
        }
        g[y] -= F::one() / bf;
    }
    Ok((total / bf, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_m() {
        for m in [2usize, 4, 8, 10] {
            let (loss, _) = softmax_xent(&vec![0.3f64; 3 * m], m, &[0, m - 1, 1]).unwrap();
            assert!((loss - (m as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_prediction() {
        let (loss, _) = softmax_xent(&[1000.0f64, 0.0, 0.0], 3, &[0]).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn worked_example() {
        // -log(e^3 / (e^1 + e^2 + e^3))
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let (loss, grad) = softmax_xent(&[1.0f64, 2.0, 3.0], 3, &[2]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.407606).abs() < 1e-6);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(softmax_xent(&[0.0f64; 2], 2, &[2]).is_err());
        assert!(softmax_xent(&[0.0f64; 3], 2, &[0]).is_err());
        assert!(softmax_xent::<f64>(&[], 2, &[]).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 12), y in 0usize..4) {
            let (loss, _) = softmax_xent(&logits, 4, &[y, 0, 3]).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
