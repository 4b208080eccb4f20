//! Sigmoid and binary cross-entropy, computed in logit space for stability.

use super::matrix::NumericError;

/// Largest double strictly below 1; sigmoid output is clamped into
/// `[SIGMOID_FLOOR, SIGMOID_CEIL]` so probabilities stay inside (0, 1)
/// even for saturating logits.
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;
const SIGMOID_FLOOR: f64 = f64::EPSILON / 2.0;

/// Numerically stable logistic function, strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

/// Mean binary cross-entropy evaluated from logits.
///
/// Returns the loss together with its gradient with respect to each logit,
/// `(sigmoid(z) - y) / batch`.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>), NumericError> {
    if logits.is_empty() {
        return Err(NumericError::EmptyBatch);
    }
    assert_eq!(logits.len(), labels.len(), "logit/label length mismatch");
    let batch = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        // max(z,0) - z*y + ln(1 + e^{-|z|})
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid_unclamped(z) - y) / batch);
    }
    Ok((loss / batch, grad))
}

fn sigmoid_unclamped(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let p = sigmoid(710.0);
        assert!(p < 1.0 && p > 0.99);
        let q = sigmoid(-710.0);
        assert!(q > 0.0 && q < 1e-250 || q == SIGMOID_FLOOR);
        assert!(sigmoid(f64::MAX) < 1.0);
    }

    #[test]
    fn hand_evaluated_sigmoid() {
        assert_abs_diff_eq!(sigmoid(2.0), 0.8807970779778823, epsilon = 1e-15);
    }

    #[test]
    fn uninformative_predictor_hits_ln2() {
        let logits = vec![0.0; 8];
        let labels = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let (loss, grad) = bce_with_logits(&logits, &labels).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[0], (0.5 - 1.0) / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn saturated_correct_logits_vanish() {
        let logits = vec![20.0, -20.0];
        let labels = vec![1.0, 0.0];
        let (loss, _) = bce_with_logits(&logits, &labels).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn hand_evaluated_loss() {
        // p = [0.9, 0.2], y = [1, 0] -> -(ln 0.9 + ln 0.8)/2
        let logits: Vec<f64> = [0.9f64, 0.2].iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let (loss, _) = bce_with_logits(&logits, &[1.0, 0.0]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert_eq!(
            bce_with_logits(&[], &[]).unwrap_err(),
            NumericError::EmptyBatch
        );
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(x in -500.0f64..500.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_monotone(a in -500.0f64..500.0, b in -500.0f64..500.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid(lo) <= sigmoid(hi));
        }
    }
}
