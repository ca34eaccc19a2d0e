//! Scalar and vector nonlinearities.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn sigmoid_and_softplus_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1e4), 1e4);
        assert!(softplus(-100.0) < 1e-40 && softplus(-100.0) > 0.0);
    }

    #[test]
    fn log_softmax_handles_huge_logits() {
        let out = log_softmax(&[1e4, -1e4, 0.0]);
        assert!(out.iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY));
        assert_eq!(out[0], 0.0);
        assert!(out[1] < -1e3);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_simplex(logits in prop::collection::vec(-1e4f64..1e4, 1..40)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            let lp = log_softmax(&logits);
            prop_assert!(lp.iter().all(|v| !v.is_nan() && *v <= 0.0));
        }

        #[test]
        fn softmax_entries_interior_for_moderate_logits(logits in prop::collection::vec(-20f64..20.0, 2..20)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
