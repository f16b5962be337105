use crate::error::{Error, Result};

/// Additive floor inside the cross-entropy logarithm.
pub const CE_FLOOR: f64 = 1e-12;

/// Softmax of `logits + log_weights`, i.e. `exp(l_k) w_k / Σ exp(l_j) w_j`
/// with the weights given in log space (`-inf` for excluded entries).
/// Falls back to the plain softmax when every weight is zero.
pub fn masked_softmax_log(logits: &[f64], log_weights: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != log_weights.len() {
        return Err(Error::LengthMismatch { left: logits.len(), right: log_weights.len() });
    }
    let any = log_weights.iter().any(|w| *w > f64::NEG_INFINITY);
    let scores: Vec<f64> = if any {
        logits.iter().zip(log_weights).map(|(l, w)| l + w).collect()
    } else {
        logits.to_vec()
    };
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .map(|s| if *s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// `out_k = exp(l_k) m_k / Σ_j exp(l_j) m_j` for non-negative weights `m`.
/// Zero-weight entries are exactly zero; an all-zero mask degrades to the
/// unmasked softmax.
pub fn masked_softmax(logits: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::LengthMismatch { left: logits.len(), right: mask.len() });
    }
    let log_weights: Vec<f64> = mask
        .iter()
        .map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY })
        .collect();
    masked_softmax_log(logits, &log_weights)
}

/// Gradient with respect to the logits given the gradient with respect to
/// the (masked) softmax output: `dl_j = p_j (g_j - Σ_k g_k p_k)`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// `-ln(p_target + 1e-12)`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs
        .get(target)
        .ok_or(Error::IndexOutOfRange { index: target, len: probs.len() })?;
    Ok(-(p + CE_FLOOR).ln())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptySet("mean squared error of empty sequences".into()));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masked_softmax_examples() {
        let p = masked_softmax(&[1.0, 1.0, 1.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        assert_eq!(p[2], 0.0);

        let logits = [0.3, -1.2, 2.0];
        let p = masked_softmax(&logits, &[1.0; 3]).unwrap();
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (pi, l) in p.iter().zip(logits) {
            assert!((pi - l.exp() / z).abs() < 1e-15);
        }

        let p = masked_softmax(&[0.0, 3f64.ln()], &[1.0, 1.0]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);

        let fallback = masked_softmax(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(fallback, vec![0.5, 0.5]);
        assert!(matches!(masked_softmax(&[0.0], &[1.0, 1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[0.0, 1.0], 1).unwrap().abs() < 1e-11);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-10);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 27.631).abs() < 1e-3);
        assert!(matches!(cross_entropy(&[1.0], 3), Err(Error::IndexOutOfRange { index: 3, len: 1 })));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.5, 0.2], &[0.5, 0.2]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0], &[1.0]).unwrap(), 1.0);
        let pred = [0.1, 0.9, 0.4, 0.3, 0.8];
        let truth = [0.0, 1.0, 0.5, 0.6, 0.2];
        let mut acc = 0.0;
        for i in 0..5 {
            acc += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        }
        assert!((mse(&pred, &truth).unwrap() - acc / 5.0).abs() < 1e-15);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = [0.4, -0.3, 1.1, 0.0];
        let mask = [1.0, 0.5, 0.0, 0.2];
        let g = [0.7, -1.0, 0.3, 2.0];
        let loss = |l: &[f64]| -> f64 { masked_softmax(l, &mask).unwrap().iter().zip(&g).map(|(p, g)| p * g).sum() };
        let probs = masked_softmax(&logits, &mask).unwrap();
        let analytic = softmax_backward(&probs, &g);
        for k in 0..4 {
            let mut lp = logits;
            let mut lm = logits;
            lp[k] += 1e-6;
            lm[k] -= 1e-6;
            let num = (loss(&lp) - loss(&lm)) / 2e-6;
            assert!((num - analytic[k]).abs() < 1e-8, "{k}: {num} vs {}", analytic[k]);
        }
    }

    proptest! {
        #[test]
        fn masked_softmax_is_a_distribution(
            logits in prop::collection::vec(-30.0f64..30.0, 1..40),
            seed_mask in prop::collection::vec(0.0f64..1.0, 40),
            shift in -50.0f64..50.0,
        ) {
            let mask: Vec<f64> = seed_mask[..logits.len()].iter().map(|m| if *m < 0.3 { 0.0 } else { *m }).collect();
            let p = masked_softmax(&logits, &mask).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            if mask.iter().any(|m| *m > 0.0) {
                for (pi, m) in p.iter().zip(&mask) {
                    if *m == 0.0 {
                        prop_assert_eq!(*pi, 0.0);
                    }
                }
            }
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = masked_softmax(&shifted, &mask).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
