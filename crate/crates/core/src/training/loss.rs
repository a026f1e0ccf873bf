use crate::error::{Error, Result};

/// `−log softmax(scores)[positive]`, stabilised by subtracting the maximum.
pub fn multiple_choice_loss(scores: &[f64], positive: usize) -> Result<f64> {
    Ok(multiple_choice_loss_grad(scores, positive)?.0)
}

/// Loss together with its gradient with respect to every score.
pub fn multiple_choice_loss_grad(scores: &[f64], positive: usize) -> Result<(f64, Vec<f64>)> {
    if positive >= scores.len() {
        return Err(Error::Input(format!(
            "positive index {positive} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (scores[positive] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[positive] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    #[test]
    fn equal_scores_give_log_30() {
        let (l, g) = multiple_choice_loss_grad(&[0.7; 30], 4).unwrap();
        assert!((l - 30f64.ln()).abs() < 1e-12);
        assert!((l - 3.401197).abs() < 1e-6);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn confident_positive() {
        let mut s = vec![0.0; 30];
        s[0] = 10.0;
        let l = multiple_choice_loss(&s, 0).unwrap();
        let want = (1.0 + 29.0 * (-10f64).exp()).ln();
        assert!((l - want).abs() < 1e-15);
        // 29·e⁻¹⁰ alone is 1.3166e-3; the logarithm takes off another 8.7e-7.
        assert!((l - 1.315_732e-3).abs() < 1e-7);
    }

    #[test]
    fn errors() {
        assert!(matches!(multiple_choice_loss(&[1.0, 2.0], 2), Err(Error::Input(_))));
        assert!(matches!(multiple_choice_loss(&[1.0, f64::NAN], 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = [0.3, -1.2, 2.5, 0.0, 0.7];
        let (_, g) = multiple_choice_loss_grad(&s, 2).unwrap();
        let n = finite_diff_grad(|t| multiple_choice_loss(t, 2).unwrap(), &s, 1e-5).unwrap();
        assert!(relative_error(&g, &n) < 1e-8);
    }

    proptest! {
        #[test]
        fn loss_positive_and_grad_sums_to_zero(
            s in proptest::collection::vec(-50.0f64..50.0, 2..40),
            idx in 0usize..40,
        ) {
            let p = idx % s.len();
            let (l, g) = multiple_choice_loss_grad(&s, p).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            prop_assert!((multiple_choice_loss(&s.iter().map(|v| v + 3.0).collect::<Vec<_>>(), p).unwrap() - l).abs() < 1e-9);
        }
    }
}
