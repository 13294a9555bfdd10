use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Temperature-scaled softmax, stabilised by subtracting the maximum.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Config("softmax temperature must be positive".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .map(|s| libm::exp((s - max) / temperature))
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

fn check_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::NotNormalized { what, sum });
    }
    Ok(())
}

/// `Σ pᵢ ln(pᵢ / qᵢ)` with `0 · ln(0 / q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len("kl divergence", p.len(), q.len())?;
    if p.is_empty() {
        return Err(Error::Empty("kl divergence inputs"));
    }
    check_distribution("kl target", p)?;
    check_distribution("kl model", q)?;
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi == 0.0 {
            continue;
        }
        if *qi <= 0.0 {
            return Err(Error::NonFinite("kl divergence (q has a zero where p is positive)"));
        }
        total += pi * libm::log(pi / qi);
    }
    Ok(total)
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("mse", target.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::Empty("mse inputs"));
    }
    let sum: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_len("mse gradient", target.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::Empty("mse inputs"));
    }
    let scale = 2.0 / pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(a, b)| scale * (a - b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&[1.0, 1.0, 1.0], 1.0).unwrap();
        u.iter().for_each(|p| assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15));
        let p = softmax(&[0.0, core::f64::consts::LN_2], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0 / 3.0, epsilon = 1e-12);
        // e² / (e² + 1) evaluated at high precision: 0.8807970779778823
        let p = softmax(&[1.0, 0.0], 0.5).unwrap();
        assert_abs_diff_eq!(p[0], 0.880797, epsilon = 1e-5);
        assert_abs_diff_eq!(p[1], 0.119203, epsilon = 1e-5);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(softmax(&[], 1.0), Err(Error::Empty("softmax scores")));
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_large_scores_stay_finite() {
        let p = softmax(&[1000.0, 999.0, -1000.0], 0.01).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            core::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // 0.7·ln 1.4 + 0.3·ln 0.6
        assert_abs_diff_eq!(kl_divergence(&[0.7, 0.3], &[0.5, 0.5]).unwrap(), 0.082282, epsilon = 1e-5);
    }

    #[test]
    fn kl_errors() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(matches!(
            kl_divergence(&[0.6, 0.6], &[0.5, 0.5]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(mse_grad(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn mse_matches_resummation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(96);
        let a: Vec<f64> = (0..96).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..96).map(|_| rng.random_range(-3.0..3.0)).collect();
        // Expand (a-b)² = a² - 2ab + b² and sum each term separately.
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let oracle = (aa - 2.0 * ab + bb) / 96.0;
        assert_abs_diff_eq!(mse(&a, &b).unwrap(), oracle, epsilon = 1e-12);
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gibbs_inequality((p, q) in (1usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            scores in proptest::collection::vec(-20.0f64..20.0, 1..16),
            shift in -50.0f64..50.0,
            temp in 0.5f64..5.0,
        ) {
            let base = softmax(&scores, temp).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let moved = softmax(&shifted, temp).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((base.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(base.iter().all(|p| *p > 0.0 && *p <= 1.0));
        }
    }
}
