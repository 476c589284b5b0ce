use crate::error::{Error, Result};

/// Logistic sigmoid, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)`, overflow-safe.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`sigmoid`] on the open unit interval.
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("logit undefined at p = {p}")));
    }
    Ok(p.ln() - (-p).ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((logit(sigmoid(1.7)).unwrap() - 1.7).abs() < 1e-10);
        assert!(softplus(800.0).is_finite());
        assert_eq!(softplus(-800.0), 0.0);
    }

    #[test]
    fn logit_domain() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(logit(p), Err(Error::Domain(_))));
        }
    }

    // For x above ~13.7 the double nearest σ(x) no longer pins x down to 1e-10:
    // one ulp of σ(x) near 1 moves the logit by about ε·eˣ. The bound below is
    // 1e-10 wherever that is representable and the conditioning limit beyond.
    #[test]
    fn logit_inverts_sigmoid_up_to_conditioning() {
        let mut x = -30.0;
        while x <= 30.0 {
            let back = logit(sigmoid(x)).unwrap();
            let bound = 1e-10_f64.max(2.0 * f64::EPSILON * x.exp());
            assert!((back - x).abs() <= bound, "x = {x}: {back}");
            x += 0.01;
        }
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(x in -50.0f64..50.0) {
            prop_assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() <= 1e-12);
        }

        #[test]
        fn softplus_difference_is_identity(x in -50.0f64..50.0) {
            prop_assert!((softplus(x) - softplus(-x) - x).abs() <= 1e-12);
        }

        #[test]
        fn logit_exact_where_representable(x in -30.0f64..13.0) {
            prop_assert!((logit(sigmoid(x)).unwrap() - x).abs() <= 1e-10);
        }
    }
}
