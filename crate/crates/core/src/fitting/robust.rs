//! Robust weights for the matching residuals.

use crate::{Error, Result};

/// Weight function applied to residual magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RobustKernel {
    /// `1 − (d/d_t)²` inside the threshold, 0 outside.
    #[default]
    Tukey,
    /// Classical biweight `(1 − (d/d_t)²)²` inside the threshold.
    TukeySquared,
    /// Every match weighted 1 (plain least squares).
    Unit,
}

impl RobustKernel {
    pub fn weight(self, d: f64, threshold: f64) -> Result<f64> {
        match self {
            RobustKernel::Tukey => tukey_weight(d, threshold),
            RobustKernel::TukeySquared => tukey_weight(d, threshold).map(|w| w * w),
            RobustKernel::Unit => {
                check_distance(d)?;
                Ok(1.0)
            }
        }
    }
}

fn check_distance(d: f64) -> Result<()> {
    if !(d >= 0.0) {
        return Err(Error::invalid("robust weight needs a nonnegative distance"));
    }
    Ok(())
}

/// `ψ(d) = 1 − (d/d_t)²` for `d ≤ d_t`, otherwise 0.
pub fn tukey_weight(d: f64, threshold: f64) -> Result<f64> {
    check_distance(d)?;
    if !(threshold > 0.0) {
        return Err(Error::invalid("robust threshold must be positive"));
    }
    if d <= threshold {
        let r = d / threshold;
        Ok(1.0 - r * r)
    } else {
        Ok(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoint_values() {
        assert_eq!(tukey_weight(0.0, 0.01).unwrap(), 1.0);
        assert_eq!(tukey_weight(0.01, 0.01).unwrap(), 0.0);
        assert!((tukey_weight(0.005, 0.01).unwrap() - 0.75).abs() <= 1e-15);
    }

    #[test]
    fn negative_distance_is_rejected() {
        assert!(tukey_weight(-1e-9, 0.01).is_err());
        assert!(tukey_weight(f64::NAN, 0.01).is_err());
        assert!(tukey_weight(0.0, 0.0).is_err());
    }

    #[test]
    fn kernel_variants() {
        assert_eq!(RobustKernel::Unit.weight(5.0, 0.01).unwrap(), 1.0);
        assert!((RobustKernel::TukeySquared.weight(0.005, 0.01).unwrap() - 0.5625).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weight_vanishes_beyond_threshold(d in 0.01f64..10.0) {
            prop_assert_eq!(tukey_weight(d, 0.01).unwrap(), 0.0);
        }

        #[test]
        fn weight_in_unit_interval(d in 0.0f64..0.02) {
            let w = tukey_weight(d, 0.01).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
