//! Exponential decay of intensity over land toward a background wind.

use serde::{Deserialize, Serialize};

use crate::domain::LandSegment;
use crate::error::{Error, Result};
use crate::stats::{decay_curve, nls_exp_decay_fit, NlsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandModel {
    /// Decay rate per 6-h step.
    pub alpha: f64,
    /// Background wind, kt.
    pub v_b: f64,
    /// Multiplier on intensity at land entry; 1 means no jump at landfall.
    #[serde(default = "one")]
    pub reduction_factor: f64,
    /// Entry intensities at or below this value are held constant. Defaults
    /// to `v_b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_decay_threshold: Option<f64>,
    #[serde(default)]
    pub n_segments: usize,
    #[serde(default)]
    pub objective: f64,
}

fn one() -> f64 {
    1.0
}

impl LandModel {
    pub fn new(alpha: f64, v_b: f64) -> Self {
        Self {
            alpha,
            v_b,
            reduction_factor: 1.0,
            no_decay_threshold: None,
            n_segments: 0,
            objective: 0.0,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.no_decay_threshold.unwrap_or(self.v_b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.v_b >= 0.0) || !(self.reduction_factor > 0.0) {
            return Err(Error::Schema(format!(
                "land model needs alpha > 0, v_b >= 0 and a positive reduction factor (alpha {}, v_b {})",
                self.alpha, self.v_b
            )));
        }
        Ok(())
    }
}

pub const LAND_FIT_INIT: (f64, f64) = (0.05, 20.0);

/// Least-squares fit of the decay curve to filtered land segments.
pub fn land_fit(segments: &[LandSegment]) -> Result<LandModel> {
    if segments.is_empty() {
        return Err(Error::Fit("land model: no land segments to fit".into()));
    }
    let fit = nls_exp_decay_fit(segments, LAND_FIT_INIT, &NlsOptions::default())?;
    Ok(LandModel {
        n_segments: segments.len(),
        objective: fit.objective,
        ..LandModel::new(fit.alpha, fit.v_b)
    })
}

/// Intensity `t` steps after land entry at `v0`.
pub fn land_apply(model: &LandModel, v0: f64, t: f64) -> f64 {
    let v0 = v0 * model.reduction_factor;
    if v0 <= model.threshold() {
        return v0;
    }
    decay_curve(v0, model.alpha, model.v_b, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper() -> LandModel {
        LandModel::new(0.049, 18.82)
    }

    #[test]
    fn closed_form_values() {
        let m = paper();
        assert_eq!(land_apply(&m, 100.0, 0.0), 100.0);
        let expected = 18.82 + 81.18 * (-0.196f64).exp();
        assert!((land_apply(&m, 100.0, 4.0) - expected).abs() < 1e-9);
        assert!((expected - 85.55).abs() < 0.005);
        for t in 0..50 {
            assert_eq!(land_apply(&m, 15.0, t as f64), 15.0);
            assert_eq!(land_apply(&m, 18.82, t as f64), 18.82);
        }
    }

    #[test]
    fn approaches_background() {
        let m = paper();
        let v = land_apply(&m, 120.0, 1000.0);
        assert!((v - 18.82).abs() < 1e-6 * (120.0 - 18.82));
    }

    #[test]
    fn fit_single_exact_segment() {
        let v0 = 90.0;
        let seg = LandSegment {
            storm_id: "S".into(),
            start_index: 0,
            v0,
            intensities: (1..=2).map(|t| decay_curve(v0, 0.049, 18.82, t as f64)).collect(),
        };
        let m = land_fit(std::slice::from_ref(&seg)).unwrap();
        for (i, v) in seg.intensities.iter().enumerate() {
            assert!((land_apply(&m, v0, (i + 1) as f64) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_fit_is_error() {
        assert!(land_fit(&[]).is_err());
    }

    proptest! {
        #[test]
        fn semigroup(v0 in 19.0f64..200.0, t1 in 0.0f64..20.0, t2 in 0.0f64..20.0) {
            let m = paper();
            let two = land_apply(&m, land_apply(&m, v0, t1), t2);
            prop_assert!((two - land_apply(&m, v0, t1 + t2)).abs() < 1e-10);
        }

        #[test]
        fn strictly_decreasing(v0 in 19.0f64..200.0, t in 0.0f64..50.0) {
            let m = paper();
            prop_assert!(land_apply(&m, v0, t + 0.5) < land_apply(&m, v0, t));
        }
    }
}
