//! Aerobic energy supply σ from V̇O2max, reduced for race duration and
//! altitude: `σ = σ̂ · f_d · f_a` with `σ̂ = V̇O2max / 3`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest race duration the duration fraction covers [s].
pub const MAX_DURATION_S: f64 = 940.0 * 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysiologyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("outside the model's range: {0}")]
    OutOfModel(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaInputs {
    /// [ml/kg/min]
    pub vo2max: f64,
    /// Anticipated race duration [s].
    pub duration_s: f64,
    /// Mean altitude [m].
    pub altitude_m: f64,
}

/// σ with its factors, as reported alongside predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaBreakdown {
    pub sigma_hat: f64,
    pub f_d: f64,
    pub f_a: f64,
    pub sigma: f64,
    pub duration_s: f64,
    pub altitude_m: f64,
}

/// Unreduced supply [m²/s³]: one litre of O₂ yields about 20 kJ.
pub fn sigma_hat(vo2max: f64) -> Result<f64, PhysiologyError> {
    if !(vo2max.is_finite() && vo2max > 0.0) {
        return Err(PhysiologyError::InvalidInput(format!(
            "vo2max must be positive, got {vo2max}"
        )));
    }
    Ok(vo2max / 3.0)
}

pub fn duration_fraction(duration_s: f64) -> Result<f64, PhysiologyError> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(PhysiologyError::InvalidInput(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if duration_s >= MAX_DURATION_S {
        return Err(PhysiologyError::OutOfModel(format!(
            "duration {:.1} min is not below 940 min",
            duration_s / 60.0
        )));
    }
    Ok((940.0 - duration_s / 60.0) / 1000.0)
}

pub fn altitude_fraction(altitude_m: f64) -> Result<f64, PhysiologyError> {
    if !(altitude_m.is_finite() && altitude_m >= 0.0) {
        return Err(PhysiologyError::InvalidInput(format!(
            "altitude must be nonnegative, got {altitude_m}"
        )));
    }
    let fa = 1.0 - 11.7e-9 * altitude_m * altitude_m - 4.01e-6 * altitude_m;
    if fa <= 0.0 {
        return Err(PhysiologyError::OutOfModel(format!(
            "no aerobic power left at {altitude_m} m"
        )));
    }
    Ok(fa)
}

pub fn sigma_available(inputs: &SigmaInputs) -> Result<SigmaBreakdown, PhysiologyError> {
    let sigma_hat = sigma_hat(inputs.vo2max)?;
    let f_d = duration_fraction(inputs.duration_s)?;
    let f_a = altitude_fraction(inputs.altitude_m)?;
    Ok(SigmaBreakdown {
        sigma_hat,
        f_d,
        f_a,
        sigma: sigma_hat * f_d * f_a,
        duration_s: inputs.duration_s,
        altitude_m: inputs.altitude_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigma_hat_values() {
        assert_eq!(sigma_hat(81.0).unwrap(), 27.0);
        assert_eq!(sigma_hat(60.0).unwrap(), 20.0);
        assert!(sigma_hat(0.0).is_err());
    }

    #[test]
    fn duration_fraction_values() {
        assert!((duration_fraction(5820.0).unwrap() - 0.843).abs() < 1e-15);
        assert!((duration_fraction(60.0).unwrap() - 0.939).abs() < 1e-15);
        assert!(matches!(
            duration_fraction(MAX_DURATION_S),
            Err(PhysiologyError::OutOfModel(_))
        ));
    }

    #[test]
    fn altitude_fraction_values() {
        assert_eq!(altitude_fraction(0.0).unwrap(), 1.0);
        assert!((altitude_fraction(2000.0).unwrap() - 0.94518).abs() < 1e-12);
        assert!((altitude_fraction(4000.0).unwrap() - 0.79676).abs() < 1e-12);
        assert!(altitude_fraction(10_000.0).is_err());
        assert!(altitude_fraction(-1.0).is_err());
    }

    #[test]
    fn combined_supply() {
        let b = sigma_available(&SigmaInputs {
            vo2max: 81.0,
            duration_s: 5820.0,
            altitude_m: 0.0,
        })
        .unwrap();
        assert!((b.sigma - 22.761).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn supply_decreases_with_duration_and_altitude(
            t in 60.0f64..50_000.0, dt in 1.0f64..5000.0, a in 0.0f64..5000.0, da in 1.0f64..1000.0,
        ) {
            let s = |t: f64, a: f64| sigma_available(&SigmaInputs { vo2max: 70.0, duration_s: t, altitude_m: a }).unwrap().sigma;
            prop_assert!(s(t + dt, a) < s(t, a));
            prop_assert!(s(t, a + da) < s(t, a));
            let fd = duration_fraction(t).unwrap();
            let fa = altitude_fraction(a).unwrap();
            prop_assert!(fd > 0.0 && fd < 1.0 && fa > 0.0 && fa <= 1.0);
        }
    }
}
