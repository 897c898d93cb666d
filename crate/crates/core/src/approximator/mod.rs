//! Reference activations, the ReLU-combination surrogate, its L2 objectives
//! and the simulated-annealing fitter.

mod anneal;
mod coeffs;
mod combination;
mod objective;
mod quadrature;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{normal_cdf, normal_pdf, sigmoid};

pub use anneal::{fit, nelder_mead, Parametrization, SaConfig};
pub use coeffs::CoefficientFile;
pub use combination::{published, CombinationParams, ObjectiveMode};
pub use objective::{
    objective, objective_with_tolerance, tail_interval, SurrogateObjective, TailInterval,
    OBJECTIVE_TOLERANCE,
};
pub use quadrature::AdaptiveSimpson;

/// The smooth activation being approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Gelu,
    Silu,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Silu => "silu",
        }
    }

    /// `h(x)` without the finiteness check; NaN propagates.
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Gelu => x * normal_cdf(x),
            Self::Silu => x * sigmoid(x),
        }
    }

    /// `dh(x)` without the finiteness check.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Self::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Self::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    /// `h(x) - max(x, 0)`, computed without cancellation for large `x`.
    pub(crate) fn eval_minus_relu(self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.eval(x);
        }
        match self {
            Self::Gelu => -x * normal_cdf(-x),
            Self::Silu => -x * sigmoid(-x),
        }
    }

    /// `dh(x) - [x > 0]`, computed without cancellation for large `x`.
    pub(crate) fn deriv_minus_step(self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.deriv(x);
        }
        match self {
            Self::Gelu => -normal_cdf(-x) + x * normal_pdf(x),
            Self::Silu => {
                let (s, sn) = (sigmoid(x), sigmoid(-x));
                -sn + x * s * sn
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Self::Gelu),
            "silu" => Ok(Self::Silu),
            other => Err(Error::Config(format!("unknown activation {other:?} (expected gelu or silu)"))),
        }
    }
}

fn check_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Domain(format!("activation input must be finite, got {x}")))
    }
}

/// `GELU(x) = x·Φ(x)` or `SiLU(x) = x·sigmoid(x)`.
pub fn reference_eval(kind: ActivationKind, x: f64) -> Result<f64> {
    check_finite(x).map(|x| kind.eval(x))
}

/// Analytic derivative of [`reference_eval`].
pub fn reference_deriv(kind: ActivationKind, x: f64) -> Result<f64> {
    check_finite(x).map(|x| kind.deriv(x))
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    #[test]
    fn reference_values_at_zero() {
        assert_eq!(reference_eval(ActivationKind::Gelu, 0.0).unwrap(), 0.0);
        assert_eq!(reference_eval(ActivationKind::Silu, 0.0).unwrap(), 0.0);
        assert_eq!(reference_deriv(ActivationKind::Gelu, 0.0).unwrap(), 0.5);
        assert_eq!(reference_deriv(ActivationKind::Silu, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn gelu_at_one_is_normal_cdf() {
        // Φ(1) to 20 digits.
        let v = reference_eval(ActivationKind::Gelu, 1.0).unwrap();
        assert!((v - 0.841_344_746_068_542_948_6).abs() < 1e-15);
        assert!((v - 0.8413447460685429).abs() < 1e-16);
    }

    #[test]
    fn high_precision_spot_values() {
        // 40-digit references for h and dh.
        let cases = [
            (ActivationKind::Gelu, -1.0, -0.158_655_253_931_457_051_4, None),
            (ActivationKind::Gelu, -5.0, -1.433_257_859_395_969_558e-6, None),
            (ActivationKind::Gelu, 2.5, 2.484_475_836_685_559_662, None),
            (ActivationKind::Gelu, 1.0, 0.841_344_746_068_542_948_6, Some(1.083_315_470_587_686_298)),
            (ActivationKind::Gelu, -3.0, -0.004_049_694_094_890_283_6, Some(-0.011_945_647_204_183_927)),
            (ActivationKind::Silu, 1.0, 0.731_058_578_630_004_879_3, Some(0.927_670_511_871_486_731_8)),
            (ActivationKind::Silu, -3.0, -0.142_277_619_532_700_342_6, Some(-0.088_104_106_015_169_617)),
            (ActivationKind::Silu, 10.0, 9.999_546_021_312_975_656, Some(1.000_408_560_208_657_082)),
        ];
        for (kind, x, h, dh) in cases {
            assert!((kind.eval(x) - h).abs() < 1e-14, "{kind}({x})");
            if let Some(dh) = dh {
                assert!((kind.deriv(x) - dh).abs() < 1e-14, "d{kind}({x})");
            }
        }
    }

    #[test]
    fn silu_derivative_matches_finite_difference_at_ten() {
        let h = 1e-5;
        let k = ActivationKind::Silu;
        let fd = (k.eval(10.0 + h) - k.eval(10.0 - h)) / (2.0 * h);
        assert!((reference_deriv(k, 10.0).unwrap() - fd).abs() < 1e-8);
    }

    #[test]
    fn non_finite_inputs_are_domain_errors() {
        for x in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(matches!(reference_eval(ActivationKind::Gelu, x), Err(Error::Domain(_))));
            assert!(matches!(reference_deriv(ActivationKind::Silu, x), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn stable_residual_forms_agree_with_direct_difference() {
        for kind in [ActivationKind::Gelu, ActivationKind::Silu] {
            for x in [-4.0, -0.3, 0.2, 1.7, 5.0] {
                let direct = kind.eval(x) - x.max(0.0);
                assert!((kind.eval_minus_relu(x) - direct).abs() < 1e-14);
                let step = if x > 0.0 { 1.0 } else { 0.0 };
                assert!((kind.deriv_minus_step(x) - (kind.deriv(x) - step)).abs() < 1e-14);
            }
        }
    }
}
