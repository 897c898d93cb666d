use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::objective::TailInterval;
use crate::error::{Error, Result};

/// Which L2 distance the surrogate was fitted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    /// `∫ (h - h̃)²`
    #[serde(rename = "primitive")]
    PrimitiveL2,
    /// `∫ (dh - dh̃)²`
    #[serde(rename = "derivative")]
    DerivativeL2,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PrimitiveL2 => "primitive",
            Self::DerivativeL2 => "derivative",
        }
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(Self::PrimitiveL2),
            "derivative" => Ok(Self::DerivativeL2),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected primitive or derivative)"))),
        }
    }
}

/// Weights and thresholds of
/// `h̃(x) = Σ_{i<n} a_i·relu(x - c_i) + (1 - Σ a_i)·relu(x - c_n)`
/// with `n = 2^k - 1` thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationParams {
    pub k: u32,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub mode: ObjectiveMode,
    /// NaN until evaluated.
    pub objective_value: f64,
    pub interval: TailInterval,
}

pub const MAX_BITS: u32 = 4;
pub const RESIDUAL_TOLERANCE: f64 = 1e-4;

impl CombinationParams {
    pub fn new(k: u32, a: Vec<f64>, c: Vec<f64>, mode: ObjectiveMode, interval: TailInterval) -> Result<Self> {
        check_shape(k, &a, &c)?;
        Ok(Self { k, a, c, mode, objective_value: f64::NAN, interval })
    }

    pub fn num_thresholds(&self) -> usize {
        self.c.len()
    }

    /// All `2^k - 1` ReLU weights, the last one implied.
    pub fn weights(&self) -> Vec<f64> {
        weights_of(&self.a)
    }

    /// Cumulative slopes `s_0 = 0, s_j = Σ_{i≤j} w_i, s_last = 1`.
    pub fn levels(&self) -> Vec<f64> {
        levels_of(&self.a)
    }

    pub fn eval(&self, x: f64) -> f64 {
        combo_eval_raw(&self.a, &self.c, x)
    }

    /// `(slope, segment code)` at `x`; at a threshold the lower segment applies.
    pub fn deriv(&self, x: f64) -> (f64, u8) {
        let code = segment_code(&self.c, x);
        (self.levels()[usize::from(code)], code)
    }

    /// `Σ a_i c_i + (1 - Σ a_i)·c_last`; zero makes `h̃(x) = x` above all thresholds.
    pub fn constraint_residual(&self) -> f64 {
        constraint_residual_raw(&self.a, &self.c)
    }

    /// Checks the `|residual| ≤ 1e-4` invariant.
    pub fn check_constraint(&self) -> Result<()> {
        let r = self.constraint_residual();
        if r.abs() <= RESIDUAL_TOLERANCE {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("constraint residual {r:e} exceeds {RESIDUAL_TOLERANCE:e}")))
        }
    }
}

pub(crate) fn check_shape(k: u32, a: &[f64], c: &[f64]) -> Result<()> {
    if !(1..=MAX_BITS).contains(&k) {
        return Err(Error::InvalidParams(format!("bit budget k must be in 1..={MAX_BITS}, got {k}")));
    }
    let n = (1usize << k) - 1;
    if a.len() != n - 1 || c.len() != n {
        return Err(Error::InvalidParams(format!(
            "k = {k} needs {} weights and {n} thresholds, got {} and {}",
            n - 1,
            a.len(),
            c.len()
        )));
    }
    if a.iter().chain(c).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("weights and thresholds must be finite".into()));
    }
    if let Some(i) = c.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams(format!(
            "thresholds must be strictly increasing (c[{i}] = {} >= c[{}] = {})",
            c[i],
            i + 1,
            c[i + 1]
        )));
    }
    Ok(())
}

pub(crate) fn weights_of(a: &[f64]) -> Vec<f64> {
    let mut w = a.to_vec();
    w.push(1.0 - a.iter().sum::<f64>());
    w
}

pub(crate) fn levels_of(a: &[f64]) -> Vec<f64> {
    let mut levels = Vec::with_capacity(a.len() + 2);
    levels.push(0.0);
    let mut acc = 0.0;
    for &ai in a {
        acc += ai;
        levels.push(acc);
    }
    levels.push(1.0);
    levels
}

pub(crate) fn combo_eval_raw(a: &[f64], c: &[f64], x: f64) -> f64 {
    let last = c.len() - 1;
    let tail = 1.0 - a.iter().sum::<f64>();
    let head: f64 = a.iter().zip(c).map(|(ai, ci)| ai * (x - ci).max(0.0)).sum();
    head + tail * (x - c[last]).max(0.0)
}

pub(crate) fn constraint_residual_raw(a: &[f64], c: &[f64]) -> f64 {
    let last = c.len() - 1;
    let head: f64 = a.iter().zip(c).map(|(ai, ci)| ai * ci).sum();
    head + (1.0 - a.iter().sum::<f64>()) * c[last]
}

/// Number of thresholds strictly below `x`. NaN compares false and maps to 0.
#[inline]
pub(crate) fn segment_code(c: &[f64], x: f64) -> u8 {
    c.iter().filter(|&&ci| x > ci).count() as u8
}

/// Published quasi-optimal coefficients, verbatim.
pub mod published {
    use super::*;
    use crate::approximator::{tail_interval, ActivationKind};

    pub const GELU_A: [f64; 2] = [-0.04922261145617846, 1.0979632065417297];
    pub const GELU_C: [f64; 3] = [-3.1858810036855245, -0.001178821281161997, 3.190832613414926];
    pub const SILU_A: [f64; 2] = [-0.04060357190528599, 1.080925428529668];
    pub const SILU_C: [f64; 3] = [-6.3050461001646445, -0.0008684942046214787, 6.325815242089708];
    /// Coefficients fitted to GELU under the derivative objective.
    pub const GELU_DERIV_A: [f64; 2] = [0.32465931184406527, 0.34812875668739607];
    pub const GELU_DERIV_C: [f64; 3] = [-0.4535743722857079, -0.0010587205574873046, 0.4487575313884231];

    pub const EPSILON_TAIL: f64 = 1e-8;

    fn build(kind: ActivationKind, a: &[f64], c: &[f64], mode: ObjectiveMode) -> CombinationParams {
        let interval = tail_interval(kind, EPSILON_TAIL).expect("default epsilon is in range");
        CombinationParams::new(2, a.to_vec(), c.to_vec(), mode, interval).expect("published coefficients are well formed")
    }

    pub fn gelu() -> CombinationParams {
        build(ActivationKind::Gelu, &GELU_A, &GELU_C, ObjectiveMode::PrimitiveL2)
    }

    pub fn silu() -> CombinationParams {
        build(ActivationKind::Silu, &SILU_A, &SILU_C, ObjectiveMode::PrimitiveL2)
    }

    pub fn gelu_derivative() -> CombinationParams {
        build(ActivationKind::Gelu, &GELU_DERIV_A, &GELU_DERIV_C, ObjectiveMode::DerivativeL2)
    }

    pub fn for_kind(kind: ActivationKind) -> CombinationParams {
        match kind {
            ActivationKind::Gelu => gelu(),
            ActivationKind::Silu => silu(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{reference_eval, tail_interval, ActivationKind};
    use proptest::prelude::*;

    fn interval() -> TailInterval {
        tail_interval(ActivationKind::Gelu, 1e-8).unwrap()
    }

    #[test]
    fn shape_and_ordering_are_validated() {
        let iv = interval();
        assert!(CombinationParams::new(2, vec![0.5], vec![-1.0, 0.0, 1.0], ObjectiveMode::PrimitiveL2, iv).is_err());
        assert!(CombinationParams::new(2, vec![0.5, 0.1], vec![-1.0, 1.0, 0.0], ObjectiveMode::PrimitiveL2, iv).is_err());
        assert!(CombinationParams::new(2, vec![0.5, 0.1], vec![-1.0, -1.0, 0.0], ObjectiveMode::PrimitiveL2, iv).is_err());
        assert!(CombinationParams::new(5, vec![], vec![], ObjectiveMode::PrimitiveL2, iv).is_err());
    }

    #[test]
    fn residual_direct_arithmetic() {
        let p = CombinationParams::new(2, vec![0.5, 0.0], vec![-1.0, 0.0, 2.0], ObjectiveMode::PrimitiveL2, interval()).unwrap();
        assert_eq!(p.constraint_residual(), 0.5);
        assert!(p.check_constraint().is_err());
    }

    #[test]
    fn published_residuals_are_tiny() {
        for p in [published::gelu(), published::silu()] {
            // Independent five-term sum.
            let r = p.a[0] * p.c[0] + p.a[1] * p.c[1] + (1.0 - p.a[0] - p.a[1]) * p.c[2];
            assert!(r.abs() < 1e-4);
            assert!((p.constraint_residual() - r).abs() < 1e-15);
            p.check_constraint().unwrap();
        }
    }

    #[test]
    fn combo_below_and_above_thresholds() {
        let p = published::gelu();
        assert_eq!(p.eval(-10.0), 0.0);
        let x = 10.0;
        assert!((p.eval(x) - (x - p.constraint_residual())).abs() < 1e-13);
    }

    #[test]
    fn combo_at_zero_matches_two_active_relus() {
        let p = published::gelu();
        let want = p.a[1] * (0.0 - p.c[1]) + p.a[0] * (0.0 - p.c[0]);
        assert!((p.eval(0.0) - want).abs() < 1e-15);
        let gap = (p.eval(0.0) - reference_eval(ActivationKind::Gelu, 0.0).unwrap()).abs();
        // The primitive surrogate dips to about -0.157 at the origin.
        assert!(gap < 0.16, "gap {gap}");
    }

    #[test]
    fn deriv_codes_and_levels() {
        let p = published::gelu();
        assert_eq!(p.deriv(-10.0), (0.0, 0));
        assert_eq!(p.deriv(10.0), (1.0, 3));
        let (level, code) = p.deriv(0.0);
        assert_eq!(code, 2);
        assert!((level - 1.0487405950855512).abs() < 1e-15);
        // Exactly at a threshold the lower segment applies.
        assert_eq!(p.deriv(p.c[1]).1, 1);
    }

    #[test]
    fn nan_maps_to_code_zero() {
        assert_eq!(segment_code(&published::gelu().c, f64::NAN), 0);
    }

    proptest! {
        #[test]
        fn continuous_at_every_threshold(i in 0usize..3, which in 0usize..3) {
            let p = [published::gelu(), published::silu(), published::gelu_derivative()][which].clone();
            let ci = p.c[i];
            let d = 1e-9;
            prop_assert!((p.eval(ci + d) - p.eval(ci - d)).abs() <= 1e-8 * (1.0 + ci.abs()));
        }

        #[test]
        fn limit_above_thresholds(x in 6.4f64..1e3, which in 0usize..3) {
            let p = [published::gelu(), published::silu(), published::gelu_derivative()][which].clone();
            let want = x - p.constraint_residual();
            prop_assert!((p.eval(x) - want).abs() <= 1e-12 * x.max(1.0));
        }

        #[test]
        fn level_matches_finite_difference(x in -8.0f64..8.0, which in 0usize..3) {
            let p = [published::gelu(), published::silu(), published::gelu_derivative()][which].clone();
            prop_assume!(p.c.iter().all(|ci| (x - ci).abs() > 1e-4));
            let h = 1e-6;
            let fd = (p.eval(x + h) - p.eval(x - h)) / (2.0 * h);
            prop_assert!((p.deriv(x).0 - fd).abs() < 1e-6);
        }

        #[test]
        fn codes_are_monotone(x in -50.0f64..50.0, dx in 0.0f64..10.0) {
            let p = published::silu();
            prop_assert!(p.deriv(x).1 <= p.deriv(x + dx).1);
        }
    }
}
