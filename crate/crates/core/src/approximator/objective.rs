use serde::{Deserialize, Serialize};

use super::combination::{levels_of, segment_code, weights_of, CombinationParams, ObjectiveMode};
use super::quadrature::AdaptiveSimpson;
use super::ActivationKind;
use crate::error::{Error, Result};

/// Absolute quadrature tolerance used by [`objective`].
pub const OBJECTIVE_TOLERANCE: f64 = 1e-12;

/// Integration window `[lower, upper]` outside of which the squared fit error
/// integrates to less than `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailInterval {
    pub lower: f64,
    pub upper: f64,
    pub epsilon: f64,
}

impl TailInterval {
    pub fn new(lower: f64, upper: f64, epsilon: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower > upper {
            return Err(Error::Domain(format!("invalid interval [{lower}, {upper}]")));
        }
        Ok(Self { lower, upper, epsilon })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Symmetric window for tail mass `epsilon`:
/// `B = √(-2 ln ε)` for GELU and `B = -2 ln(ε/2)` for SiLU, with `A = -B`.
pub fn tail_interval(kind: ActivationKind, epsilon: f64) -> Result<TailInterval> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("tail epsilon must lie in (0, 1), got {epsilon}")));
    }
    let b = match kind {
        ActivationKind::Gelu => (-2.0 * epsilon.ln()).sqrt(),
        ActivationKind::Silu => -2.0 * (epsilon / 2.0).ln(),
    };
    Ok(TailInterval { lower: -b, upper: b, epsilon })
}

/// L2 distance between the activation and the surrogate on `interval`, by
/// adaptive Simpson split at every threshold.
pub fn objective(
    kind: ActivationKind,
    params: &CombinationParams,
    mode: ObjectiveMode,
    interval: &TailInterval,
) -> Result<f64> {
    objective_with_tolerance(kind, params, mode, interval, OBJECTIVE_TOLERANCE)
}

pub fn objective_with_tolerance(
    kind: ActivationKind,
    params: &CombinationParams,
    mode: ObjectiveMode,
    interval: &TailInterval,
    tolerance: f64,
) -> Result<f64> {
    objective_raw(kind, &params.a, &params.c, mode, interval, tolerance)
}

pub(crate) fn objective_raw(
    kind: ActivationKind,
    a: &[f64],
    c: &[f64],
    mode: ObjectiveMode,
    interval: &TailInterval,
    tolerance: f64,
) -> Result<f64> {
    let (lo, hi) = (interval.lower, interval.upper);
    let mut breaks = vec![lo];
    breaks.extend(c.iter().copied().filter(|&ci| ci > lo && ci < hi));
    breaks.push(hi);

    let levels = levels_of(a);
    let weights = weights_of(a);
    // On each panel the surrogate is affine: slope s, intercept -Σ_{active} w_j c_j.
    let panels: Vec<Box<dyn Fn(f64) -> f64>> = breaks
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let code = usize::from(segment_code(c, mid));
            let slope = levels[code];
            let intercept = -weights.iter().zip(c).take(code).map(|(wj, cj)| wj * cj).sum::<f64>();
            let f: Box<dyn Fn(f64) -> f64> = match mode {
                ObjectiveMode::PrimitiveL2 => Box::new(move |x| {
                    let d = kind.eval(x) - (slope * x + intercept);
                    d * d
                }),
                ObjectiveMode::DerivativeL2 => Box::new(move |x| {
                    let d = kind.deriv(x) - slope;
                    d * d
                }),
            };
            f
        })
        .collect();
    let quad = AdaptiveSimpson { tolerance, max_depth: 48 };
    quad.integrate_panels(&breaks, |i| panels[i].as_ref())
}

// 10-point Gauss-Legendre rule on [-1, 1], positive half.
const GL_X: [f64; 5] = [0.14887433898163122, 0.4333953941292472, 0.6794095682990244, 0.8650633666889845, 0.9739065285171717];
const GL_W: [f64; 5] = [0.295524224714753, 0.2692667193099965, 0.219086362515982, 0.14945134915058036, 0.06667134430868807];
const TABLE_STEP: f64 = 1.0 / 32.0;

/// Fast evaluator of the same objective for the fitter.
///
/// Writes `h - h̃ = r + u` with `r = h - relu` (or `dh - step`) smooth on each
/// side of zero and decaying in both tails, and `u` piecewise affine. The
/// moments `∫r`, `∫x·r`, `∫r²` are tabulated once; an evaluation then costs a
/// few Gauss-Legendre corrections per threshold and stays well conditioned
/// even on the wide SiLU window.
#[derive(Debug, Clone)]
pub struct SurrogateObjective {
    kind: ActivationKind,
    mode: ObjectiveMode,
    lower: f64,
    upper: f64,
    nodes: Vec<f64>,
    moments: Vec<[f64; 3]>,
}

impl SurrogateObjective {
    pub fn new(kind: ActivationKind, mode: ObjectiveMode, interval: &TailInterval) -> Self {
        let (lower, upper) = (interval.lower, interval.upper);
        let mut nodes = vec![lower];
        let first = (lower / TABLE_STEP).floor() as i64 + 1;
        let mut j = first;
        loop {
            let x = j as f64 * TABLE_STEP;
            if x >= upper {
                break;
            }
            if x > lower {
                nodes.push(x);
            }
            j += 1;
        }
        if upper > lower {
            nodes.push(upper);
        }
        let mut this = Self { kind, mode, lower, upper, nodes, moments: Vec::new() };
        let mut acc = [0.0; 3];
        this.moments.push(acc);
        for w in this.nodes.windows(2) {
            let m = this.cell(w[0], w[1]);
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
            this.moments.push(acc);
        }
        this
    }

    #[inline]
    fn residual(&self, x: f64) -> f64 {
        match self.mode {
            ObjectiveMode::PrimitiveL2 => self.kind.eval_minus_relu(x),
            ObjectiveMode::DerivativeL2 => self.kind.deriv_minus_step(x),
        }
    }

    /// `[∫r, ∫x·r, ∫r²]` over `[lo, hi]`, which must not straddle zero.
    fn cell(&self, lo: f64, hi: f64) -> [f64; 3] {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut out = [0.0; 3];
        for (xk, wk) in GL_X.iter().zip(GL_W) {
            for x in [mid - half * xk, mid + half * xk] {
                let r = self.residual(x);
                out[0] += wk * r;
                out[1] += wk * x * r;
                out[2] += wk * r * r;
            }
        }
        out.map(|v| v * half)
    }

    fn cumulative(&self, t: f64) -> [f64; 3] {
        if t <= self.lower {
            return [0.0; 3];
        }
        if t >= self.upper {
            return *self.moments.last().expect("table is never empty");
        }
        let i = self.nodes.partition_point(|&n| n <= t) - 1;
        let base = self.moments[i];
        let extra = self.cell(self.nodes[i], t);
        [base[0] + extra[0], base[1] + extra[1], base[2] + extra[2]]
    }

    /// Objective at weights `a` and thresholds `c`; `+inf` when `c` is not
    /// strictly increasing or any value is non-finite.
    pub fn eval(&self, a: &[f64], c: &[f64]) -> f64 {
        if a.iter().chain(c).any(|v| !v.is_finite()) || c.windows(2).any(|w| w[0] >= w[1]) {
            return f64::INFINITY;
        }
        let (lo, hi) = (self.lower, self.upper);
        if hi <= lo {
            return 0.0;
        }
        let mut breaks: Vec<f64> = Vec::with_capacity(c.len() + 3);
        breaks.push(lo);
        if lo < 0.0 && hi > 0.0 {
            breaks.push(0.0);
        }
        breaks.extend(c.iter().copied().filter(|&ci| ci > lo && ci < hi));
        breaks.push(hi);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();

        let levels = levels_of(a);
        let weights = weights_of(a);
        let mut total = 0.0;
        let mut prev = self.cumulative(breaks[0]);
        for w in breaks.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let next = self.cumulative(t1);
            let mid = 0.5 * (t0 + t1);
            let code = usize::from(segment_code(c, mid));
            let slope = levels[code];
            let active: f64 = weights.iter().zip(c).take(code).map(|(wj, cj)| wj * cj).sum();
            let pos = if mid > 0.0 { 1.0 } else { 0.0 };
            let (p, q) = match self.mode {
                ObjectiveMode::PrimitiveL2 => (pos - slope, active),
                ObjectiveMode::DerivativeL2 => (0.0, pos - slope),
            };
            let d0 = next[0] - prev[0];
            let d1 = next[1] - prev[1];
            let d2 = next[2] - prev[2];
            let uu = (t1 - t0) * (p * p * (t1 * t1 + t1 * t0 + t0 * t0) / 3.0 + p * q * (t1 + t0) + q * q);
            total += d2 + 2.0 * (p * d1 + q * d0) + uu;
            prev = next;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::published;

    #[test]
    fn tail_interval_values() {
        let g = tail_interval(ActivationKind::Gelu, 1e-8).unwrap();
        assert!((g.upper - (-2.0 * 1e-8f64.ln()).sqrt()).abs() < 1e-15);
        assert!((g.upper - 6.0697).abs() < 1e-4);
        assert_eq!(g.lower, -g.upper);
        let s = tail_interval(ActivationKind::Silu, 1e-8).unwrap();
        assert!((s.upper - 38.2277).abs() < 1e-4);
        let half = tail_interval(ActivationKind::Gelu, 0.5).unwrap();
        assert!((half.upper - 1.1774).abs() < 1e-4);
        for bad in [0.0, 1.0, -0.1, 2.0, f64::NAN] {
            assert!(matches!(tail_interval(ActivationKind::Gelu, bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn degenerate_interval_gives_zero() {
        let p = published::gelu();
        let iv = TailInterval::new(0.7, 0.7, 1e-8).unwrap();
        assert_eq!(objective(ActivationKind::Gelu, &p, ObjectiveMode::PrimitiveL2, &iv).unwrap(), 0.0);
        let fast = SurrogateObjective::new(ActivationKind::Gelu, ObjectiveMode::PrimitiveL2, &iv);
        assert_eq!(fast.eval(&p.a, &p.c), 0.0);
    }

    #[test]
    fn surrogate_matches_adaptive_quadrature() {
        let cases = [
            (ActivationKind::Gelu, published::gelu(), ObjectiveMode::PrimitiveL2),
            (ActivationKind::Silu, published::silu(), ObjectiveMode::PrimitiveL2),
            (ActivationKind::Gelu, published::gelu_derivative(), ObjectiveMode::DerivativeL2),
            (ActivationKind::Gelu, published::gelu(), ObjectiveMode::DerivativeL2),
            (ActivationKind::Silu, published::silu(), ObjectiveMode::DerivativeL2),
            (ActivationKind::Gelu, published::gelu_derivative(), ObjectiveMode::PrimitiveL2),
        ];
        for (kind, p, mode) in cases {
            let iv = p.interval;
            let slow = objective(kind, &p, mode, &iv).unwrap();
            let fast = SurrogateObjective::new(kind, mode, &iv).eval(&p.a, &p.c);
            assert!((slow - fast).abs() < 1e-11, "{kind} {mode}: {slow} vs {fast}");
        }
    }

    #[test]
    fn surrogate_handles_thresholds_outside_window() {
        let iv = tail_interval(ActivationKind::Gelu, 1e-8).unwrap();
        let p = CombinationParams::new(2, vec![0.2, 0.5], vec![-9.0, 0.3, 8.0], ObjectiveMode::PrimitiveL2, iv).unwrap();
        let slow = objective(ActivationKind::Gelu, &p, ObjectiveMode::PrimitiveL2, &iv).unwrap();
        let fast = SurrogateObjective::new(ActivationKind::Gelu, ObjectiveMode::PrimitiveL2, &iv).eval(&p.a, &p.c);
        assert!((slow - fast).abs() < 1e-10 * slow.max(1.0));
    }

    #[test]
    fn unsorted_thresholds_are_infinite() {
        let iv = tail_interval(ActivationKind::Gelu, 1e-8).unwrap();
        let fast = SurrogateObjective::new(ActivationKind::Gelu, ObjectiveMode::PrimitiveL2, &iv);
        assert_eq!(fast.eval(&[0.1, 0.2], &[1.0, 0.0, 2.0]), f64::INFINITY);
    }

    #[test]
    fn refinement_changes_less_than_tolerance() {
        for (kind, p, mode) in [
            (ActivationKind::Gelu, published::gelu(), ObjectiveMode::PrimitiveL2),
            (ActivationKind::Silu, published::silu(), ObjectiveMode::PrimitiveL2),
            (ActivationKind::Gelu, published::gelu_derivative(), ObjectiveMode::DerivativeL2),
        ] {
            let coarse = objective_with_tolerance(kind, &p, mode, &p.interval, OBJECTIVE_TOLERANCE).unwrap();
            let fine = objective_with_tolerance(kind, &p, mode, &p.interval, OBJECTIVE_TOLERANCE / 2.0).unwrap();
            assert!((coarse - fine).abs() < OBJECTIVE_TOLERANCE);
        }
    }

    #[test]
    fn modes_prefer_their_own_optimum() {
        let iv = tail_interval(ActivationKind::Gelu, 1e-8).unwrap();
        let prim = published::gelu();
        let deriv = published::gelu_derivative();
        let k = ActivationKind::Gelu;
        let p_at_prim = objective(k, &prim, ObjectiveMode::PrimitiveL2, &iv).unwrap();
        let p_at_deriv = objective(k, &deriv, ObjectiveMode::PrimitiveL2, &iv).unwrap();
        let d_at_prim = objective(k, &prim, ObjectiveMode::DerivativeL2, &iv).unwrap();
        let d_at_deriv = objective(k, &deriv, ObjectiveMode::DerivativeL2, &iv).unwrap();
        assert!(p_at_prim < p_at_deriv);
        assert!(d_at_deriv < d_at_prim);

        let s = published::silu();
        let sp = objective(ActivationKind::Silu, &s, ObjectiveMode::PrimitiveL2, &s.interval).unwrap();
        let sd = objective(ActivationKind::Silu, &s, ObjectiveMode::DerivativeL2, &s.interval).unwrap();
        assert!(sp > 0.0 && sd > 0.0 && sp != sd);
    }
}
