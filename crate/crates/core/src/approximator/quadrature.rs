use crate::error::{Error, Result};

/// Adaptive Simpson quadrature with an absolute tolerance budget.
///
/// The budget is split across panels in proportion to their width and halved
/// at every bisection. Panels that still miss their share at `max_depth` are
/// accepted with the Richardson-corrected estimate and the whole result is
/// reported as [`Error::Quadrature`] carrying that partial value.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveSimpson {
    pub tolerance: f64,
    pub max_depth: u32,
}

impl Default for AdaptiveSimpson {
    fn default() -> Self {
        Self { tolerance: 1e-12, max_depth: 48 }
    }
}

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
}

impl AdaptiveSimpson {
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<f64> {
        self.integrate_panels(&[a, b], |_| &f)
    }

    /// Integrates over consecutive panels `[breaks[i], breaks[i+1]]`, using
    /// the integrand `panel_fn(i)` on panel `i`. Breaks must be sorted.
    pub fn integrate_panels<'f, F, G>(&self, breaks: &[f64], panel_fn: G) -> Result<f64>
    where
        F: Fn(f64) -> f64 + ?Sized + 'f,
        G: Fn(usize) -> &'f F,
    {
        let total = breaks.last().copied().unwrap_or(0.0) - breaks.first().copied().unwrap_or(0.0);
        if breaks.len() < 2 || total <= 0.0 {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        let mut converged = true;
        for (i, w) in breaks.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let f = panel_fn(i);
            let tol = self.tolerance * (b - a) / total;
            let m = 0.5 * (a + b);
            let (fa, fm, fb) = (f(a), f(m), f(b));
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            let panel = Panel { a, b, fa, fm, fb, whole };
            sum += recurse(f, &panel, tol, self.max_depth, &mut converged);
        }
        if converged {
            Ok(sum)
        } else {
            Err(Error::Quadrature { partial: sum, max_depth: self.max_depth })
        }
    }
}

fn recurse<F: Fn(f64) -> f64 + ?Sized>(f: &F, p: &Panel, tol: f64, depth: u32, converged: &mut bool) -> f64 {
    let m = 0.5 * (p.a + p.b);
    let lm = 0.5 * (p.a + m);
    let rm = 0.5 * (m + p.b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
    let right = (p.b - m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
    let delta = left + right - p.whole;
    if delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    // No representable midpoint left, or out of depth.
    if depth == 0 || lm <= p.a || rm >= p.b {
        *converged = false;
        return left + right + delta / 15.0;
    }
    let lp = Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left };
    let rp = Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right };
    recurse(f, &lp, 0.5 * tol, depth - 1, converged) + recurse(f, &rp, 0.5 * tol, depth - 1, converged)
}
