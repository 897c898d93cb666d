use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::combination::{check_shape, CombinationParams, ObjectiveMode, MAX_BITS};
use super::objective::{objective_raw, tail_interval, SurrogateObjective, TailInterval, OBJECTIVE_TOLERANCE};
use super::ActivationKind;
use crate::error::{Error, Result};

/// How the search space is parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parametrization {
    /// The first weight is solved from `Σ a_i c_i + (1 - Σ a_i) c_last = 0`,
    /// so every candidate satisfies the constraint exactly. With strictly
    /// increasing thresholds the solve never degenerates.
    Constrained,
    /// All weights and thresholds move freely.
    Free,
}

/// Simulated-annealing schedule.
///
/// Temperature decays geometrically by `cooling_ratio` every
/// `cooling_interval` iterations; the Gaussian proposal scale decays
/// geometrically from `proposal_scale.0` to `proposal_scale.1` over the run.
#[derive(Debug, Clone)]
pub struct SaConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub initial_temperature: f64,
    pub cooling_ratio: f64,
    pub cooling_interval: usize,
    pub proposal_scale: (f64, f64),
    pub seed: u64,
    pub epsilon_tail: f64,
    pub polish: bool,
    pub parametrization: Parametrization,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            iterations: 200_000,
            initial_temperature: 1.0,
            cooling_ratio: 0.995,
            cooling_interval: 100,
            proposal_scale: (0.5, 1e-3),
            seed: 0,
            epsilon_tail: 1e-8,
            polish: true,
            parametrization: Parametrization::Constrained,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if !(self.cooling_ratio > 0.0 && self.cooling_ratio < 1.0) {
            return bad("cooling ratio must lie in (0, 1)");
        }
        if self.cooling_interval == 0 {
            return bad("cooling interval must be positive");
        }
        if !(self.initial_temperature > 0.0) {
            return bad("initial temperature must be positive");
        }
        let (s0, s1) = self.proposal_scale;
        if !(s0 > 0.0 && s1 > 0.0) {
            return bad("proposal scales must be positive");
        }
        Ok(())
    }
}

struct Space {
    weights: usize,
    thresholds: usize,
    parametrization: Parametrization,
}

impl Space {
    /// Free weights stored ahead of the thresholds in a search vector.
    fn free_weights(&self) -> usize {
        match self.parametrization {
            Parametrization::Constrained => self.weights.saturating_sub(1),
            Parametrization::Free => self.weights,
        }
    }

    fn dim(&self) -> usize {
        if self.parametrization == Parametrization::Constrained && self.weights == 0 {
            // A single threshold pinned at the origin.
            return 0;
        }
        self.free_weights() + self.thresholds
    }

    /// Sorts the thresholds in place.
    fn canonicalize(&self, v: &mut [f64]) {
        let w = self.free_weights().min(v.len());
        v[w..].sort_by(f64::total_cmp);
    }

    fn decode(&self, v: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.dim() == 0 {
            return Some((Vec::new(), vec![0.0]));
        }
        let w = self.free_weights();
        let c = v[w..].to_vec();
        if c.windows(2).any(|p| p[0] >= p[1]) {
            return None;
        }
        let a = match self.parametrization {
            Parametrization::Free => v[..w].to_vec(),
            Parametrization::Constrained => {
                let n = self.thresholds - 1;
                let rest: f64 = v[..w].iter().zip(&c[1..]).map(|(ai, ci)| ai * (ci - c[n])).sum();
                let a0 = (-c[n] - rest) / (c[0] - c[n]);
                std::iter::once(a0).chain(v[..w].iter().copied()).collect()
            }
        };
        a.iter().all(|x| x.is_finite()).then_some((a, c))
    }

    fn initial(&self, rng: &mut ChaCha8Rng, bound: f64) -> Vec<f64> {
        let c = loop {
            let mut c: Vec<f64> = (0..self.thresholds).map(|_| rng.gen_range(-bound..bound)).collect();
            c.sort_by(f64::total_cmp);
            if c.windows(2).all(|w| w[1] - w[0] >= 1e-3) {
                break c;
            }
        };
        let a = (0..self.free_weights()).map(|_| rng.gen_range(0.0..1.0));
        a.chain(c).collect()
    }
}

struct RestartResult {
    params: Option<(Vec<f64>, Vec<f64>)>,
    value: f64,
}

/// Fits a `2^k - 1` ReLU combination to `kind` under `mode`.
///
/// Each restart runs an independent annealing chain seeded with
/// `seed + restart`, optionally polished by Nelder-Mead; the restart with
/// the smallest objective (adaptive quadrature) wins, lowest index on ties.
pub fn fit(kind: ActivationKind, k: u32, mode: ObjectiveMode, cfg: &SaConfig) -> Result<CombinationParams> {
    cfg.validate()?;
    if !(1..=MAX_BITS).contains(&k) {
        return Err(Error::Config(format!("bit budget must be in 1..={MAX_BITS}, got {k}")));
    }
    let interval = tail_interval(kind, cfg.epsilon_tail)?;
    let thresholds = (1usize << k) - 1;
    let space = Space { weights: thresholds - 1, thresholds, parametrization: cfg.parametrization };
    let fast = SurrogateObjective::new(kind, mode, &interval);

    let results: Vec<RestartResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(kind, mode, &interval, &space, &fast, cfg, r as u64))
        .collect();

    let best = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.value.is_finite() && r.params.is_some())
        .min_by(|(i, x), (j, y)| x.value.total_cmp(&y.value).then(i.cmp(j)))
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Fit(format!("all {} restarts diverged", cfg.restarts)))?;
    let (a, c) = best.params.clone().expect("filtered above");
    check_shape(k, &a, &c)?;
    let mut params = CombinationParams::new(k, a, c, mode, interval)?;
    params.objective_value = best.value;
    Ok(params)
}

fn run_restart(
    kind: ActivationKind,
    mode: ObjectiveMode,
    interval: &TailInterval,
    space: &Space,
    fast: &SurrogateObjective,
    cfg: &SaConfig,
    restart: u64,
) -> RestartResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart));
    let cost = |v: &[f64]| -> f64 {
        let mut w = v.to_vec();
        space.canonicalize(&mut w);
        match space.decode(&w) {
            Some((a, c)) => fast.eval(&a, &c),
            None => f64::INFINITY,
        }
    };

    let dim = space.dim();
    let mut current = space.initial(&mut rng, interval.upper.max(1e-3));
    let mut current_cost = cost(&current);
    let mut best = current.clone();
    let mut best_cost = current_cost;

    if dim > 0 {
        let (s0, s1) = cfg.proposal_scale;
        let decay = (s1 / s0).ln() / cfg.iterations.max(1) as f64;
        let mut temperature = cfg.initial_temperature;
        for it in 0..cfg.iterations {
            if it > 0 && it % cfg.cooling_interval == 0 {
                temperature *= cfg.cooling_ratio;
            }
            let scale = s0 * (decay * it as f64).exp();
            let j = rng.gen_range(0..dim);
            let z: f64 = rng.sample(StandardNormal);
            let mut proposal = current.clone();
            proposal[j] += scale * z;
            space.canonicalize(&mut proposal);
            let proposal_cost = cost(&proposal);
            let u: f64 = rng.gen();
            let accept = proposal_cost <= current_cost
                || (proposal_cost.is_finite() && u < (-(proposal_cost - current_cost) / temperature).exp());
            if accept {
                current = proposal;
                current_cost = proposal_cost;
                if current_cost < best_cost {
                    best_cost = current_cost;
                    best.clone_from(&current);
                }
            }
        }
        if cfg.polish && best_cost.is_finite() {
            for _ in 0..3 {
                let (x, fx) = nelder_mead(cost, &best, 1e-2, 4000, 1e-16);
                if fx <= best_cost {
                    best = x;
                    best_cost = fx;
                }
            }
            space.canonicalize(&mut best);
        }
    }

    let params = space.decode(&best);
    let value = match &params {
        Some((a, c)) => objective_raw(kind, a, c, mode, interval, OBJECTIVE_TOLERANCE).unwrap_or(f64::NAN),
        None => f64::NAN,
    };
    RestartResult { params, value }
}

/// Nelder-Mead downhill simplex. Returns the best vertex and its value.
///
/// The initial simplex offsets each coordinate by `step`. Stops when the
/// spread of simplex values drops below `ftol` or after `max_iter` steps.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64, max_iter: usize, ftol: f64) -> (Vec<f64>, f64) {
    let n = x0.len();
    if n == 0 {
        return (Vec::new(), f(x0));
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i] == 0.0 { step } else { step * x[i].abs().max(1.0) };
        let fx = f(&x);
        simplex.push((x, fx));
    }

    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect() };

    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (f_best, f_worst) = (simplex[0].1, simplex[n].1);
        if f_worst.is_finite() && (f_worst - f_best).abs() <= ftol {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            centroid.iter_mut().zip(x).for_each(|(c, v)| *c += v / n as f64);
        }
        let worst = simplex[n].0.clone();
        let reflected = combine(&centroid, &worst, -1.0);
        let f_ref = f(&reflected);
        if f_ref < simplex[0].1 {
            let expanded = combine(&centroid, &worst, -2.0);
            let f_exp = f(&expanded);
            simplex[n] = if f_exp < f_ref { (expanded, f_exp) } else { (reflected, f_ref) };
        } else if f_ref < simplex[n - 1].1 {
            simplex[n] = (reflected, f_ref);
        } else {
            let (toward, f_toward) = if f_ref < simplex[n].1 { (reflected, f_ref) } else { (worst, simplex[n].1) };
            let contracted = combine(&centroid, &toward, 0.5);
            let f_con = f(&contracted);
            if f_con < f_toward {
                simplex[n] = (contracted, f_con);
            } else {
                let best = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    *x = combine(&best, x, 0.5);
                    *fx = f(x);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, fx) = nelder_mead(rosen, &[-1.2, 1.0], 0.1, 5000, 1e-20);
        assert!(fx < 1e-12, "{fx}");
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(SaConfig { restarts: 0, ..SaConfig::default() }.validate().is_err());
        assert!(SaConfig { cooling_ratio: 1.0, ..SaConfig::default() }.validate().is_err());
        assert!(SaConfig::default().validate().is_ok());
    }

    #[test]
    fn constrained_decode_satisfies_constraint() {
        let space = Space { weights: 2, thresholds: 3, parametrization: Parametrization::Constrained };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = space.initial(&mut rng, 6.0);
            if let Some((a, c)) = space.decode(&v) {
                let r = super::super::combination::constraint_residual_raw(&a, &c);
                assert!(r.abs() < 1e-9, "{r}");
            }
        }
    }

    fn small_cfg(seed: u64) -> SaConfig {
        SaConfig { restarts: 3, iterations: 20_000, seed, ..SaConfig::default() }
    }

    #[test]
    fn fit_is_deterministic() {
        let a = fit(ActivationKind::Gelu, 2, ObjectiveMode::PrimitiveL2, &small_cfg(11)).unwrap();
        let b = fit(ActivationKind::Gelu, 2, ObjectiveMode::PrimitiveL2, &small_cfg(11)).unwrap();
        assert_eq!(a.a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.a.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.c.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.objective_value.to_bits(), b.objective_value.to_bits());
    }

    #[test]
    fn fit_rejects_bad_bit_budget() {
        assert!(fit(ActivationKind::Gelu, 0, ObjectiveMode::PrimitiveL2, &small_cfg(0)).is_err());
        assert!(fit(ActivationKind::Gelu, 5, ObjectiveMode::PrimitiveL2, &small_cfg(0)).is_err());
    }

    #[test]
    fn single_bit_budget_is_plain_relu() {
        let p = fit(ActivationKind::Gelu, 1, ObjectiveMode::PrimitiveL2, &small_cfg(0)).unwrap();
        assert!(p.a.is_empty());
        assert_eq!(p.c, vec![0.0]);
    }

    #[test]
    fn three_bit_budget_beats_two() {
        let cfg = small_cfg(5);
        let two = fit(ActivationKind::Gelu, 2, ObjectiveMode::PrimitiveL2, &cfg).unwrap();
        let three = fit(ActivationKind::Gelu, 3, ObjectiveMode::PrimitiveL2, &cfg).unwrap();
        assert_eq!(three.a.len(), 6);
        assert!(three.objective_value < two.objective_value);
        three.check_constraint().unwrap();
    }
}
