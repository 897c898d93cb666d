use std::path::PathBuf;

use membp_core::approximator::{
    fit, objective, published, ActivationKind, CoefficientFile, ObjectiveMode, SaConfig,
};
use membp_core::stepgrad::{self, StepLevels};
use membp_core::tape::load_levels;

fn coefficient_path(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "coefficients", name].iter().collect()
}

#[test]
fn shipped_coefficient_files_hold_the_published_values() {
    let cases = [
        ("gelu_primitive.json", published::gelu(), ActivationKind::Gelu),
        ("silu_primitive.json", published::silu(), ActivationKind::Silu),
        ("gelu_derivative.json", published::gelu_derivative(), ActivationKind::Gelu),
    ];
    for (name, expected, kind) in cases {
        let file = CoefficientFile::read(&coefficient_path(name)).unwrap();
        let params = file.to_params().unwrap();
        assert_eq!(params.a, expected.a, "{name}");
        assert_eq!(params.c, expected.c, "{name}");
        let j = objective(kind, &params, params.mode, &params.interval).unwrap();
        assert!((j - file.objective_value).abs() < 1e-12, "{name}: {j} vs {}", file.objective_value);
    }
}

#[test]
fn levels_load_from_coefficient_files() {
    let levels = load_levels(&coefficient_path("gelu_primitive.json"), ActivationKind::Gelu).unwrap();
    assert_eq!(levels, StepLevels::from_params(&published::gelu()));
    assert_eq!(levels.bits(), 2);
    let missing = load_levels(&coefficient_path("absent.json"), ActivationKind::Gelu);
    assert!(missing.is_err());
}

#[test]
fn short_fit_lands_near_the_published_silu_objective() {
    let cfg = SaConfig { restarts: 2, iterations: 60_000, ..SaConfig::default() };
    let p = fit(ActivationKind::Silu, 2, ObjectiveMode::PrimitiveL2, &cfg).unwrap();
    let reference = published::silu();
    let j_ref = objective(ActivationKind::Silu, &reference, reference.mode, &reference.interval).unwrap();
    assert!(p.objective_value <= 1.05 * j_ref, "{} vs {j_ref}", p.objective_value);
    assert!(p.constraint_residual().abs() < 1e-4);

    let again = fit(ActivationKind::Silu, 2, ObjectiveMode::PrimitiveL2, &cfg).unwrap();
    assert_eq!(p.a, again.a);
    assert_eq!(p.c, again.c);
}

#[test]
fn fitted_levels_drive_the_step_kernel() {
    let levels = StepLevels::from_params(&published::silu());
    let x: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
    let enc = stepgrad::forward_encode(ActivationKind::Silu, &levels, &x).unwrap();
    assert_eq!(enc.output, stepgrad::plain_forward(ActivationKind::Silu, &x));
    let ones = vec![1.0; x.len()];
    let grad = stepgrad::backward(&enc.codes, &levels, &ones).unwrap();
    for (xi, g) in x.iter().zip(&grad) {
        assert_eq!(*g, levels.levels()[usize::from(levels.code(*xi))]);
    }
}
