use membp_core::norm::{
    self, ln_backward_oracle, ln_forward, merge_ln, merge_rms, msln_backward, msln_forward, msrms_backward,
    msrms_forward, rms_backward_oracle, rms_forward, unmerge_grads, AffineParams,
};
use membp_core::tensor::{matmul_nn, matmul_nt, matmul_tn, sum_rows};
use membp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const EPS: f64 = norm::DEFAULT_EPS;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64, shift: f64) -> Vec<f64> {
    (0..n).map(|_| shift + std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64, shift: f64) -> Tensor {
    Tensor::matrix(rows, cols, gaussian(rng, rows * cols, std, shift)).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 { num } else { num / den }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `x ↦ ⟨u, f(x)⟩`.
fn fd_input_grad(x: &Tensor, u: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let h = 1e-6;
    let mut xp = x.clone();
    (0..x.len())
        .map(|j| {
            let orig = xp.data()[j];
            xp.data_mut()[j] = orig + h;
            let up = dot(u, &f(&xp));
            xp.data_mut()[j] = orig - h;
            let down = dot(u, &f(&xp));
            xp.data_mut()[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn ms_norm_input_gradients_match_oracle_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_oracle, mut worst_fd) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let p = rng.gen_range(3..=64);
        let rows = rng.gen_range(1..=4);
        let shift = rng.gen_range(-2.0..2.0);
        let x = matrix(&mut rng, rows, p, 1.0 + trial as f64 * 0.05, shift);
        let u = matrix(&mut rng, rows, p, 1.0, 0.0);
        let id = AffineParams::identity(p);

        let (_, state) = msln_forward(&x, EPS).unwrap();
        let g = msln_backward(&state, &u).unwrap();
        let oracle = ln_backward_oracle(&x, &id, EPS, &u).unwrap();
        worst_oracle = worst_oracle.max(rel(g.data(), oracle.grad_x.data()));
        let fd = fd_input_grad(&x, &u, |x| (*msln_forward(x, EPS).unwrap().0).clone());
        worst_fd = worst_fd.max(rel(g.data(), &fd));

        let (_, state) = msrms_forward(&x, EPS).unwrap();
        let g = msrms_backward(&state, &u).unwrap();
        let oracle = rms_backward_oracle(&x, &id, EPS, &u).unwrap();
        worst_oracle = worst_oracle.max(rel(g.data(), oracle.grad_x.data()));
        let fd = fd_input_grad(&x, &u, |x| (*msrms_forward(x, EPS).unwrap().0).clone());
        worst_fd = worst_fd.max(rel(g.data(), &fd));
    }
    assert!(worst_oracle < 1e-10, "oracle {worst_oracle:e}");
    assert!(worst_fd < 1e-6, "finite differences {worst_fd:e}");
}

#[test]
fn affine_oracles_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p = rng.gen_range(3..=16);
        let x = matrix(&mut rng, 3, p, 1.3, 0.4);
        let u = matrix(&mut rng, 3, p, 1.0, 0.0);
        let affine = AffineParams::new(gaussian(&mut rng, p, 0.5, 1.0), gaussian(&mut rng, p, 0.5, 0.0)).unwrap();
        let g = ln_backward_oracle(&x, &affine, EPS, &u).unwrap();
        let fd = fd_input_grad(&x, &u, |x| ln_forward(x, &affine, EPS).unwrap());
        assert!(rel(g.grad_x.data(), &fd) < 1e-6);
        let y = ln_forward(&x, &AffineParams::identity(p), EPS).unwrap();
        let ga: Vec<f64> = (0..p).map(|j| y.rows().zip(u.rows()).map(|(y, u)| y[j] * u[j]).sum()).collect();
        assert!(rel(&g.grad_alpha, &ga) < 1e-12);
        assert!(rel(&g.grad_beta, &sum_rows(&u).unwrap()) < 1e-12);

        let rms_affine = AffineParams::new(affine.alpha.clone(), vec![0.0; p]).unwrap();
        let g = rms_backward_oracle(&x, &rms_affine, EPS, &u).unwrap();
        let fd = fd_input_grad(&x, &u, |x| rms_forward(x, &rms_affine, EPS).unwrap());
        assert!(rel(g.grad_x.data(), &fd) < 1e-6);
    }
}

struct Pipeline {
    out: Tensor,
    grad_x: Tensor,
    grad_w: Tensor,
    grad_b: Vec<f64>,
}

/// `z = norm(x) Wᵀ + b`, differentiated against upstream `u`.
fn affine_pipeline(x: &Tensor, w: &Tensor, b: &[f64], affine: &AffineParams, u: &Tensor, rms: bool) -> Pipeline {
    let y = if rms { rms_forward(x, affine, EPS) } else { ln_forward(x, affine, EPS) }.unwrap();
    let mut out = matmul_nt(&y, w).unwrap();
    for row in out.data_mut().chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    }
    let gy = matmul_nn(u, w).unwrap();
    let grads = if rms { rms_backward_oracle(x, affine, EPS, &gy) } else { ln_backward_oracle(x, affine, EPS, &gy) };
    Pipeline { out, grad_x: grads.unwrap().grad_x, grad_w: matmul_tn(u, &y).unwrap(), grad_b: sum_rows(u).unwrap() }
}

fn merged_pipeline(x: &Tensor, w: &Tensor, b: &[f64], u: &Tensor, rms: bool) -> Pipeline {
    let (y, state) = if rms { msrms_forward(x, EPS) } else { msln_forward(x, EPS) }.unwrap();
    let mut out = matmul_nt(&y, w).unwrap();
    for row in out.data_mut().chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    }
    let gy = matmul_nn(u, w).unwrap();
    let grad_x = if rms { msrms_backward(&state, &gy) } else { msln_backward(&state, &gy) }.unwrap();
    Pipeline { out, grad_x, grad_w: matmul_tn(u, &y).unwrap(), grad_b: sum_rows(u).unwrap() }
}

#[test]
fn merged_pipeline_matches_affine_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..60 {
        let rms = trial % 2 == 1;
        let (p, out, rows) = (rng.gen_range(3..=32), rng.gen_range(1..=16), rng.gen_range(1..=5));
        let x = matrix(&mut rng, rows, p, 2.0, 0.5);
        let w = matrix(&mut rng, out, p, 0.5, 0.0);
        let b = gaussian(&mut rng, out, 1.0, 0.0);
        let beta = if rms { vec![0.0; p] } else { gaussian(&mut rng, p, 0.7, 0.0) };
        let affine = AffineParams::new(gaussian(&mut rng, p, 0.6, 1.0), beta).unwrap();
        let u = matrix(&mut rng, rows, out, 1.0, 0.0);

        let reference = affine_pipeline(&x, &w, &b, &affine, &u, rms);
        let m = if rms { merge_rms(&w, &b, &affine) } else { merge_ln(&w, &b, &affine) }.unwrap();
        let merged = merged_pipeline(&x, &m.w_tilde, &m.b_tilde, &u, rms);
        assert!(rel(merged.out.data(), reference.out.data()) < 1e-10);
        assert!(rel(merged.grad_x.data(), reference.grad_x.data()) < 1e-10);

        let back = unmerge_grads(&w, &affine, &merged.grad_w, &merged.grad_b).unwrap();
        assert!(rel(back.grad_w.data(), reference.grad_w.data()) < 1e-10);
        assert!(rel(&back.grad_b, &reference.grad_b) < 1e-10);
        if !rms {
            let oracle = ln_backward_oracle(&x, &affine, EPS, &matmul_nn(&u, &w).unwrap()).unwrap();
            assert!(rel(&back.grad_alpha, &oracle.grad_alpha) < 1e-10);
            assert!(rel(&back.grad_beta, &oracle.grad_beta) < 1e-10);
        }
    }
}

#[test]
fn merged_weight_gradient_scales_by_alpha_when_beta_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, out) = (12, 5);
    let x = matrix(&mut rng, 4, p, 1.0, 0.0);
    let w = matrix(&mut rng, out, p, 0.5, 0.0);
    let b = gaussian(&mut rng, out, 1.0, 0.0);
    let affine = AffineParams::new(gaussian(&mut rng, p, 0.4, 1.0), vec![0.0; p]).unwrap();
    let u = matrix(&mut rng, 4, out, 1.0, 0.0);
    let reference = affine_pipeline(&x, &w, &b, &affine, &u, false);
    let m = merge_ln(&w, &b, &affine).unwrap();
    let merged = merged_pipeline(&x, &m.w_tilde, &m.b_tilde, &u, false);
    let scaled: Vec<f64> = merged.grad_w.rows().flat_map(|r| r.iter().zip(&affine.alpha).map(|(g, a)| g * a)).collect();
    assert!(rel(&scaled, reference.grad_w.data()) < 1e-12);
}
