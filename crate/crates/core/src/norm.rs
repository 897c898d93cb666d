//! LayerNorm and RMSNorm, their memory-sharing variants, and affine merging.
//!
//! The memory-sharing forms keep the normalized output `y` and one `σ` per
//! token instead of the input. Their backward reads only those:
//! `g_x = σ⁻¹ (H g − p⁻¹ y (yᵀ g))`, with `H` the centering projection for
//! LayerNorm and the identity for RMSNorm. `H` is symmetric idempotent, so the
//! `σ = sqrt(p⁻¹ xᵀHᵀHx + ε)` and `σ = sqrt(p⁻¹ xᵀHx + ε)` forms coincide; the
//! single-`H` form is used.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-feature affine `y ↦ α ⊙ y + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return shape_err(format!("alpha has {} entries, beta {}", alpha.len(), beta.len()));
        }
        Ok(Self { alpha, beta })
    }

    pub fn identity(p: usize) -> Self {
        Self { alpha: vec![1.0; p], beta: vec![0.0; p] }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if self.dim() == p {
            Ok(())
        } else {
            shape_err(format!("affine has dimension {}, input has {p} features", self.dim()))
        }
    }
}

/// State kept by a memory-sharing norm between forward and backward.
///
/// `y` is reference counted so the following layer can hold the same
/// allocation as its saved input.
#[derive(Debug, Clone)]
pub struct SavedNormState {
    y: Arc<Tensor>,
    sigma: Vec<f64>,
    shared: bool,
}

impl SavedNormState {
    pub fn y(&self) -> &Arc<Tensor> {
        &self.y
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Whether `y` is owned (and accounted) by the following layer.
    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn set_shared(&mut self, shared: bool) {
        self.shared = shared;
    }
}

/// A linear layer with a preceding norm's affine folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLinear {
    pub w_tilde: Tensor,
    pub b_tilde: Vec<f64>,
}

/// Gradients of a norm with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub grad_x: Tensor,
    pub grad_alpha: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

/// Gradients of the unmerged parameters recovered from a merged pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmergedGrads {
    pub grad_w: Tensor,
    pub grad_b: Vec<f64>,
    pub grad_alpha: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("eps must be positive and finite, got {eps}")))
    }
}

fn dims(x: &Tensor) -> Result<(usize, usize)> {
    let (t, p) = x.dims2()?;
    if p < 2 {
        return shape_err(format!("norms need at least 2 features, got {p}"));
    }
    Ok((t, p))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        shape_err(format!("upstream shape {:?} does not match {:?}", b.shape(), a.shape()))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(y, σ)` per token; `centered` selects LayerNorm (true) or RMSNorm.
fn normalize(x: &Tensor, eps: f64, centered: bool) -> Result<(Tensor, Vec<f64>)> {
    check_eps(eps)?;
    let (t, p) = dims(x)?;
    let mut y = Vec::with_capacity(t * p);
    let mut sigma = Vec::with_capacity(t);
    for row in x.rows() {
        let mu = if centered { mean(row) } else { 0.0 };
        let energy = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / p as f64;
        let s = (energy + eps).sqrt();
        y.extend(row.iter().map(|v| (v - mu) / s));
        sigma.push(s);
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, sigma))
}

/// Backward from `(y, σ)` alone.
fn shared_backward(y: &Tensor, sigma: &[f64], upstream: &Tensor, centered: bool) -> Result<Tensor> {
    same_shape(y, upstream)?;
    let (t, p) = y.dims2()?;
    if sigma.len() != t {
        return shape_err(format!("{} saved sigmas for {t} tokens", sigma.len()));
    }
    let pf = p as f64;
    let mut out = Vec::with_capacity(t * p);
    for ((yr, gr), &s) in y.rows().zip(upstream.rows()).zip(sigma) {
        let gm = if centered { mean(gr) } else { 0.0 };
        let proj = dot(yr, gr) / pf;
        out.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - gm - yi * proj) / s));
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Standard LayerNorm with affine.
pub fn ln_forward(x: &Tensor, affine: &AffineParams, eps: f64) -> Result<Tensor> {
    let (_, p) = dims(x)?;
    affine.check_dim(p)?;
    let (mut y, _) = normalize(x, eps, true)?;
    apply_affine(&mut y, affine);
    Ok(y)
}

fn apply_affine(y: &mut Tensor, affine: &AffineParams) {
    let p = affine.dim();
    for row in y.data_mut().chunks_mut(p) {
        for ((v, a), b) in row.iter_mut().zip(&affine.alpha).zip(&affine.beta) {
            *v = a * *v + b;
        }
    }
}

/// Textbook LayerNorm backward from the saved input.
pub fn ln_backward_oracle(x: &Tensor, affine: &AffineParams, eps: f64, upstream: &Tensor) -> Result<NormGrads> {
    affine_norm_backward(x, affine, eps, upstream, true)
}

/// Textbook RMSNorm backward from the saved input. `beta` is ignored.
pub fn rms_backward_oracle(x: &Tensor, affine: &AffineParams, eps: f64, upstream: &Tensor) -> Result<NormGrads> {
    affine_norm_backward(x, affine, eps, upstream, false)
}

fn affine_norm_backward(
    x: &Tensor,
    affine: &AffineParams,
    eps: f64,
    upstream: &Tensor,
    centered: bool,
) -> Result<NormGrads> {
    check_eps(eps)?;
    let (_, p) = dims(x)?;
    affine.check_dim(p)?;
    same_shape(x, upstream)?;
    let pf = p as f64;
    let mut grad_x = Vec::with_capacity(x.len());
    let mut grad_alpha = vec![0.0; p];
    let mut grad_beta = vec![0.0; p];
    for (row, g) in x.rows().zip(upstream.rows()) {
        let mu = if centered { mean(row) } else { 0.0 };
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / pf;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
        let dxhat: Vec<f64> = g.iter().zip(&affine.alpha).map(|(gi, a)| gi * a).collect();
        let m1 = if centered { mean(&dxhat) } else { 0.0 };
        let m2 = dot(&dxhat, &xhat) / pf;
        grad_x.extend(dxhat.iter().zip(&xhat).map(|(d, xh)| inv * (d - m1 - xh * m2)));
        for j in 0..p {
            grad_alpha[j] += g[j] * xhat[j];
            grad_beta[j] += g[j];
        }
    }
    if !centered {
        grad_beta.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(NormGrads { grad_x: Tensor::new(x.shape().to_vec(), grad_x)?, grad_alpha, grad_beta })
}

/// Affine-free LayerNorm keeping `(y, σ)`; `x` is not retained.
pub fn msln_forward(x: &Tensor, eps: f64) -> Result<(Arc<Tensor>, SavedNormState)> {
    let (y, sigma) = normalize(x, eps, true)?;
    let y = Arc::new(y);
    Ok((Arc::clone(&y), SavedNormState { y, sigma, shared: false }))
}

pub fn msln_backward(state: &SavedNormState, upstream: &Tensor) -> Result<Tensor> {
    shared_backward(&state.y, &state.sigma, upstream, true)
}

/// Standard RMSNorm with scale `α` (β is not part of RMSNorm and must be zero).
pub fn rms_forward(x: &Tensor, affine: &AffineParams, eps: f64) -> Result<Tensor> {
    let (_, p) = dims(x)?;
    affine.check_dim(p)?;
    if affine.beta.iter().any(|&b| b != 0.0) {
        return Err(Error::InvalidParams("RMSNorm has no bias; beta must be zero".into()));
    }
    let (mut y, _) = normalize(x, eps, false)?;
    apply_affine(&mut y, affine);
    Ok(y)
}

/// Affine-free RMSNorm keeping `(y, σ)`.
pub fn msrms_forward(x: &Tensor, eps: f64) -> Result<(Arc<Tensor>, SavedNormState)> {
    let (y, sigma) = normalize(x, eps, false)?;
    let y = Arc::new(y);
    Ok((Arc::clone(&y), SavedNormState { y, sigma, shared: false }))
}

pub fn msrms_backward(state: &SavedNormState, upstream: &Tensor) -> Result<Tensor> {
    shared_backward(&state.y, &state.sigma, upstream, false)
}

fn check_linear(w: &Tensor, b: &[f64], affine: &AffineParams) -> Result<(usize, usize)> {
    let (out, p) = w.dims2()?;
    affine.check_dim(p)?;
    if b.len() != out {
        return shape_err(format!("bias has {} entries for {out} outputs", b.len()));
    }
    Ok((out, p))
}

/// `W̃ = W·diag(α)`, `b̃ = W·β + b`.
pub fn merge_ln(w: &Tensor, b: &[f64], affine: &AffineParams) -> Result<MergedLinear> {
    let (out, p) = check_linear(w, b, affine)?;
    let mut w_tilde = Vec::with_capacity(out * p);
    let mut b_tilde = Vec::with_capacity(out);
    for (row, bo) in w.rows().zip(b) {
        w_tilde.extend(row.iter().zip(&affine.alpha).map(|(wi, a)| wi * a));
        b_tilde.push(dot(row, &affine.beta) + bo);
    }
    Ok(MergedLinear { w_tilde: Tensor::matrix(out, p, w_tilde)?, b_tilde })
}

/// `W̃ = W·diag(α)`, `b̃ = b`.
pub fn merge_rms(w: &Tensor, b: &[f64], affine: &AffineParams) -> Result<MergedLinear> {
    if affine.beta.iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidParams("RMSNorm has no bias; beta must be zero".into()));
    }
    let (out, p) = check_linear(w, b, affine)?;
    let w_tilde = w.rows().flat_map(|row| row.iter().zip(&affine.alpha).map(|(wi, a)| wi * a)).collect();
    Ok(MergedLinear { w_tilde: Tensor::matrix(out, p, w_tilde)?, b_tilde: b.to_vec() })
}

/// Maps merged-parameter gradients back through `W̃ = W·diag(α)`, `b̃ = W·β + b`:
/// `∂W = ∂W̃·diag(α) + ∂b̃·βᵀ`, `∂b = ∂b̃`, `∂α_j = Σ_o W_oj ∂W̃_oj`, `∂β = Wᵀ ∂b̃`.
pub fn unmerge_grads(
    w: &Tensor,
    affine: &AffineParams,
    grad_w_tilde: &Tensor,
    grad_b_tilde: &[f64],
) -> Result<UnmergedGrads> {
    let (out, p) = check_linear(w, grad_b_tilde, affine)?;
    same_shape(w, grad_w_tilde)?;
    let mut grad_w = Vec::with_capacity(out * p);
    let mut grad_alpha = vec![0.0; p];
    let mut grad_beta = vec![0.0; p];
    for ((wr, gr), gb) in w.rows().zip(grad_w_tilde.rows()).zip(grad_b_tilde) {
        for j in 0..p {
            grad_w.push(gr[j] * affine.alpha[j] + gb * affine.beta[j]);
            grad_alpha[j] += wr[j] * gr[j];
            grad_beta[j] += wr[j] * gb;
        }
    }
    Ok(UnmergedGrads {
        grad_w: Tensor::matrix(out, p, grad_w)?,
        grad_b: grad_b_tilde.to_vec(),
        grad_alpha,
        grad_beta,
    })
}
