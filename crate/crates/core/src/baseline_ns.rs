//! Normalized sharpness, a baseline that also uses only diagonal curvature.
//!
//! Per layer, `NS_d = min σ1ᵀ D σ2 + (σ1⁻¹)ᵀ (W∘W) (σ2⁻¹)` over positive
//! `σ1` (output units) and `σ2` (input units) with unit products, where `D`
//! is the Hessian diagonal laid out in the weight's shape. In log
//! coordinates the objective is a sum of exponentials of affine functions,
//! hence convex, and the constraints are the hyperplanes `Σ u = Σ v = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian::{diag_exact, LayerDiagonals};
use crate::linalg::{Matrix, Rng};
use crate::network::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsConfig {
    pub max_iters: usize,
    pub step_size: f64,
    /// Stop once an accepted step improves the objective by less than
    /// `tol * |objective|`.
    pub tol: f64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self { max_iters: 500, step_size: 0.1, tol: 1e-10 }
    }
}

impl NsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerNs {
    pub value: f64,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NsReport {
    pub total: f64,
    pub per_layer: Vec<f64>,
    pub sigma1: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// Every layer met the tolerance within the iteration budget.
    pub converged: bool,
}

/// `f(u, v) = Σ_ij D_ij e^{u_i + v_j} + Q_ij e^{-u_i - v_j}`.
pub fn ns_objective(diag: &Matrix, weight_sq: &Matrix, u: &[f64], v: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            let e = (ui + vj).exp();
            total += diag.get(i, j) * e + weight_sq.get(i, j) / e;
        }
    }
    total
}

fn ns_gradient(diag: &Matrix, weight_sq: &Matrix, u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; v.len()];
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            let e = (ui + vj).exp();
            let g = diag.get(i, j) * e - weight_sq.get(i, j) / e;
            gu[i] += g;
            gv[j] += g;
        }
    }
    (gu, gv)
}

fn center(values: &mut [f64]) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
}

/// Minimizes the objective for one layer given its diagonal `diag` and
/// weight `weight`, both shaped `out × in`.
pub fn layer_normalized_sharpness(layer: usize, diag: &Matrix, weight: &Matrix, cfg: &NsConfig) -> Result<LayerNs> {
    cfg.validate()?;
    if diag.shape() != weight.shape() {
        return Err(Error::Shape(format!(
            "layer {layer}: diagonal is {}x{} but weight is {}x{}",
            diag.rows(),
            diag.cols(),
            weight.rows(),
            weight.cols()
        )));
    }
    let weight_sq = weight.square();
    let (m, k) = diag.shape();
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; k];
    let mut value = ns_objective(diag, &weight_sq, &u, &v);
    if !value.is_finite() {
        return Err(Error::NonFinite { layer, what: format!("normalized sharpness objective is {value}") });
    }
    let mut step = cfg.step_size;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters && !converged {
        iterations += 1;
        if value == 0.0 {
            converged = true;
            break;
        }
        let (mut gu, mut gv) = ns_gradient(diag, &weight_sq, &u, &v);
        // Projection onto the constraint hyperplanes, then scaling by the
        // objective so the step is independent of the curvature magnitude.
        center(&mut gu);
        center(&mut gv);
        gu.iter_mut().chain(gv.iter_mut()).for_each(|g| *g /= value);
        let grad_sq: f64 = gu.iter().chain(&gv).map(|g| g * g).sum();
        if grad_sq == 0.0 {
            converged = true;
            break;
        }
        loop {
            let mut cu: Vec<f64> = u.iter().zip(&gu).map(|(a, g)| a - step * g).collect();
            let mut cv: Vec<f64> = v.iter().zip(&gv).map(|(a, g)| a - step * g).collect();
            center(&mut cu);
            center(&mut cv);
            let candidate = ns_objective(diag, &weight_sq, &cu, &cv);
            // Armijo condition on the normalized gradient.
            if candidate.is_finite() && candidate <= value - 1e-4 * step * grad_sq * value {
                let improvement = value - candidate;
                u = cu;
                v = cv;
                value = candidate;
                step *= 1.25;
                converged = improvement < cfg.tol * value.abs();
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                converged = true;
                break;
            }
        }
    }
    Ok(LayerNs {
        value,
        sigma1: u.iter().map(|a| a.exp()).collect(),
        sigma2: v.iter().map(|a| a.exp()).collect(),
        iterations,
        converged,
    })
}

/// Normalized sharpness of `net` given its Hessian diagonals. Layers are
/// minimized independently in parallel.
pub fn normalized_sharpness(net: &Mlp, diags: &LayerDiagonals, cfg: &NsConfig) -> Result<NsReport> {
    cfg.validate()?;
    if diags.per_layer.len() != net.depth() {
        return Err(Error::Shape(format!("{} diagonal blocks for {} layers", diags.per_layer.len(), net.depth())));
    }
    let layers = (0..net.depth())
        .into_par_iter()
        .map(|d| layer_normalized_sharpness(d, &diags.per_layer[d], &net.weights()[d], cfg))
        .collect::<Result<Vec<_>>>()?;
    let per_layer: Vec<f64> = layers.iter().map(|l| l.value).collect();
    Ok(NsReport {
        total: per_layer.iter().sum(),
        per_layer,
        converged: layers.iter().all(|l| l.converged),
        sigma1: layers.iter().map(|l| l.sigma1.clone()).collect(),
        sigma2: layers.into_iter().map(|l| l.sigma2).collect(),
    })
}

/// [`normalized_sharpness`] with exact diagonals over `data`.
pub fn normalized_sharpness_of(net: &Mlp, data: &Dataset, cfg: &NsConfig) -> Result<NsReport> {
    normalized_sharpness(net, &diag_exact(net, data)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticDiag {
    pub estimate: LayerDiagonals,
    /// `‖estimate − exact‖₂` over all parameters.
    pub l2_error: f64,
    /// `l2_error / ‖exact‖₂`.
    pub rel_error: f64,
}

/// Averages `ε ⊙ (∇L(θ + rε) − ∇L(θ − rε)) / (2r)` over the given
/// parameter-space directions.
pub fn stochastic_diag_along(net: &Mlp, data: &Dataset, r: f64, directions: &[Vec<f64>]) -> Result<LayerDiagonals> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidArgument(format!("r must be positive, got {r}")));
    }
    if directions.is_empty() {
        return Err(Error::InvalidArgument("at least one direction is required".into()));
    }
    let theta = net.params();
    let mut acc = vec![0.0; theta.len()];
    for eps in directions {
        if eps.len() != theta.len() {
            return Err(Error::Shape(format!("direction has {} entries for {} parameters", eps.len(), theta.len())));
        }
        let plus: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + r * e).collect();
        let minus: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t - r * e).collect();
        let gp = net.with_params(&plus)?.grad_loss(data)?.flatten();
        let gm = net.with_params(&minus)?.grad_loss(data)?.flatten();
        for (((a, e), p), m) in acc.iter_mut().zip(eps).zip(&gp).zip(&gm) {
            *a += e * (p - m) / (2.0 * r);
        }
    }
    let scale = 1.0 / directions.len() as f64;
    let mut offset = 0;
    let mut per_layer = Vec::with_capacity(net.depth());
    for w in net.weights() {
        let len = w.rows() * w.cols();
        let block = acc[offset..offset + len].iter().map(|v| v * scale).collect();
        per_layer.push(Matrix::new(w.rows(), w.cols(), block)?);
        offset += len;
    }
    Ok(LayerDiagonals { per_layer })
}

/// Monte-Carlo diagonal estimate from `num_draws` standard Gaussian
/// directions, with its distance to the exact diagonal.
pub fn stochastic_diag(net: &Mlp, data: &Dataset, r: f64, num_draws: usize, rng: &mut Rng) -> Result<StochasticDiag> {
    if num_draws == 0 {
        return Err(Error::InvalidArgument("num_draws must be at least 1".into()));
    }
    let p = net.num_params();
    let directions: Vec<Vec<f64>> = (0..num_draws).map(|_| (0..p).map(|_| rng.normal()).collect()).collect();
    let estimate = stochastic_diag_along(net, data, r, &directions)?;
    let exact = diag_exact(net, data)?.flatten();
    let l2_error = estimate.flatten().iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let exact_norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel_error = if exact_norm > 0.0 { l2_error / exact_norm } else { f64::INFINITY };
    Ok(StochasticDiag { estimate, l2_error, rel_error })
}
