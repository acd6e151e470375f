//! Cross-checks of the exact computations against independent routes.
//!
//! Every check builds its own small networks from a seed, so the suite needs
//! no data files. Deviations are relative unless stated otherwise.

use std::fmt;

use serde::Serialize;

use minsharp::baseline_ns::{layer_normalized_sharpness, normalized_sharpness, ns_objective, stochastic_diag, NsConfig};
use minsharp::hessian::{
    diag_exact, max_rel_deviation, oracle_fd_diag, oracle_kron, trace_exact, trace_exact_with, NormConvention,
    TraceOptions, FD_EPS,
};
use minsharp::linalg::{Matrix, Rng};
use minsharp::sharpness::{
    alpha_transform, grad_scaling_check, minimize_scaled_trace, minimum_sharpness, minimum_sharpness_of, scaled_trace,
    Alpha,
};
use minsharp::{Dataset, Mlp, Result};

use crate::stats::median;

/// Log-uniform half width for random scale vectors: components in `[e^-3, e^3]`.
pub const ALPHA_HALF_WIDTH: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub deviation: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `deviation <= tolerance`; NaN never passes.
    pub fn at_most(name: impl Into<String>, deviation: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: deviation <= tolerance, deviation, tolerance, detail: detail.into() }
    }

    /// Passes when `value > threshold`.
    pub fn above(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: value > threshold, deviation: value, tolerance: threshold, detail: detail.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} value={:.3e} bound={:.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.deviation,
            self.tolerance,
            self.detail
        )
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Gaussian inputs with uniformly random labels.
pub fn gaussian_data(n: usize, dim: usize, k: usize, rng: &mut Rng) -> Result<Dataset> {
    let features = Matrix::new(n, dim, (0..n * dim).map(|_| rng.normal()).collect())?;
    Dataset::new(features, (0..n).map(|_| rng.below(k)).collect(), k)
}

fn fixture(dims: &[usize], n: usize, rng: &mut Rng) -> Result<(Mlp, Dataset)> {
    let net = Mlp::init(dims, rng)?;
    let data = gaussian_data(n, dims[0], *dims.last().expect("dims nonempty"), rng)?;
    Ok((net, data))
}

/// Zero weights on a single layer give uniform `p`, so
/// `Tr[H] = (1 - 1/K) mean_i ‖x_i‖²`.
pub fn check_single_layer(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 1);
    let mut worst = 0.0f64;
    for k in [2usize, 3, 10] {
        let data = gaussian_data(4, 5, k, &mut rng)?;
        let net = Mlp::zeros(&[5, k])?;
        let got = trace_exact(&net, &data)?.per_layer[0];
        let norms: f64 = (0..data.len()).map(|i| data.sample(i).0.iter().map(|v| v * v).sum::<f64>()).sum();
        let expected = (1.0 - 1.0 / k as f64) * norms / data.len() as f64;
        worst = worst.max(rel(got, expected));
    }
    Ok(vec![Check::at_most("single-layer closed form", worst, 1e-12, "K in {2,3,10}, W = 0")])
}

/// Exact traces and diagonals against explicit Kronecker blocks on 20 random
/// networks with widths in `[2, 8]` and depth 2 to 4.
pub fn check_kron_oracle(seed: u64, norm: NormConvention) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 2);
    let opts = TraceOptions { norm, ..TraceOptions::default() };
    let (mut trace_dev, mut diag_dev) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let depth = 2 + rng.below(3);
        let dims: Vec<usize> = (0..=depth).map(|_| 2 + rng.below(7)).collect();
        let (net, data) = fixture(&dims, 10, &mut rng)?;
        let oracle = oracle_kron(&net, &data, true)?;
        let traces = trace_exact_with(&net, &data, &opts)?;
        for (a, b) in traces.per_layer.iter().zip(&oracle.traces.per_layer) {
            trace_dev = trace_dev.max(rel(*a, *b));
        }
        let exact = diag_exact(&net, &data)?.flatten();
        let reference = oracle.diagonals.expect("requested").flatten();
        let floor = 1e-12 * reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        diag_dev = diag_dev.max(max_rel_deviation(&exact, &reference, floor));
    }
    Ok(vec![
        Check::at_most("kron oracle: traces", trace_dev, 1e-10, "20 nets, n = 10"),
        Check::at_most("kron oracle: diagonals", diag_dev, 1e-10, "entries below 1e-12 of the largest skipped"),
    ])
}

/// Central finite differences of the loss gradient against the exact
/// diagonal on coordinates whose activation pattern is stable.
pub fn check_finite_differences(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 3);
    let (net, data) = fixture(&[5, 7, 4, 3], 5, &mut rng)?;
    let fd = oracle_fd_diag(&net, &data, FD_EPS)?;
    let exact = diag_exact(&net, &data)?.flatten();
    let flags = fd.kinked.concat();
    let (a, b): (Vec<f64>, Vec<f64>) =
        fd.diagonals.flatten().into_iter().zip(exact).zip(&flags).filter(|(_, &k)| !k).map(|(p, _)| p).unzip();
    let floor = 1e-6 * b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = if a.is_empty() { f64::INFINITY } else { max_rel_deviation(&a, &b, floor) };
    Ok(vec![Check::at_most(
        "finite-difference diagonal",
        dev,
        1e-4,
        format!("{} of {} coordinates kinked", fd.kinked_count(), flags.len()),
    )])
}

/// Gradients scale by `1/α_d` and layer traces by `1/α_d²` under 50 random
/// rescalings.
pub fn check_scaling_laws(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 4);
    let (net, data) = fixture(&[6, 8, 7, 4], 10, &mut rng)?;
    let base = trace_exact(&net, &data)?;
    let (mut grad_dev, mut trace_dev) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let alpha = Alpha::random_log_uniform(net.depth(), ALPHA_HALF_WIDTH, &mut rng);
        for i in 0..3 {
            grad_dev = grad_dev.max(grad_scaling_check(&net, &alpha, data.sample(i).0)?.max_rel_deviation);
        }
        let scaled = trace_exact(&alpha_transform(&net, &alpha)?, &data)?;
        for (d, a) in alpha.as_slice().iter().enumerate() {
            trace_dev = trace_dev.max(rel(scaled.per_layer[d], base.per_layer[d] / (a * a)));
        }
    }
    Ok(vec![
        Check::at_most("scaling: gradients", grad_dev, 1e-12, "50 random scalings"),
        Check::at_most("scaling: layer traces", trace_dev, 1e-10, "50 random scalings"),
    ])
}

/// MS and the network function are unchanged by 100 random rescalings.
pub fn check_invariance(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 5);
    let (net, data) = fixture(&[6, 8, 7, 4], 20, &mut rng)?;
    let base = minimum_sharpness_of(&net, &data)?.ms;
    let logits: Vec<Vec<f64>> = (0..data.len()).map(|i| net.logits(data.sample(i).0)).collect::<Result<_>>()?;
    let (mut ms_dev, mut out_dev) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let alpha = Alpha::random_log_uniform(net.depth(), ALPHA_HALF_WIDTH, &mut rng);
        let scaled = alpha_transform(&net, &alpha)?;
        ms_dev = ms_dev.max(rel(minimum_sharpness_of(&scaled, &data)?.ms, base));
        for (i, reference) in logits.iter().enumerate() {
            let got = scaled.logits(data.sample(i).0)?;
            let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in got.iter().zip(reference) {
                out_dev = out_dev.max((a - b).abs() / scale.max(f64::MIN_POSITIVE));
            }
        }
    }
    Ok(vec![
        Check::at_most("invariance: minimum sharpness", ms_dev, 1e-8, "100 scalings in [e^-3, e^3]"),
        Check::at_most("invariance: outputs", out_dev, 1e-10, "max logit error over max |logit|"),
    ])
}

/// The closed form against numeric minimization, 1000 random feasible
/// scalings, and the network rescaled by its own minimizer.
pub fn check_optimality(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 6);
    let (net, data) = fixture(&[6, 8, 7, 5, 4], 20, &mut rng)?;
    let traces = trace_exact(&net, &data)?;
    let report = minimum_sharpness(&traces)?;
    let numeric = minimize_scaled_trace(&traces, 2000)?;
    let mut beaten = 0.0f64;
    for _ in 0..1000 {
        let alpha = Alpha::random_log_uniform(net.depth(), ALPHA_HALF_WIDTH, &mut rng);
        beaten = beaten.max((report.ms - scaled_trace(&traces, &alpha)) / report.ms);
    }
    let alpha = report.alpha_star.clone().ok_or_else(|| minsharp::Error::InvalidArgument("degenerate fixture".into()))?;
    let product_dev = (alpha.as_slice().iter().product::<f64>() - 1.0).abs();
    let achieved = trace_exact(&alpha_transform(&net, &alpha)?, &data)?.total();
    Ok(vec![
        Check::at_most("optimality: numeric minimum", rel(numeric, report.ms), 1e-6, "projected gradient in log space"),
        Check::at_most("optimality: Monte Carlo", beaten.max(0.0), 1e-12, "1000 feasible scalings, relative shortfall"),
        Check::at_most("optimality: minimizer", product_dev.max(rel(achieved, report.ms)), 1e-12, "unit product, attains MS"),
    ])
}

/// `MS ≤ Σ_d Tr[H_d]`, with equality once the layer traces are equalized by
/// rescaling with the minimizer.
pub fn check_am_gm(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 7);
    let (mut violation, mut equality) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let depth = 2 + rng.below(3);
        let dims: Vec<usize> = (0..=depth).map(|_| 2 + rng.below(7)).collect();
        let (net, data) = fixture(&dims, 10, &mut rng)?;
        let report = minimum_sharpness_of(&net, &data)?;
        let total = report.layer_traces.total();
        violation = violation.max((report.ms - total) / total.max(f64::MIN_POSITIVE));
        if let Some(alpha) = report.alpha_star {
            let balanced = minimum_sharpness_of(&alpha_transform(&net, &alpha)?, &data)?;
            equality = equality.max(rel(balanced.ms, balanced.layer_traces.total()));
        }
    }
    Ok(vec![
        Check::at_most("AM-GM: bound", violation.max(0.0), 1e-12, "10 random nets"),
        Check::at_most("AM-GM: equality", equality, 1e-10, "after balancing the layer traces"),
    ])
}

/// Exhaustive search over the two free log-coordinates of a 2x2 layer on a
/// uniform grid of the given step inside `[-half, half]²`.
pub fn ns_grid_oracle_2x2(diag: &Matrix, weight: &Matrix, step: f64, half: f64) -> f64 {
    let weight_sq = weight.square();
    let steps = (2.0 * half / step).round() as i64;
    let mut best = f64::INFINITY;
    for ia in 0..=steps {
        let a = -half + ia as f64 * step;
        for ib in 0..=steps {
            let b = -half + ib as f64 * step;
            best = best.min(ns_objective(diag, &weight_sq, &[a, -a], &[b, -b]));
        }
    }
    best
}

/// Normalized sharpness against the grid oracle on 2x2 layers, and the
/// unit-product constraints on a [20, 20, 10] network.
pub fn check_normalized_sharpness(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::derive(seed, 8);
    let cfg = NsConfig::default();
    let mut layers = Vec::new();
    for _ in 0..2 {
        let diag = Matrix::new(2, 2, (0..4).map(|_| rng.uniform_range(0.05, 2.0)).collect())?;
        let weight = Matrix::new(2, 2, (0..4).map(|_| rng.uniform_range(-1.5, 1.5)).collect())?;
        layers.push((diag, weight));
    }
    let (net, data) = fixture(&[2, 2, 2], 10, &mut rng)?;
    let diags = diag_exact(&net, &data)?;
    for (d, w) in diags.per_layer.iter().zip(net.weights()) {
        if d.as_slice().iter().all(|v| *v > 0.0) {
            layers.push((d.clone(), w.clone()));
        }
    }
    let mut grid_dev = 0.0f64;
    for (i, (diag, weight)) in layers.iter().enumerate() {
        let got = layer_normalized_sharpness(i, diag, weight, &cfg)?.value;
        grid_dev = grid_dev.max(rel(got, ns_grid_oracle_2x2(diag, weight, 1e-3, 3.0)));
    }

    let (net, data) = fixture(&[20, 20, 10], 20, &mut rng)?;
    let report = normalized_sharpness(&net, &diag_exact(&net, &data)?, &cfg)?;
    let constraint = report
        .sigma1
        .iter()
        .chain(&report.sigma2)
        .map(|s| (s.iter().product::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        Check::at_most("NS: 2x2 grid oracle", grid_dev, 1e-4, format!("{} layers, grid step 1e-3", layers.len())),
        Check::at_most("NS: unit products", constraint, 1e-10, "[20, 20, 10] net"),
    ])
}

/// Everything `verify` runs for one seed.
pub fn oracle_suite(seed: u64, norm: NormConvention) -> Result<Vec<Check>> {
    let mut checks = check_single_layer(seed)?;
    checks.extend(check_kron_oracle(seed, norm)?);
    checks.extend(check_finite_differences(seed)?);
    checks.extend(check_scaling_laws(seed)?);
    checks.extend(check_invariance(seed)?);
    checks.extend(check_optimality(seed)?);
    checks.extend(check_am_gm(seed)?);
    checks.extend(check_normalized_sharpness(seed)?);
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticStudy {
    /// Relative L2 error to the exact diagonal, one entry per seed.
    pub errors_few: Vec<f64>,
    pub errors_many: Vec<f64>,
    pub median_few: f64,
    pub median_many: f64,
}

/// Relative error of the Monte-Carlo diagonal estimate with `few` and
/// `many` draws on a [20, 20, 10] network, over `seeds` independent seeds.
pub fn stochastic_study(seed: u64, seeds: usize, few: usize, many: usize) -> Result<StochasticStudy> {
    let mut rng = Rng::derive(seed, 9);
    let (net, data) = fixture(&[20, 20, 10], 20, &mut rng)?;
    let (mut errors_few, mut errors_many) = (Vec::new(), Vec::new());
    for s in 0..seeds as u64 {
        let mut draw_rng = Rng::derive(seed.wrapping_add(s), 10);
        errors_few.push(stochastic_diag(&net, &data, 1e-4, few, &mut draw_rng)?.rel_error);
        errors_many.push(stochastic_diag(&net, &data, 1e-4, many, &mut draw_rng)?.rel_error);
    }
    Ok(StochasticStudy {
        median_few: median(&errors_few).unwrap_or(f64::NAN),
        median_many: median(&errors_many).unwrap_or(f64::NAN),
        errors_few,
        errors_many,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_compare_against_bounds() {
        assert!(Check::at_most("x", 1e-13, 1e-12, "").passed);
        assert!(!Check::at_most("x", f64::NAN, 1e-12, "").passed);
        assert!(!Check::above("x", 0.1, 0.1, "").passed);
        assert!(Check::at_most("x", 0.0, 0.0, "").to_string().starts_with("PASS"));
    }

    #[test]
    fn grid_oracle_finds_symmetric_minimum() {
        let diag = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        let weight = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert!((ns_grid_oracle_2x2(&diag, &weight, 1e-2, 1.0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn single_seed_suite_passes() {
        for check in oracle_suite(0, NormConvention::Squared).unwrap() {
            assert!(check.passed, "{check}");
        }
    }
}
