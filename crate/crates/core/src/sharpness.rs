//! Scale transformations and the minimum sharpness of a network.
//!
//! Rescaling `W_d -> α_d W_d` with `α_d > 0` and `∏ α_d = 1` leaves a ReLU
//! network's function unchanged but multiplies each weight gradient by
//! `1/α_d`, so the Hessian trace becomes `Σ_d Tr[H_d] / α_d²`. Writing
//! `α'_d = α_d^{-2}` (still positive with product one), the minimum over all
//! scalings is `D (∏_d Tr[H_d])^{1/D}`, reached at
//! `α'_d = (∏_k Tr[H_k])^{1/D} / Tr[H_d]`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian::{trace_exact, LayerTraces};
use crate::linalg::Rng;
use crate::network::Mlp;

/// Tolerance on `∏ α_d = 1`.
pub const ALPHA_PRODUCT_TOLERANCE: f64 = 1e-12;

/// Per-layer weight scales with unit product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alpha {
    per_layer: Vec<f64>,
}

impl Alpha {
    pub fn new(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.is_empty() {
            return Err(Error::InvalidAlpha("empty".into()));
        }
        if let Some(v) = per_layer.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidAlpha(format!("entry {v} is not a positive finite number")));
        }
        let log_product: f64 = per_layer.iter().map(|v| v.ln()).sum();
        if (log_product.exp() - 1.0).abs() > ALPHA_PRODUCT_TOLERANCE {
            return Err(Error::InvalidAlpha(format!("product is {} instead of 1", log_product.exp())));
        }
        Ok(Self { per_layer })
    }

    pub fn identity(depth: usize) -> Self {
        Self { per_layer: vec![1.0; depth] }
    }

    /// Divides positive values by their geometric mean.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidAlpha(format!("cannot normalize {values:?}")));
        }
        let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
        Self::new(values.iter().map(|v| (v.ln() - mean_log).exp()).collect())
    }

    /// Components drawn log-uniformly from `[e^-half_width, e^half_width]`,
    /// then normalized to unit product.
    pub fn random_log_uniform(depth: usize, half_width: f64, rng: &mut Rng) -> Self {
        let raw: Vec<f64> = (0..depth).map(|_| rng.uniform_range(-half_width, half_width).exp()).collect();
        Self::normalized(&raw).expect("exponentials are positive")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.per_layer
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

/// `W_d -> α_d W_d` for every layer.
pub fn alpha_transform(net: &Mlp, alpha: &Alpha) -> Result<Mlp> {
    if alpha.len() != net.depth() {
        return Err(Error::InvalidAlpha(format!("{} scales for {} layers", alpha.len(), net.depth())));
    }
    net.map_weights(|d, w| w.scale(alpha.per_layer[d]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradScalingReport {
    /// Largest relative deviation, per layer, between the transformed net's
    /// gradients and `1/α_d` times the original ones, over `ln Z` and every
    /// logit.
    pub per_layer: Vec<f64>,
    pub max_rel_deviation: f64,
}

/// Compares gradients of `alpha_transform(net, alpha)` against `1/α_d`
/// times those of `net` at input `x`.
pub fn grad_scaling_check(net: &Mlp, alpha: &Alpha, x: &[f64]) -> Result<GradScalingReport> {
    let scaled = alpha_transform(net, alpha)?;
    let t = net.forward(x)?;
    let ts = scaled.forward(x)?;
    let mut pairs = vec![(net.grad_log_z(&t)?, scaled.grad_log_z(&ts)?)];
    for l in 0..net.num_classes() {
        pairs.push((net.grad_logit(&t, l)?, scaled.grad_logit(&ts, l)?));
    }
    let mut per_layer = vec![0.0f64; net.depth()];
    for (orig, transformed) in &pairs {
        for (d, (g, gs)) in orig.per_layer.iter().zip(&transformed.per_layer).enumerate() {
            let inv = 1.0 / alpha.per_layer[d];
            let scale = g.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())) * inv;
            for (&a, &b) in g.as_slice().iter().zip(gs.as_slice()) {
                let expected = a * inv;
                let denom = expected.abs().max(b.abs()).max(scale * 1e-3);
                if denom > 0.0 {
                    per_layer[d] = per_layer[d].max((b - expected).abs() / denom);
                }
            }
        }
    }
    let max_rel_deviation = per_layer.iter().copied().fold(0.0, f64::max);
    Ok(GradScalingReport { per_layer, max_rel_deviation })
}

/// Minimum sharpness with its minimizer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharpnessReport {
    pub ms: f64,
    /// Minimizing weight scales `α*` (apply with [`alpha_transform`]).
    pub alpha_star: Option<Alpha>,
    /// The same minimizer as objective weights `α'* = α*^{-2}`.
    pub alpha_prime_star: Option<Vec<f64>>,
    pub layer_traces: LayerTraces,
    /// Some layer trace is zero: the infimum 0 is not attained by any scaling.
    pub degenerate: bool,
}

/// `Σ_d Tr[H_d] / α_d²`, the trace of the transformed network's Hessian.
pub fn scaled_trace(traces: &LayerTraces, alpha: &Alpha) -> f64 {
    traces.per_layer.iter().zip(&alpha.per_layer).map(|(h, a)| h / (a * a)).sum()
}

/// Closed-form minimum of [`scaled_trace`] over all scalings.
pub fn minimum_sharpness(traces: &LayerTraces) -> Result<SharpnessReport> {
    let depth = traces.depth();
    if depth == 0 {
        return Err(Error::InvalidArgument("no layer traces".into()));
    }
    let scale = traces.per_layer.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut clamped = Vec::with_capacity(depth);
    for (layer, &h) in traces.per_layer.iter().enumerate() {
        if !h.is_finite() {
            return Err(Error::NonFinite { layer, what: format!("trace {h}") });
        }
        if h < -crate::hessian::CLAMP_TOLERANCE * scale {
            return Err(Error::NegativeCurvature { layer, value: h, scale });
        }
        clamped.push(h.max(0.0));
    }
    let layer_traces = LayerTraces { per_layer: clamped, n: traces.n };
    if layer_traces.per_layer.iter().any(|&h| h <= f64::MIN_POSITIVE) {
        return Ok(SharpnessReport { ms: 0.0, alpha_star: None, alpha_prime_star: None, layer_traces, degenerate: true });
    }
    let logs: Vec<f64> = layer_traces.per_layer.iter().map(|h| h.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / depth as f64;
    let ms = depth as f64 * mean_log.exp();
    // α'_d = exp(mean_log - ln H_d); α_d = α'_d^{-1/2}.
    let alpha_prime: Vec<f64> = logs.iter().map(|l| (mean_log - l).exp()).collect();
    let alpha = Alpha::normalized(&logs.iter().map(|l| (0.5 * (l - mean_log)).exp()).collect::<Vec<_>>())?;
    Ok(SharpnessReport {
        ms,
        alpha_star: Some(alpha),
        alpha_prime_star: Some(alpha_prime),
        layer_traces,
        degenerate: false,
    })
}

/// Exact layer traces followed by the closed form.
pub fn minimum_sharpness_of(net: &Mlp, data: &Dataset) -> Result<SharpnessReport> {
    minimum_sharpness(&trace_exact(net, data)?)
}

/// Minimizes `Σ_d exp(u_d) H_d` subject to `Σ_d u_d = 0` by projected
/// gradient descent with backtracking, for at most `budget` iterations.
/// Returns the best objective value found.
pub fn minimize_scaled_trace(traces: &LayerTraces, budget: usize) -> Result<f64> {
    let depth = traces.depth();
    if depth < 2 {
        return Err(Error::InvalidArgument("numeric minimization needs at least two layers".into()));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let h = &traces.per_layer;
    let objective = |u: &[f64]| u.iter().zip(h).map(|(u, h)| u.exp() * h).sum::<f64>();
    let mut u = vec![0.0; depth];
    let mut best = objective(&u);
    let mut step = 1.0;
    for _ in 0..budget {
        let grad: Vec<f64> = u.iter().zip(h).map(|(u, h)| u.exp() * h).collect();
        let mean = grad.iter().sum::<f64>() / depth as f64;
        // Normalizing by the objective makes the step independent of the
        // overall trace magnitude.
        let dir: Vec<f64> = grad.iter().map(|g| (g - mean) / best).collect();
        if dir.iter().all(|v| v.abs() < 1e-15) {
            break;
        }
        loop {
            let mut cand: Vec<f64> = u.iter().zip(&dir).map(|(u, g)| u - step * g).collect();
            let shift = cand.iter().sum::<f64>() / depth as f64;
            cand.iter_mut().for_each(|v| *v -= shift);
            let value = objective(&cand);
            if value <= best {
                u = cand;
                best = value;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Ok(best);
            }
        }
    }
    Ok(best)
}

/// [`minimize_scaled_trace`] on the exact traces of `net` over `data`.
pub fn minimum_sharpness_numeric(net: &Mlp, data: &Dataset, budget: usize) -> Result<f64> {
    minimize_scaled_trace(&trace_exact(net, data)?, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::linalg::Matrix;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn traces(values: &[f64]) -> LayerTraces {
        LayerTraces { per_layer: values.to_vec(), n: 1 }
    }

    fn fixture(dims: &[usize], n: usize, seed: u64) -> (Mlp, Dataset) {
        let mut rng = Rng::seed_from_u64(seed);
        let net = Mlp::init(dims, &mut rng).unwrap();
        let k = *dims.last().unwrap();
        let data = synthetic_blobs(n.max(k), dims[0], k, 1.0, &mut rng).unwrap().range(0..n).unwrap();
        (net, data)
    }

    #[test]
    fn alpha_validation() {
        assert!(Alpha::new(vec![2.0, 0.5]).is_ok());
        assert!(Alpha::new(vec![2.0, 1.0]).is_err());
        assert!(Alpha::new(vec![-1.0, -1.0]).is_err());
        assert!(Alpha::new(vec![]).is_err());
        let a = Alpha::normalized(&[3.0, 5.0, 7.0]).unwrap();
        assert!((a.as_slice().iter().product::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn identity_transform_keeps_weights() {
        let (net, _) = fixture(&[3, 4, 2], 2, 0);
        assert_eq!(alpha_transform(&net, &Alpha::identity(2)).unwrap(), net);
        assert!(alpha_transform(&net, &Alpha::identity(3)).is_err());
    }

    #[test]
    fn transform_preserves_function() {
        let (net, _) = fixture(&[5, 6, 4], 2, 1);
        let scaled = alpha_transform(&net, &Alpha::new(vec![2.0, 0.5]).unwrap()).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            for (a, b) in net.logits(&x).unwrap().iter().zip(scaled.logits(&x).unwrap()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-300));
            }
        }
    }

    #[test]
    fn gradient_scaling_examples() {
        let (net, data) = fixture(&[3, 5, 3], 1, 3);
        let x = data.sample(0).0;
        assert_eq!(grad_scaling_check(&net, &Alpha::identity(2), x).unwrap().max_rel_deviation, 0.0);

        let alpha = Alpha::new(vec![2.0, 0.5]).unwrap();
        let scaled = alpha_transform(&net, &alpha).unwrap();
        let g = net.grad_log_z(&net.forward(x).unwrap()).unwrap();
        let gs = scaled.grad_log_z(&scaled.forward(x).unwrap()).unwrap();
        let expect0 = g.per_layer[0].scale(0.5);
        let expect1 = g.per_layer[1].scale(2.0);
        assert!(gs.per_layer[0].sub(&expect0).unwrap().frobenius_sq() <= 1e-28 * expect0.frobenius_sq());
        assert!(gs.per_layer[1].sub(&expect1).unwrap().frobenius_sq() <= 1e-28 * expect1.frobenius_sq());

        let (net, data) = fixture(&[4, 6, 5, 3], 1, 4);
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..20 {
            let alpha = Alpha::random_log_uniform(3, 3.0, &mut rng);
            assert!(grad_scaling_check(&net, &alpha, data.sample(0).0).unwrap().max_rel_deviation <= 1e-12);
        }
    }

    #[test]
    fn traces_scale_inversely_with_alpha_squared() {
        let (net, data) = fixture(&[4, 6, 5, 3], 8, 6);
        let base = trace_exact(&net, &data).unwrap();
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..10 {
            let alpha = Alpha::random_log_uniform(3, 3.0, &mut rng);
            let t = trace_exact(&alpha_transform(&net, &alpha).unwrap(), &data).unwrap();
            for d in 0..3 {
                let a = alpha.as_slice()[d];
                assert!(rel(t.per_layer[d], base.per_layer[d] / (a * a)) <= 1e-10);
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        let r = minimum_sharpness(&traces(&[3.0, 3.0])).unwrap();
        assert!(rel(r.ms, 6.0) <= 1e-15);
        assert_eq!(r.alpha_star.unwrap().as_slice(), &[1.0, 1.0]);

        let r = minimum_sharpness(&traces(&[1.0, 4.0])).unwrap();
        assert!(rel(r.ms, 4.0) <= 1e-15);
        let ap = r.alpha_prime_star.unwrap();
        assert!(rel(ap[0], 2.0) <= 1e-15 && rel(ap[1], 0.5) <= 1e-15);
        let a = r.alpha_star.unwrap();
        assert!(rel(a.as_slice()[0], 0.5f64.sqrt()) <= 1e-15);
        assert!(rel(a.as_slice()[1], 2f64.sqrt()) <= 1e-15);
        assert!(rel(scaled_trace(&r.layer_traces, &a), 4.0) <= 1e-15);

        let r = minimum_sharpness(&traces(&[1.0, 2.0, 0.0])).unwrap();
        assert!(r.degenerate && r.ms == 0.0 && r.alpha_star.is_none() && r.alpha_prime_star.is_none());

        assert!(minimum_sharpness(&traces(&[1.0, -1.0])).is_err());
        // Rounding-level negatives clamp to zero.
        assert!(minimum_sharpness(&traces(&[1.0, -1e-12])).unwrap().degenerate);
    }

    #[test]
    fn single_layer_has_no_freedom() {
        let (net, data) = fixture(&[4, 3], 5, 8);
        let r = minimum_sharpness_of(&net, &data).unwrap();
        assert_eq!(r.ms, r.layer_traces.per_layer[0]);
        assert_eq!(r.alpha_star.unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn numeric_minimum_matches_closed_form() {
        assert!(rel(minimize_scaled_trace(&traces(&[1.0, 4.0]), 200).unwrap(), 4.0) <= 1e-6);
        let t = traces(&[1e-3, 20.0, 0.7, 3.0]);
        let closed = minimum_sharpness(&t).unwrap().ms;
        assert!(rel(minimize_scaled_trace(&t, 500).unwrap(), closed) <= 1e-6);
        assert!(minimize_scaled_trace(&traces(&[1.0]), 10).is_err());
        assert!(minimize_scaled_trace(&t, 0).is_err());
    }

    #[test]
    fn invariance_and_duplication() {
        let (net, data) = fixture(&[4, 7, 5, 3], 10, 9);
        let base = minimum_sharpness_of(&net, &data).unwrap();
        let mut rng = Rng::seed_from_u64(10);
        for _ in 0..20 {
            let alpha = Alpha::random_log_uniform(3, 3.0, &mut rng);
            let r = minimum_sharpness_of(&alpha_transform(&net, &alpha).unwrap(), &data).unwrap();
            assert!(rel(r.ms, base.ms) <= 1e-8);
        }
        let twice = minimum_sharpness_of(&net, &data.concat(&data).unwrap()).unwrap();
        assert!(rel(twice.ms, base.ms) <= 1e-13);
    }

    #[test]
    fn dead_network_is_degenerate() {
        let net = Mlp::new(vec![2, 3, 2], vec![Matrix::zeros(3, 2), Matrix::new(2, 3, vec![1.0; 6]).unwrap()]).unwrap();
        let data = Dataset::new(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0, 1], 2).unwrap();
        let r = minimum_sharpness_of(&net, &data).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.ms, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::linalg::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn am_gm_and_optimality(values in proptest::collection::vec(1e-4f64..1e4, 2..6), seed in any::<u64>()) {
                let t = traces(&values);
                let r = minimum_sharpness(&t).unwrap();
                prop_assert!(r.ms <= t.total() * (1.0 + 1e-12));
                let a = r.alpha_star.clone().unwrap();
                prop_assert!((a.as_slice().iter().product::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(rel(scaled_trace(&t, &a), r.ms) <= 1e-12);
                let weighted: f64 = r.alpha_prime_star.unwrap().iter().zip(&values).map(|(a, h)| a * h).sum();
                prop_assert!(rel(weighted, r.ms) <= 1e-12);
                let mut rng = Rng::seed_from_u64(seed);
                for _ in 0..50 {
                    let alpha = Alpha::random_log_uniform(values.len(), 3.0, &mut rng);
                    prop_assert!(scaled_trace(&t, &alpha) >= r.ms * (1.0 - 1e-12));
                }
            }

            #[test]
            fn equal_traces_attain_the_bound(h in 1e-3f64..1e3, depth in 1usize..6) {
                let t = traces(&vec![h; depth]);
                prop_assert!(rel(minimum_sharpness(&t).unwrap().ms, t.total()) <= 1e-12);
            }
        }
    }
}
