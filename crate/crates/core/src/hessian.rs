//! Exact per-layer Hessian traces and diagonals of the softmax cross-entropy
//! loss, plus two reference oracles.
//!
//! For a ReLU network the diagonal block of the loss Hessian belonging to
//! `W_d` is, per sample, `(M_d^T P M_d) ⊗ (x_d x_d^T)` where `M_d` is the
//! Jacobian of the logits with respect to layer `d`'s output and
//! `P = diag(p) - p p^T`. Its trace therefore reduces to
//!
//! ```text
//! Σ_l p_l ‖∂o_l/∂W_d‖_F² - ‖∂ln Z/∂W_d‖_F²
//! ```
//!
//! which costs one forward pass and `K + 1` backward passes per sample. Note
//! the norms are squared; with plain norms the identity does not hold.
//!
//! The oracles recompute the same blocks the slow way: [`oracle_kron`] builds
//! `M_d` as an explicit product of weight and mask matrices and materializes
//! the Kronecker block, and [`oracle_fd_diag`] differentiates the loss
//! gradient numerically.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{chunked_reduce, kron, outer_slices, Matrix, REDUCTION_CHUNK};
use crate::network::{rank_one_frobenius_sq, ForwardTrace, Mlp};

/// Relative tolerance below which a negative PSD quantity counts as rounding.
pub const CLAMP_TOLERANCE: f64 = 1e-10;

/// Largest layer (in weights) the Kronecker oracle accepts.
pub const ORACLE_MAX_LAYER_PARAMS: usize = 1_000_000;

/// Layers up to this many weights get a fully materialized Kronecker block in
/// the oracle; larger ones materialize only its diagonal sub-blocks.
pub const ORACLE_FULL_KRON_PARAMS: usize = 2048;

/// Per-layer traces `Tr[H_d]` averaged over `n` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTraces {
    pub per_layer: Vec<f64>,
    pub n: usize,
}

impl LayerTraces {
    pub fn total(&self) -> f64 {
        self.per_layer.iter().sum()
    }

    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }
}

/// Per-layer Hessian diagonals laid out like the weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagonals {
    pub per_layer: Vec<Matrix>,
}

impl LayerDiagonals {
    pub fn total(&self) -> f64 {
        self.per_layer.iter().map(Matrix::sum).sum()
    }

    pub fn layer_sums(&self) -> Vec<f64> {
        self.per_layer.iter().map(Matrix::sum).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.per_layer.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

/// How the gradient norms in the per-sample score are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormConvention {
    /// Squared Frobenius norms; equals the Hessian trace.
    #[default]
    Squared,
    /// Plain Frobenius norms. Wrong on purpose; exists so verification can
    /// prove it notices.
    Unsquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    pub norm: NormConvention,
    /// Samples per deterministic reduction chunk.
    pub chunk: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { norm: NormConvention::Squared, chunk: REDUCTION_CHUNK }
    }
}

fn clamp_psd(layer: usize, value: f64, scale: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -CLAMP_TOLERANCE * scale {
        Ok(0.0)
    } else {
        Err(Error::NegativeCurvature { layer, value, scale })
    }
}

/// Backward passes for one sample: `deltas[l][d]` for each logit `l`, and the
/// `ln Z` pass.
struct SampleBackprops {
    trace: ForwardTrace,
    logit_deltas: Vec<Vec<Vec<f64>>>,
    log_z_deltas: Vec<Vec<f64>>,
}

fn sample_backprops(net: &Mlp, x: &[f64]) -> Result<SampleBackprops> {
    let trace = net.forward(x)?;
    let k = net.num_classes();
    let mut seed = vec![0.0; k];
    let mut logit_deltas = Vec::with_capacity(k);
    for l in 0..k {
        seed[l] = 1.0;
        logit_deltas.push(net.backprop(&trace, &seed)?);
        seed[l] = 0.0;
    }
    let log_z_deltas = net.backprop(&trace, &trace.probs)?;
    Ok(SampleBackprops { trace, logit_deltas, log_z_deltas })
}

fn check_label(net: &Mlp, y: usize) -> Result<()> {
    if y >= net.num_classes() {
        return Err(Error::LabelOutOfRange { label: y, num_classes: net.num_classes() });
    }
    Ok(())
}

/// Per-layer contribution of one sample to `Tr[H]`. The label does not
/// enter: the cross-entropy Hessian is label independent.
pub fn score(net: &Mlp, x: &[f64], y: usize) -> Result<Vec<f64>> {
    score_with(net, x, y, NormConvention::Squared)
}

pub fn score_with(net: &Mlp, x: &[f64], y: usize, norm: NormConvention) -> Result<Vec<f64>> {
    check_label(net, y)?;
    let bp = sample_backprops(net, x)?;
    (0..net.depth())
        .map(|d| {
            let x_d = &bp.trace.layer_inputs[d];
            let frob = |delta: &[f64]| match norm {
                NormConvention::Squared => rank_one_frobenius_sq(delta, x_d),
                NormConvention::Unsquared => rank_one_frobenius_sq(delta, x_d).sqrt(),
            };
            let positive: f64 = bp.trace.probs.iter().zip(&bp.logit_deltas).map(|(p, deltas)| p * frob(&deltas[d])).sum();
            let negative = frob(&bp.log_z_deltas[d]);
            clamp_psd(d, positive - negative, positive)
        })
        .collect()
}

/// `Tr[H_d]` for every layer, averaged over the dataset.
pub fn trace_exact(net: &Mlp, data: &Dataset) -> Result<LayerTraces> {
    trace_exact_with(net, data, &TraceOptions::default())
}

pub fn trace_exact_with(net: &Mlp, data: &Dataset, opts: &TraceOptions) -> Result<LayerTraces> {
    net.check_data(data)?;
    let depth = net.depth();
    let sums = chunked_reduce(
        data.len(),
        opts.chunk,
        |range| {
            let mut acc = vec![0.0; depth];
            for i in range {
                let (x, y) = data.sample(i);
                for (a, s) in acc.iter_mut().zip(score_with(net, x, y, opts.norm)?) {
                    *a += s;
                }
            }
            Ok(acc)
        },
        |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            Ok(a)
        },
    )?
    .ok_or(Error::EmptyDataset)?;
    let n = data.len();
    Ok(LayerTraces { per_layer: sums.into_iter().map(|s| s / n as f64).collect(), n })
}

/// Exact `DIAG[H_d]` for every layer, averaged over the dataset.
///
/// Per sample the diagonal of `(M^T P M) ⊗ (x x^T)` is
/// `Σ_l p_l (∂o_l/∂W_d)^∘2 - (∂ln Z/∂W_d)^∘2`; since each gradient is
/// `delta x^T`, that is the rank-1 matrix `c x^∘2^T` with
/// `c = Σ_l p_l delta_l^∘2 - delta_lnZ^∘2`.
pub fn diag_exact(net: &Mlp, data: &Dataset) -> Result<LayerDiagonals> {
    diag_exact_chunked(net, data, REDUCTION_CHUNK)
}

pub fn diag_exact_chunked(net: &Mlp, data: &Dataset, chunk: usize) -> Result<LayerDiagonals> {
    net.check_data(data)?;
    let dims = net.dims().to_vec();
    let depth = net.depth();
    let sums = chunked_reduce(
        data.len(),
        chunk,
        |range| {
            let rows = range.len();
            let mut coeffs: Vec<Matrix> = (0..depth).map(|d| Matrix::zeros(rows, dims[d + 1])).collect();
            let mut inputs_sq: Vec<Matrix> = (0..depth).map(|d| Matrix::zeros(rows, dims[d])).collect();
            for (r, i) in range.enumerate() {
                let bp = sample_backprops(net, data.sample(i).0)?;
                for d in 0..depth {
                    let c = coeffs[d].row_mut(r);
                    for (deltas, &p) in bp.logit_deltas.iter().zip(&bp.trace.probs) {
                        for (ci, g) in c.iter_mut().zip(&deltas[d]) {
                            *ci += p * g * g;
                        }
                    }
                    for (ci, g) in c.iter_mut().zip(&bp.log_z_deltas[d]) {
                        *ci = clamp_psd(d, *ci - g * g, *ci)?;
                    }
                    for (s, v) in inputs_sq[d].row_mut(r).iter_mut().zip(&bp.trace.layer_inputs[d]) {
                        *s = v * v;
                    }
                }
            }
            coeffs.iter().zip(&inputs_sq).map(|(c, x2)| c.t_matmul(x2)).collect::<Result<Vec<_>>>()
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.add_scaled_assign(y, 1.0)?;
            }
            Ok(a)
        },
    )?
    .ok_or(Error::EmptyDataset)?;
    let inv_n = 1.0 / data.len() as f64;
    Ok(LayerDiagonals { per_layer: sums.into_iter().map(|m| m.scale(inv_n)).collect() })
}

/// One sample's Hessian block for one layer, kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerBlock {
    /// `M_d^T P M_d`, indexed by layer-`d` output units.
    pub left: Matrix,
    /// `x_d x_d^T`, indexed by layer-`d` input units.
    pub right: Matrix,
}

impl KroneckerBlock {
    /// The full `(m_out m_in) x (m_out m_in)` block.
    pub fn materialize(&self) -> Matrix {
        kron(&self.left, &self.right)
    }
}

/// Explicit per-layer Kronecker blocks for one input.
///
/// `M_d` is assembled as the matrix product
/// `W_{D-1} diag(mask_{D-1}) W_{D-2} ... W_{d+1} diag(mask_{d+1})`, without
/// going through [`Mlp::backprop`].
pub fn kronecker_blocks(net: &Mlp, x: &[f64]) -> Result<Vec<KroneckerBlock>> {
    let trace = net.forward(x)?;
    let depth = net.depth();
    let p = &trace.probs;
    let curvature = Matrix::from_diagonal(p).sub(&outer_slices(p, p))?;
    let mut blocks = Vec::with_capacity(depth);
    let mut jacobian = Matrix::identity(net.num_classes());
    for d in (0..depth).rev() {
        if d + 1 < depth {
            let mask: Vec<f64> =
                trace.layer_inputs[d + 1].iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            jacobian = jacobian.matmul(&net.weights()[d + 1])?.matmul(&Matrix::from_diagonal(&mask))?;
        }
        let left = jacobian.t_matmul(&curvature.matmul(&jacobian)?)?;
        let x_d = &trace.layer_inputs[d];
        blocks.push(KroneckerBlock { left, right: outer_slices(x_d, x_d) });
    }
    blocks.reverse();
    Ok(blocks)
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub traces: LayerTraces,
    pub diagonals: Option<LayerDiagonals>,
}

/// Reference traces from explicit Kronecker blocks.
pub fn oracle_kron_trace(net: &Mlp, data: &Dataset) -> Result<LayerTraces> {
    oracle_kron(net, data, false).map(|r| r.traces)
}

/// Reads `Tr[H_d]` (and optionally `DIAG[H_d]`) off materialized Kronecker
/// blocks, one sample at a time, single-threaded.
///
/// Small layers get the full block from [`kron`]; larger layers materialize
/// each diagonal sub-block `left[i][i] * right` instead, which holds every
/// diagonal entry of the full block.
pub fn oracle_kron(net: &Mlp, data: &Dataset, with_diagonals: bool) -> Result<OracleResult> {
    net.check_data(data)?;
    if let Some((d, w)) = net.weights().iter().enumerate().find(|(_, w)| w.rows() * w.cols() > ORACLE_MAX_LAYER_PARAMS) {
        return Err(Error::OracleTooLarge(format!(
            "layer {d} has {} weights (limit {ORACLE_MAX_LAYER_PARAMS})",
            w.rows() * w.cols()
        )));
    }
    let depth = net.depth();
    let mut traces = vec![0.0; depth];
    let mut diagonals: Vec<Matrix> = net.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    for i in 0..data.len() {
        let blocks = kronecker_blocks(net, data.sample(i).0)?;
        for (d, block) in blocks.iter().enumerate() {
            let (m_out, m_in) = (block.left.rows(), block.right.rows());
            let diag = if m_out * m_in <= ORACLE_FULL_KRON_PARAMS {
                block.materialize().diagonal()
            } else {
                let mut diag = Vec::with_capacity(m_out * m_in);
                for u in 0..m_out {
                    diag.extend(block.right.scale(block.left.get(u, u)).diagonal());
                }
                diag
            };
            traces[d] += diag.iter().sum::<f64>();
            if with_diagonals {
                for (acc, v) in diagonals[d].as_mut_slice().iter_mut().zip(&diag) {
                    *acc += v;
                }
            }
        }
    }
    let n = data.len();
    let inv_n = 1.0 / n as f64;
    Ok(OracleResult {
        traces: LayerTraces { per_layer: traces.into_iter().map(|t| t * inv_n).collect(), n },
        diagonals: with_diagonals.then(|| LayerDiagonals { per_layer: diagonals.iter().map(|m| m.scale(inv_n)).collect() }),
    })
}

/// Finite-difference Hessian diagonal with kink flags.
#[derive(Debug, Clone)]
pub struct FdDiagonals {
    pub diagonals: LayerDiagonals,
    /// Per layer, row-major like the weights: whether any ReLU changed sign
    /// between the `+eps` and `-eps` evaluations for that coordinate.
    pub kinked: Vec<Vec<bool>>,
}

impl FdDiagonals {
    pub fn kinked_count(&self) -> usize {
        self.kinked.iter().flatten().filter(|&&k| k).count()
    }
}

/// Default step for [`oracle_fd_diag`].
pub const FD_EPS: f64 = 1e-4;

fn activation_pattern(net: &Mlp, data: &Dataset) -> Result<Vec<bool>> {
    let mut pattern = Vec::new();
    for i in 0..data.len() {
        let t = net.forward(data.sample(i).0)?;
        for x in &t.layer_inputs[1..] {
            pattern.extend(x.iter().map(|&v| v > 0.0));
        }
    }
    Ok(pattern)
}

/// `H_kk ≈ (g_k(θ + ε e_k) - g_k(θ - ε e_k)) / 2ε` for every weight, where
/// `g` is the loss gradient.
pub fn oracle_fd_diag(net: &Mlp, data: &Dataset, eps: f64) -> Result<FdDiagonals> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} must be > 0")));
    }
    net.check_data(data)?;
    let base = net.params();
    let mut values = Vec::with_capacity(base.len());
    let mut flags = Vec::with_capacity(base.len());
    let mut params = base.clone();
    for k in 0..base.len() {
        params[k] = base[k] + eps;
        let up = net.with_params(&params)?;
        params[k] = base[k] - eps;
        let down = net.with_params(&params)?;
        params[k] = base[k];
        let g_up = up.grad_loss(data)?.flatten()[k];
        let g_down = down.grad_loss(data)?.flatten()[k];
        values.push((g_up - g_down) / (2.0 * eps));
        flags.push(activation_pattern(&up, data)? != activation_pattern(&down, data)?);
    }
    let mut offset = 0;
    let mut per_layer = Vec::with_capacity(net.depth());
    let mut kinked = Vec::with_capacity(net.depth());
    for w in net.weights() {
        let len = w.rows() * w.cols();
        per_layer.push(Matrix::new(w.rows(), w.cols(), values[offset..offset + len].to_vec())?);
        kinked.push(flags[offset..offset + len].to_vec());
        offset += len;
    }
    Ok(FdDiagonals { diagonals: LayerDiagonals { per_layer }, kinked })
}

/// Largest `|a - b| / max(|a|, |b|)` over paired entries, ignoring pairs
/// where both magnitudes are below `floor`.
pub fn max_rel_deviation(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs().max(y.abs()) > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::linalg::Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn one_sample(x: Vec<f64>, k: usize) -> Dataset {
        let d = x.len();
        Dataset::new(Matrix::new(1, d, x).unwrap(), vec![0], k).unwrap()
    }

    fn fixture(dims: &[usize], n: usize, seed: u64) -> (Mlp, Dataset) {
        let mut rng = Rng::seed_from_u64(seed);
        let net = Mlp::init(dims, &mut rng).unwrap();
        let k = *dims.last().unwrap();
        let data = synthetic_blobs(n.max(k), dims[0], k, 1.0, &mut rng).unwrap().range(0..n).unwrap();
        (net, data)
    }

    #[test]
    fn single_layer_closed_forms() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        assert!(rel(score(&net, &[1.0, 0.0], 0).unwrap()[0], 0.5) <= 1e-15);
        let net = Mlp::zeros(&[2, 3]).unwrap();
        assert!(rel(score(&net, &[1.0, 1.0], 2).unwrap()[0], 4.0 / 3.0) <= 1e-15);
        assert!(score(&net, &[1.0, 1.0], 3).is_err());
    }

    #[test]
    fn single_layer_diagonal() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        let diag = diag_exact(&net, &one_sample(vec![1.0, 0.0], 2)).unwrap();
        assert_eq!(diag.per_layer[0].as_slice(), &[0.25, 0.0, 0.25, 0.0]);
        assert_eq!(diag.total(), 0.5);
    }

    #[test]
    fn single_sample_trace_is_its_score() {
        let (net, data) = fixture(&[3, 4, 2], 1, 1);
        let (x, y) = data.sample(0);
        assert_eq!(trace_exact(&net, &data).unwrap().per_layer, score(&net, x, y).unwrap());
    }

    #[test]
    fn duplicated_data_gives_same_traces() {
        let (net, data) = fixture(&[3, 5, 3], 9, 2);
        let twice = data.concat(&data).unwrap();
        let a = trace_exact(&net, &data).unwrap();
        let b = trace_exact(&net, &twice).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            assert!(rel(*x, *y) <= 1e-13);
        }
    }

    #[test]
    fn traces_are_linear_in_data() {
        let (net, data) = fixture(&[4, 6, 3], 30, 3);
        let a = data.range(0..11).unwrap();
        let b = data.range(11..30).unwrap();
        let whole = trace_exact(&net, &data).unwrap();
        let ta = trace_exact(&net, &a).unwrap();
        let tb = trace_exact(&net, &b).unwrap();
        for d in 0..2 {
            let mixed = (11.0 * ta.per_layer[d] + 19.0 * tb.per_layer[d]) / 30.0;
            assert!(rel(whole.per_layer[d], mixed) <= 1e-12);
        }
    }

    #[test]
    fn score_is_label_independent() {
        let (net, data) = fixture(&[3, 4, 4, 3], 1, 4);
        let x = data.sample(0).0;
        let s0 = score(&net, x, 0).unwrap();
        for y in 1..3 {
            assert_eq!(score(&net, x, y).unwrap(), s0);
        }
    }

    #[test]
    fn exact_matches_kron_oracle_on_tiny_net() {
        let (net, data) = fixture(&[3, 4, 2], 10, 5);
        let exact = trace_exact(&net, &data).unwrap();
        let oracle = oracle_kron(&net, &data, true).unwrap();
        for (a, b) in exact.per_layer.iter().zip(&oracle.traces.per_layer) {
            assert!(rel(*a, *b) <= 1e-10, "{a} vs {b}");
        }
        let diag = diag_exact(&net, &data).unwrap();
        let dev = max_rel_deviation(&diag.flatten(), &oracle.diagonals.unwrap().flatten(), 1e-14);
        assert!(dev <= 1e-10, "{dev}");
        assert!(rel(diag.total(), exact.total()) <= 1e-10);
    }

    #[test]
    fn large_layer_path_matches_full_kron_path() {
        // 40x60 = 2400 weights takes the sub-block path.
        let (net, data) = fixture(&[60, 40, 3], 3, 6);
        let oracle = oracle_kron(&net, &data, true).unwrap();
        let exact = diag_exact(&net, &data).unwrap();
        assert!(max_rel_deviation(&exact.flatten(), &oracle.diagonals.unwrap().flatten(), 1e-14) <= 1e-10);
    }

    #[test]
    fn kronecker_block_identities() {
        let (net, data) = fixture(&[3, 5, 4, 3], 1, 7);
        for block in kronecker_blocks(&net, data.sample(0).0).unwrap() {
            let l = &block.left;
            assert!(max_rel_deviation(l.as_slice(), l.transpose().as_slice(), 1e-15) <= 1e-12);
            assert!(l.trace().unwrap() >= 0.0);
            let full = block.materialize().trace().unwrap();
            let factored = block.left.trace().unwrap() * block.right.trace().unwrap();
            assert!(rel(full, factored) <= 1e-12);
        }
    }

    #[test]
    fn oracle_size_guard() {
        let net = Mlp::zeros(&[1001, 1000, 2]).unwrap();
        let data = one_sample(vec![0.0; 1001], 2);
        assert!(matches!(oracle_kron_trace(&net, &data), Err(Error::OracleTooLarge(_))));
    }

    #[test]
    fn fd_matches_exact_on_linear_model() {
        let (net, data) = fixture(&[4, 3], 6, 8);
        let fd = oracle_fd_diag(&net, &data, 1e-4).unwrap();
        assert_eq!(fd.kinked_count(), 0);
        let exact = diag_exact(&net, &data).unwrap();
        assert!(max_rel_deviation(&fd.diagonals.flatten(), &exact.flatten(), 1e-12) <= 1e-6);
    }

    #[test]
    fn fd_logistic_curvature() {
        let x = 1.7;
        let w = 0.4;
        let net = Mlp::new(vec![1, 2], vec![Matrix::column(vec![w, 0.0])]).unwrap();
        let data = one_sample(vec![x], 2);
        let fd = oracle_fd_diag(&net, &data, FD_EPS).unwrap();
        let p = 1.0 / (1.0 + (-w * x).exp());
        assert!(rel(fd.diagonals.per_layer[0].get(0, 0), p * (1.0 - p) * x * x) <= 1e-7);
    }

    #[test]
    fn fd_matches_exact_off_kinks() {
        let (net, data) = fixture(&[4, 6, 5, 3], 5, 9);
        let fd = oracle_fd_diag(&net, &data, FD_EPS).unwrap();
        let exact = diag_exact(&net, &data).unwrap();
        let flags: Vec<bool> = fd.kinked.concat();
        let pairs: Vec<(f64, f64)> = fd
            .diagonals
            .flatten()
            .into_iter()
            .zip(exact.flatten())
            .zip(&flags)
            .filter(|(_, &k)| !k)
            .map(|(p, _)| p)
            .collect();
        assert!(!pairs.is_empty());
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        assert!(max_rel_deviation(&a, &b, 1e-9) <= 1e-4);
        assert!(oracle_fd_diag(&net, &data, 0.0).is_err());
    }

    #[test]
    fn unsquared_norms_break_agreement() {
        let (net, data) = fixture(&[3, 4, 3], 5, 10);
        let wrong = trace_exact_with(&net, &data, &TraceOptions { norm: NormConvention::Unsquared, ..Default::default() }).unwrap();
        let oracle = oracle_kron_trace(&net, &data).unwrap();
        assert!(rel(wrong.total(), oracle.total()) > 1e-3);
    }

    #[test]
    fn chunking_does_not_change_results_much() {
        let (net, data) = fixture(&[5, 7, 3], 50, 11);
        let a = trace_exact_with(&net, &data, &TraceOptions { chunk: 1, ..Default::default() }).unwrap();
        let b = trace_exact_with(&net, &data, &TraceOptions { chunk: 50, ..Default::default() }).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            assert!(rel(*x, *y) <= 1e-12);
        }
    }

    #[test]
    fn clamp_distinguishes_rounding_from_bugs() {
        assert_eq!(clamp_psd(0, -1e-12, 1.0).unwrap(), 0.0);
        assert_eq!(clamp_psd(0, 0.3, 1.0).unwrap(), 0.3);
        assert!(matches!(clamp_psd(2, -1e-6, 1.0), Err(Error::NegativeCurvature { layer: 2, .. })));
    }
}
