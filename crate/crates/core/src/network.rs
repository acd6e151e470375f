//! No-bias fully connected ReLU networks with a softmax cross-entropy head.
//!
//! Layer `d` (0-based) maps `x_d` to `x_{d+1} = relu(W_d x_d)`; the last
//! layer produces the logits `o = W_{D-1} x_{D-1}` without an activation.
//! Every weight gradient used here is a rank-1 product `delta_d x_d^T`, where
//! `delta_d` is the vector obtained by back-propagating a seed vector from
//! the logits down to layer `d`'s output.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_fill, outer_slices, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `x_0 .. x_{D-1}`: the input followed by every hidden activation.
    pub layer_inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_z: f64,
}

/// One gradient matrix per layer, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub per_layer: Vec<Matrix>,
}

impl LayerGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self { per_layer: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect() }
    }

    pub fn add_scaled_assign(&mut self, other: &Self, factor: f64) -> Result<()> {
        if self.per_layer.len() != other.per_layer.len() {
            return Err(Error::Shape("gradient depth mismatch".into()));
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            a.add_scaled_assign(b, factor)?;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self { per_layer: self.per_layer.iter().map(|m| m.scale(factor)).collect() }
    }

    /// All entries, layer by layer in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        self.per_layer.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, momentum: 0.9, weight_decay: 1e-5, batch_size: 1024, epochs: 3000, seed: 0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Running averages over the mini-batches of one epoch, measured before
/// each batch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    pub log: Vec<EpochStats>,
}

/// Activations of a mini-batch; row `i` of every matrix belongs to sample `i`.
struct BatchForward {
    activations: Vec<Matrix>,
    logits: Matrix,
}

impl Mlp {
    pub fn new(dims: Vec<usize>, weights: Vec<Matrix>) -> Result<Self> {
        check_dims(&dims)?;
        if weights.len() != dims.len() - 1 {
            return Err(Error::Shape(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                dims.len() - 1
            )));
        }
        for (d, w) in weights.iter().enumerate() {
            if w.shape() != (dims[d + 1], dims[d]) {
                return Err(Error::Shape(format!(
                    "layer {d}: weight is {}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    dims[d + 1],
                    dims[d]
                )));
            }
        }
        Ok(Self { dims, weights })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let weights = dims.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect();
        Ok(Self { dims: dims.to_vec(), weights })
    }

    /// He initialization: `N(0, 2 / fan_in)` entries.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        check_dims(dims)?;
        let weights = dims
            .windows(2)
            .map(|w| gaussian_fill(rng, w[1], w[0], (2.0 / w[0] as f64).sqrt()))
            .collect();
        Ok(Self { dims: dims.to_vec(), weights })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    /// Number of weight layers `D`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("dims is never empty")
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|w| w.as_slice().iter().copied()).collect()
    }

    /// Same architecture with weights taken from a flat parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let len = w.rows() * w.cols();
                let m = Matrix::new(w.rows(), w.cols(), params[offset..offset + len].to_vec());
                offset += len;
                m
            })
            .collect::<Result<_>>()?;
        Ok(Self { dims: self.dims.clone(), weights })
    }

    /// Network with `weights[d]` replaced by `f(d, weights[d])`.
    pub fn map_weights(&self, f: impl Fn(usize, &Matrix) -> Matrix) -> Result<Self> {
        Self::new(self.dims.clone(), self.weights.iter().enumerate().map(|(d, w)| f(d, w)).collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for a network expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let depth = self.depth();
        let mut layer_inputs = Vec::with_capacity(depth);
        layer_inputs.push(x.to_vec());
        for w in &self.weights[..depth - 1] {
            let mut z = w.mul_vec(layer_inputs.last().expect("nonempty"))?;
            relu_in_place(&mut z);
            layer_inputs.push(z);
        }
        let logits = self.weights[depth - 1].mul_vec(layer_inputs.last().expect("nonempty"))?;
        let (probs, log_z) = softmax(&logits);
        Ok(ForwardTrace { layer_inputs, logits, probs, log_z })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|t| t.logits)
    }

    /// Back-propagates `seed` (a vector over the logits) and returns the
    /// per-layer output-side vectors `delta_d`, so that the gradient of
    /// `<seed, o>` with respect to `W_d` is `delta_d x_d^T`.
    ///
    /// The ReLU derivative is taken as 0 at 0.
    pub fn backprop(&self, trace: &ForwardTrace, seed: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_trace(trace)?;
        if seed.len() != self.num_classes() {
            return Err(Error::Shape(format!("seed of length {} for {} logits", seed.len(), self.num_classes())));
        }
        let depth = self.depth();
        let mut deltas = vec![Vec::new(); depth];
        deltas[depth - 1] = seed.to_vec();
        for d in (1..depth).rev() {
            let mut back = self.weights[d].t_mul_vec(&deltas[d])?;
            for (b, &x) in back.iter_mut().zip(&trace.layer_inputs[d]) {
                if x <= 0.0 {
                    *b = 0.0;
                }
            }
            deltas[d - 1] = back;
        }
        Ok(deltas)
    }

    fn gradients_from_deltas(&self, trace: &ForwardTrace, deltas: &[Vec<f64>]) -> LayerGradients {
        LayerGradients {
            per_layer: deltas.iter().zip(&trace.layer_inputs).map(|(g, x)| outer_slices(g, x)).collect(),
        }
    }

    /// `∂ ln Z / ∂W_d` for every layer.
    pub fn grad_log_z(&self, trace: &ForwardTrace) -> Result<LayerGradients> {
        let deltas = self.backprop(trace, &trace.probs)?;
        Ok(self.gradients_from_deltas(trace, &deltas))
    }

    /// `∂ o_l / ∂W_d` for every layer.
    pub fn grad_logit(&self, trace: &ForwardTrace, label: usize) -> Result<LayerGradients> {
        let k = self.num_classes();
        if label >= k {
            return Err(Error::LabelOutOfRange { label, num_classes: k });
        }
        let mut seed = vec![0.0; k];
        seed[label] = 1.0;
        let deltas = self.backprop(trace, &seed)?;
        Ok(self.gradients_from_deltas(trace, &deltas))
    }

    /// Mean cross-entropy `-(1/n) Σ ln p(y_i | x_i)`.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let fwd = self.forward_batch(data.features())?;
        let total: f64 = (0..data.len())
            .map(|i| {
                let row = fwd.logits.row(i);
                log_sum_exp(row) - row[data.labels()[i]]
            })
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Fraction of samples whose argmax logit (ties to the smallest label)
    /// matches the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let fwd = self.forward_batch(data.features())?;
        let correct = (0..data.len()).filter(|&i| argmax(fwd.logits.row(i)) == data.labels()[i]).count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Gradient of the mean cross-entropy over `batch`.
    pub fn grad_loss(&self, batch: &Dataset) -> Result<LayerGradients> {
        self.check_data(batch)?;
        self.batch_step(batch.features(), batch.labels()).map(|(g, _, _)| g)
    }

    /// Mean-loss gradient, summed loss and number of correct predictions for
    /// one mini-batch.
    fn batch_step(&self, x: &Matrix, labels: &[usize]) -> Result<(LayerGradients, f64, usize)> {
        let n = labels.len();
        let fwd = self.forward_batch(x)?;
        let k = self.num_classes();
        let mut delta = Matrix::zeros(n, k);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (i, &y) in labels.iter().enumerate() {
            let row = fwd.logits.row(i);
            let (p, log_z) = softmax(row);
            loss_sum += log_z - row[y];
            if argmax(row) == y {
                correct += 1;
            }
            let out = delta.row_mut(i);
            for (o, pl) in out.iter_mut().zip(p) {
                *o = pl / n as f64;
            }
            out[y] -= 1.0 / n as f64;
        }
        let depth = self.depth();
        let mut per_layer = vec![Matrix::zeros(0, 0); depth];
        for d in (0..depth).rev() {
            per_layer[d] = delta.t_matmul(&fwd.activations[d])?;
            if d > 0 {
                let mut back = delta.matmul(&self.weights[d])?;
                for (b, &a) in back.as_mut_slice().iter_mut().zip(fwd.activations[d].as_slice()) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok((LayerGradients { per_layer }, loss_sum, correct))
    }

    fn forward_batch(&self, x: &Matrix) -> Result<BatchForward> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs of width {} for a network expecting {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth);
        activations.push(x.clone());
        for w in &self.weights[..depth - 1] {
            let mut z = activations.last().expect("nonempty").matmul_t(w)?;
            relu_in_place(z.as_mut_slice());
            activations.push(z);
        }
        let logits = activations.last().expect("nonempty").matmul_t(&self.weights[depth - 1])?;
        Ok(BatchForward { activations, logits })
    }

    /// Mini-batch SGD: `v <- μ v - η (g + λ θ)`, `θ <- θ + v`, with a seeded
    /// reshuffle every epoch. The final incomplete batch is kept.
    pub fn train(&self, data: &Dataset, cfg: &SgdConfig) -> Result<TrainOutcome> {
        self.train_with(data, cfg, |_| {})
    }

    /// [`Mlp::train`] with a callback invoked after every epoch.
    pub fn train_with(
        &self,
        data: &Dataset,
        cfg: &SgdConfig,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<TrainOutcome> {
        cfg.validate()?;
        self.check_data(data)?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut net = self.clone();
        let mut velocity = LayerGradients::zeros_like(self);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        let dim = data.input_dim();
        for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut correct = 0;
            for idx in order.chunks(cfg.batch_size) {
                let mut x = Matrix::zeros(idx.len(), dim);
                let mut labels = Vec::with_capacity(idx.len());
                for (r, &i) in idx.iter().enumerate() {
                    let (xi, yi) = data.sample(i);
                    x.row_mut(r).copy_from_slice(xi);
                    labels.push(yi);
                }
                let (grad, batch_loss, batch_correct) = net.batch_step(&x, &labels)?;
                if !batch_loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss: batch_loss });
                }
                loss_sum += batch_loss;
                correct += batch_correct;
                for ((v, g), w) in velocity.per_layer.iter_mut().zip(&grad.per_layer).zip(net.weights.iter_mut()) {
                    for ((vi, &gi), wi) in v.as_mut_slice().iter_mut().zip(g.as_slice()).zip(w.as_mut_slice()) {
                        *vi = cfg.momentum * *vi - cfg.learning_rate * (gi + cfg.weight_decay * *wi);
                        *wi += *vi;
                    }
                }
            }
            let stats = EpochStats {
                epoch,
                loss: loss_sum / data.len() as f64,
                train_acc: correct as f64 / data.len() as f64,
            };
            on_epoch(&stats);
            log.push(stats);
        }
        if net.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { epoch: cfg.epochs.saturating_sub(1), loss: f64::NAN });
        }
        Ok(TrainOutcome { net, log })
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.input_dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "dataset has {} features, network expects {}",
                data.input_dim(),
                self.input_dim()
            )));
        }
        if data.num_classes() != self.num_classes() {
            return Err(Error::Shape(format!(
                "dataset has {} classes, network has {} outputs",
                data.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let consistent = trace.layer_inputs.len() == self.depth()
            && trace.layer_inputs.iter().zip(&self.dims).all(|(x, &m)| x.len() == m)
            && trace.logits.len() == self.num_classes()
            && trace.probs.len() == self.num_classes();
        if consistent {
            Ok(())
        } else {
            Err(Error::StaleTrace(format!("layer widths do not match {:?}", self.dims)))
        }
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument("need at least an input and an output width".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

#[inline]
fn relu_in_place(z: &mut [f64]) {
    for v in z {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// `ln Σ exp(o_l)`, shifted by the maximum logit.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&o| (o - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities and `ln Z`.
pub fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let log_z = log_sum_exp(logits);
    (logits.iter().map(|&o| (o - log_z).exp()).collect(), log_z)
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `frobenius_sq` of a rank-1 gradient `delta x^T` without forming it.
#[inline]
pub(crate) fn rank_one_frobenius_sq(delta: &[f64], x: &[f64]) -> f64 {
    linalg::norm_sq(delta) * linalg::norm_sq(x)
}
