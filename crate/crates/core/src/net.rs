//! Minimal fully-connected network engine with manual backpropagation.
//!
//! Every matrix is batch-major: row `j` holds sample `j`. A layer computes
//! `y = activation(x Wᵀ + b)` with `W` stored as `(out_dim, in_dim)`.
//! Everything is `f64` so finite-difference checks stay tight.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Row sums of a probability matrix must be within this of one.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    /// Row-wise softmax. Only valid on the final layer of a classifier.
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::InvalidParameter(format!("unknown activation '{other}'"))),
        }
    }
}

/// A dense affine layer followed by an element-wise (or row-wise) activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    biases: Array1<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::InvalidParameter("layer dimensions must be positive".into()));
        }
        if biases.len() != weights.nrows() {
            return Err(Error::dim("layer biases", weights.nrows(), biases.len()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(
            Array2::zeros((out_dim, in_dim)),
            Array1::zeros(out_dim),
            activation,
        )
    }

    /// Zero biases, weights i.i.d. uniform on `±sqrt(6 / (in + out))`.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidParameter("layer dimensions must be positive".into()));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        Self::new(weights, Array1::zeros(out_dim), activation)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &Array1<f64> {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut Array1<f64> {
        &mut self.biases
    }

    pub fn weights_and_biases_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn affine(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut pre = input.dot(&self.weights.t());
        pre += &self.biases;
        pre
    }
}

/// Checks that consecutive layers agree on width and that softmax appears
/// only as the last transform.
pub fn validate_chain(layers: &[DenseLayer]) -> Result<()> {
    for (k, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::dim("layer chain", pair[0].out_dim(), pair[1].in_dim()));
        }
        if pair[0].activation == Activation::Softmax {
            return Err(Error::InvalidParameter(format!(
                "softmax on layer {k} which is not the final layer"
            )));
        }
    }
    Ok(())
}

/// Training targets: real vectors for estimation, class indices for
/// classification.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Array2<f64>),
    Classes { indices: Vec<usize>, count: usize },
}

/// Inputs (one row per sample) with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    targets: Targets,
}

impl Batch {
    pub fn regression(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if targets.nrows() != inputs.nrows() {
            return Err(Error::dim("batch targets", inputs.nrows(), targets.nrows()));
        }
        Ok(Self {
            inputs,
            targets: Targets::Values(targets),
        })
    }

    pub fn classification(inputs: Array2<f64>, classes: Vec<usize>, count: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if classes.len() != inputs.nrows() {
            return Err(Error::dim("batch targets", inputs.nrows(), classes.len()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= count) {
            return Err(Error::InvalidParameter(format!(
                "class index {bad} out of range for {count} classes"
            )));
        }
        Ok(Self {
            inputs,
            targets: Targets::Classes {
                indices: classes,
                count,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Rows `rows` (in that order) as a new batch.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let inputs = self.inputs.select(Axis(0), rows);
        let targets = match &self.targets {
            Targets::Values(v) => Targets::Values(v.select(Axis(0), rows)),
            Targets::Classes { indices, count } => Targets::Classes {
                indices: rows.iter().map(|&r| indices[r]).collect(),
                count: *count,
            },
        };
        Batch { inputs, targets }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in v.iter_mut() {
        *e /= sum;
    }
}

fn apply_activation(activation: Activation, pre: &Array2<f64>) -> Array2<f64> {
    match activation {
        Activation::Identity => pre.clone(),
        Activation::Tanh => pre.mapv(f64::tanh),
        Activation::Softmax => {
            let mut out = pre.as_standard_layout().into_owned();
            for mut row in out.rows_mut() {
                softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
            }
            out
        }
    }
}

/// Everything `backward` needs: the network input and each layer's
/// pre- and post-activation values.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Array2<f64>,
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl Trace {
    /// Final network output (the input itself for an empty stack).
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.post.pop().unwrap_or(self.input)
    }
}

pub fn forward(layers: &[DenseLayer], input: ArrayView2<f64>) -> Result<Trace> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for layer in layers {
        let current = post.last().map(|a| a.view()).unwrap_or(input.view());
        if current.ncols() != layer.in_dim() {
            return Err(Error::dim("forward input", layer.in_dim(), current.ncols()));
        }
        let z = layer.affine(current);
        let y = apply_activation(layer.activation, &z);
        pre.push(z);
        post.push(y);
    }
    Ok(Trace {
        input: input.to_owned(),
        pre,
        post,
    })
}

/// Single-vector convenience wrapper around [`forward`].
pub fn forward_vector(layers: &[DenseLayer], input: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(forward(layers, view)?.into_output().into_raw_vec_and_offset().0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            biases: Array1::zeros(layer.biases.raw_dim()),
        }
    }
}

/// Parameter gradients of a layer stack plus the gradient with respect to
/// the stack's input (used to continue backpropagation upstream).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Array2<f64>,
}

pub fn backward(
    layers: &[DenseLayer],
    trace: &Trace,
    output_gradient: ArrayView2<f64>,
) -> Result<Gradients> {
    if trace.pre.len() != layers.len() || trace.post.len() != layers.len() {
        return Err(Error::dim("trace depth", layers.len(), trace.pre.len()));
    }
    if output_gradient.raw_dim() != trace.output().raw_dim() {
        return Err(Error::dim(
            "output gradient",
            trace.output().len(),
            output_gradient.len(),
        ));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut upstream = output_gradient.to_owned();
    for (k, layer) in layers.iter().enumerate().rev() {
        let post = &trace.post[k];
        if post.ncols() != layer.out_dim() {
            return Err(Error::dim("stale trace", layer.out_dim(), post.ncols()));
        }
        let delta = match layer.activation {
            Activation::Identity => upstream,
            Activation::Tanh => upstream * &post.mapv(|y| 1.0 - y * y),
            Activation::Softmax => {
                // J^T g for row-wise softmax: p ⊙ (g − <g, p>)
                let dots = (&upstream * post).sum_axis(Axis(1)).insert_axis(Axis(1));
                post * &(upstream - &dots)
            }
        };
        let layer_input = if k == 0 { trace.input.view() } else { trace.post[k - 1].view() };
        if layer_input.ncols() != layer.in_dim() {
            return Err(Error::dim("stale trace", layer.in_dim(), layer_input.ncols()));
        }
        grads.push(LayerGrad {
            weights: delta.t().dot(&layer_input),
            biases: delta.sum_axis(Axis(0)),
        });
        upstream = delta.dot(&layer.weights);
    }
    grads.reverse();
    Ok(Gradients {
        layers: grads,
        input: upstream,
    })
}

/// Loss value together with its gradient with respect to the network output.
#[derive(Debug, Clone)]
pub struct Loss {
    pub value: f64,
    pub gradient: Array2<f64>,
}

/// Empirical squared error, `(1/t) Σ_j ‖s_j − ŝ_j‖²`.
pub fn mse_loss(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Loss> {
    if predictions.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if predictions.raw_dim() != targets.raw_dim() {
        return Err(Error::dim("mse targets", predictions.len(), targets.len()));
    }
    let t = predictions.nrows() as f64;
    let diff = &predictions - &targets;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / t;
    Ok(Loss {
        value,
        gradient: diff * (2.0 / t),
    })
}

/// Empirical cross-entropy `−(1/t) Σ_j log p_j[target_j]`; the gradient is
/// taken with respect to the probabilities.
pub fn cross_entropy_loss(probabilities: ArrayView2<f64>, targets: &[usize]) -> Result<Loss> {
    let t = probabilities.nrows();
    if t == 0 {
        return Err(Error::Empty("batch"));
    }
    if targets.len() != t {
        return Err(Error::dim("cross-entropy targets", t, targets.len()));
    }
    let classes = probabilities.ncols();
    let mut gradient = Array2::zeros(probabilities.raw_dim());
    let mut value = 0.0;
    for (j, (row, &target)) in probabilities.rows().into_iter().zip(targets).enumerate() {
        if target >= classes {
            return Err(Error::InvalidParameter(format!(
                "class index {target} out of range for {classes} classes"
            )));
        }
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "probability row {j} sums to {sum}"
            )));
        }
        let p = row[target];
        if p <= 0.0 {
            return Err(Error::ZeroProbability { sample: j });
        }
        value -= p.ln();
        gradient[[j, target]] = -1.0 / (t as f64 * p);
    }
    Ok(Loss {
        value: value / t as f64,
        gradient,
    })
}

/// Plain gradient descent update `p ← p − lr·g` on every layer.
pub fn sgd_step(layers: &mut [DenseLayer], grads: &[LayerGrad], learning_rate: f64) -> Result<()> {
    if grads.len() != layers.len() {
        return Err(Error::dim("gradient stack", layers.len(), grads.len()));
    }
    if learning_rate < 0.0 {
        return Err(Error::InvalidParameter("learning rate must be non-negative".into()));
    }
    for (layer, grad) in layers.iter_mut().zip(grads) {
        if grad.weights.raw_dim() != layer.weights.raw_dim() || grad.biases.len() != layer.biases.len()
        {
            return Err(Error::dim("layer gradient", layer.parameter_count(), grad.weights.len() + grad.biases.len()));
        }
        layer.weights.scaled_add(-learning_rate, &grad.weights);
        layer.biases.scaled_add(-learning_rate, &grad.biases);
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}
