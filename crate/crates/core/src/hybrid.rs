//! Hybrid analog/digital network: analog dense stack, a bank of identical
//! scalar quantizers, digital dense stack.
//!
//! The bank is the only path from the analog stack to the digital stack.
//! During training it runs either the soft tanh-sum activation or the
//! passing-gradient noise model; after training it is frozen into a step
//! quantizer and the network is deployed.

use log::debug;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mimo::index_to_symbols;
use crate::net::{
    self, argmax, cross_entropy_loss, mse_loss, validate_chain, Activation, Batch, DenseLayer, LayerGrad, Loss,
    Targets, Trace,
};
use crate::quantizer::{anneal, dither_noise, AnnealSchedule, BankStage, QuantizerBank, SoftQuantizerGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Real-valued output of dimension `n_s`, trained with squared error.
    Estimation,
    /// Softmax over `|S|^{n_s}` classes, trained with cross-entropy.
    Classification,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Estimation => "estimation",
            Head::Classification => "classification",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridNetwork {
    analog: Vec<DenseLayer>,
    bank: QuantizerBank,
    digital: Vec<DenseLayer>,
    head: Head,
}

#[derive(Debug, Clone)]
pub struct HybridTrace {
    pub analog: Trace,
    /// Cached `tanh(c_i z − b_i)` per bank element (soft stage only), laid out
    /// element-major with `terms` values per element.
    tanhs: Vec<f64>,
    pub bank_output: Array2<f64>,
    pub digital: Trace,
}

impl HybridTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.digital.output()
    }

    /// Analog output fed to the quantizer lanes.
    pub fn bank_input(&self) -> &Array2<f64> {
        self.analog.output()
    }
}

#[derive(Debug, Clone)]
pub struct HybridGradients {
    pub analog: Vec<LayerGrad>,
    /// `None` unless the bank runs the soft stage.
    pub quantizer: Option<SoftQuantizerGrad>,
    pub digital: Vec<LayerGrad>,
}

impl HybridNetwork {
    pub fn new(analog: Vec<DenseLayer>, bank: QuantizerBank, digital: Vec<DenseLayer>, head: Head) -> Result<Self> {
        let (Some(analog_last), Some(digital_first), Some(digital_last)) =
            (analog.last(), digital.first(), digital.last())
        else {
            return Err(Error::InvalidParameter(
                "hybrid network needs at least one analog and one digital layer".into(),
            ));
        };
        validate_chain(&analog)?;
        validate_chain(&digital)?;
        if analog.iter().any(|l| l.activation() == Activation::Softmax) {
            return Err(Error::InvalidParameter("softmax is not allowed in the analog stack".into()));
        }
        if analog_last.out_dim() != bank.lanes() {
            return Err(Error::dim("analog output vs lanes", bank.lanes(), analog_last.out_dim()));
        }
        if digital_first.in_dim() != bank.lanes() {
            return Err(Error::dim("digital input vs lanes", bank.lanes(), digital_first.in_dim()));
        }
        match head {
            Head::Classification if digital_last.activation() != Activation::Softmax => {
                return Err(Error::InvalidParameter("classification head must end in softmax".into()))
            }
            Head::Estimation if digital_last.activation() == Activation::Softmax => {
                return Err(Error::InvalidParameter("estimation head cannot end in softmax".into()))
            }
            _ => {}
        }
        Ok(Self {
            analog,
            bank,
            digital,
            head,
        })
    }

    /// Single linear analog layer `n → p` and single linear digital layer `p → n_s`.
    pub fn linear_estimator<R: Rng + ?Sized>(
        input_dim: usize,
        target_dim: usize,
        bank: QuantizerBank,
        rng: &mut R,
    ) -> Result<Self> {
        let lanes = bank.lanes();
        let analog = vec![DenseLayer::glorot(input_dim, lanes, Activation::Identity, rng)?];
        let digital = vec![DenseLayer::glorot(lanes, target_dim, Activation::Identity, rng)?];
        Self::new(analog, bank, digital, Head::Estimation)
    }

    /// Two analog layers `n → hidden (tanh) → p` and two digital layers
    /// `p → hidden (tanh) → 2^{users} (softmax)`.
    pub fn symbol_detector<R: Rng + ?Sized>(
        input_dim: usize,
        users: usize,
        hidden: usize,
        bank: QuantizerBank,
        rng: &mut R,
    ) -> Result<Self> {
        if users == 0 || users > 24 {
            return Err(Error::InvalidParameter(format!("unsupported user count {users}")));
        }
        let lanes = bank.lanes();
        let analog = vec![
            DenseLayer::glorot(input_dim, hidden, Activation::Tanh, rng)?,
            DenseLayer::glorot(hidden, lanes, Activation::Identity, rng)?,
        ];
        let digital = vec![
            DenseLayer::glorot(lanes, hidden, Activation::Tanh, rng)?,
            DenseLayer::glorot(hidden, 1 << users, Activation::Softmax, rng)?,
        ];
        Self::new(analog, bank, digital, Head::Classification)
    }

    pub fn analog(&self) -> &[DenseLayer] {
        &self.analog
    }

    pub fn digital(&self) -> &[DenseLayer] {
        &self.digital
    }

    pub fn analog_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.analog
    }

    pub fn digital_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.digital
    }

    /// Mutable access to the three stages at once.
    pub fn parts_mut(&mut self) -> (&mut [DenseLayer], &mut QuantizerBank, &mut [DenseLayer]) {
        (&mut self.analog, &mut self.bank, &mut self.digital)
    }

    pub fn bank(&self) -> &QuantizerBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut QuantizerBank {
        &mut self.bank
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.analog[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.digital[self.digital.len() - 1].out_dim()
    }

    /// Training-time forward pass. Soft stage: lanes apply the tanh-sum map.
    /// Passing-gradient stage: lanes add independent uniform noise.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, rng: &mut R) -> Result<HybridTrace> {
        let analog = net::forward(&self.analog, x)?;
        let z = analog.output();
        let (tanhs, bank_output) = match self.bank.stage() {
            BankStage::Soft(params) => {
                let terms = params.terms();
                let mut tanhs = vec![0.0; z.len() * terms];
                let mut out = Array2::zeros(z.raw_dim());
                for (k, (dst, &v)) in out.iter_mut().zip(z.iter()).enumerate() {
                    *dst = params.eval_with_tanhs(v, &mut tanhs[k * terms..(k + 1) * terms]);
                }
                (tanhs, out)
            }
            BankStage::PassingGradient(q) => {
                let mut out = z.clone();
                for v in out.iter_mut() {
                    *v += dither_noise(q, rng)?;
                }
                (Vec::new(), out)
            }
            BankStage::Hard(_) => {
                return Err(Error::InvalidMode(
                    "bank is hardened; training needs a soft or passing-gradient stage".into(),
                ))
            }
        };
        let digital = net::forward(&self.digital, bank_output.view())?;
        Ok(HybridTrace {
            analog,
            tanhs,
            bank_output,
            digital,
        })
    }

    pub fn backward(&self, trace: &HybridTrace, output_gradient: ArrayView2<f64>) -> Result<HybridGradients> {
        let digital = net::backward(&self.digital, &trace.digital, output_gradient)?;
        let (bank_grad, quantizer) = match self.bank.stage() {
            BankStage::Soft(params) => {
                let terms = params.terms();
                let upstream = &digital.input;
                if trace.tanhs.len() != upstream.len() * terms {
                    return Err(Error::dim("stale trace", upstream.len() * terms, trace.tanhs.len()));
                }
                let mut grad = SoftQuantizerGrad::zeros(terms);
                let mut dz = Array2::zeros(upstream.raw_dim());
                for (k, (dst, &g)) in dz.iter_mut().zip(upstream.iter()).enumerate() {
                    *dst = params.backprop(&trace.tanhs[k * terms..(k + 1) * terms], g, &mut grad);
                }
                (dz, Some(grad))
            }
            BankStage::PassingGradient(_) => (digital.input, None),
            BankStage::Hard(_) => {
                return Err(Error::InvalidMode("cannot backpropagate through a hardened bank".into()))
            }
        };
        let analog = net::backward(&self.analog, &trace.analog, bank_grad.view())?;
        Ok(HybridGradients {
            analog: analog.layers,
            quantizer,
            digital: digital.layers,
        })
    }

    /// SGD update of both stacks and, when trainable, the shared quantizer
    /// amplitudes and shifts.
    pub fn sgd_step(&mut self, grads: &HybridGradients, learning_rate: f64) -> Result<()> {
        self.sgd_step_split(grads, learning_rate, learning_rate)
    }

    /// Like [`sgd_step`](Self::sgd_step) with a separate rate for the
    /// quantizer parameters, whose gradients accumulate over every lane.
    pub fn sgd_step_split(&mut self, grads: &HybridGradients, learning_rate: f64, quantizer_rate: f64) -> Result<()> {
        net::sgd_step(&mut self.analog, &grads.analog, learning_rate)?;
        net::sgd_step(&mut self.digital, &grads.digital, learning_rate)?;
        if let (BankStage::Soft(params), Some(g)) = (self.bank.stage_mut(), &grads.quantizer) {
            params.sgd_step(g, quantizer_rate)?;
        }
        Ok(())
    }

    /// Deployed forward pass: lanes apply the step quantizer.
    pub fn forward_deploy(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let q = match self.bank.stage() {
            BankStage::Hard(q) | BankStage::PassingGradient(q) => q,
            BankStage::Soft(_) => {
                return Err(Error::InvalidMode(
                    "bank is still soft; harden it before deployment".into(),
                ))
            }
        };
        let z = net::forward(&self.analog, x)?.into_output();
        let quantized = z.mapv(|v| q.apply(v));
        Ok(net::forward(&self.digital, quantized.view())?.into_output())
    }

    /// Hardens a soft bank (or fixes a passing-gradient bank to its uniform
    /// quantizer). Only the bank changes.
    pub fn freeze_bank(&mut self) {
        self.bank.freeze();
    }

    /// Most probable class per row; the lowest index wins ties.
    pub fn classify_indices(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        if self.head != Head::Classification {
            return Err(Error::InvalidMode("classify needs a classification head".into()));
        }
        let probs = self.forward_deploy(x)?;
        Ok(probs.rows().into_iter().map(argmax).collect())
    }

    /// Decodes the most probable class of one observation into BPSK symbols.
    pub fn classify(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        let row = x.insert_axis(ndarray::Axis(0));
        let index = self.classify_indices(row)?[0];
        Ok(decode_class(index, self.output_dim()))
    }

    pub fn loss(&self, output: ArrayView2<f64>, targets: &Targets) -> Result<Loss> {
        match (self.head, targets) {
            (Head::Estimation, Targets::Values(values)) => mse_loss(output, values.view()),
            (Head::Classification, Targets::Classes { indices, .. }) => cross_entropy_loss(output, indices),
            _ => Err(Error::InvalidMode(format!(
                "{} head does not match the target type",
                self.head.name()
            ))),
        }
    }
}

/// BPSK vector of class `index` among `classes = 2^{users}` classes.
pub fn decode_class(index: usize, classes: usize) -> Vec<f64> {
    index_to_symbols(index, classes.trailing_zeros() as usize)
}

/// Decoding rule applied to a probability vector: argmax with lowest-index
/// tie-break, then little-endian BPSK decoding.
pub fn decide(probabilities: ArrayView1<f64>) -> Vec<f64> {
    decode_class(argmax(probabilities), probabilities.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    SoftToHard,
    PassingGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Quantizer parameters step with `learning_rate · quantizer_lr_scale`.
    pub quantizer_lr_scale: f64,
    pub mode: TrainingMode,
    pub anneal: AnnealSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.01,
            quantizer_lr_scale: 1.0,
            mode: TrainingMode::SoftToHard,
            anneal: AnnealSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch SGD over `data`, then freezes the quantizer bank.
pub fn train(net: &mut HybridNetwork, data: &Batch, config: &TrainConfig) -> Result<TrainReport> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidParameter("epochs and batch size must be positive".into()));
    }
    if !(config.learning_rate >= 0.0) || !(config.quantizer_lr_scale >= 0.0) {
        return Err(Error::InvalidParameter("learning rates must be non-negative".into()));
    }
    match (net.bank.stage(), config.mode) {
        (BankStage::Soft(_), TrainingMode::SoftToHard) | (BankStage::PassingGradient(_), TrainingMode::PassingGradient) => {}
        (stage, mode) => {
            return Err(Error::InvalidMode(format!(
                "bank stage '{}' cannot be trained in {mode:?} mode",
                stage.name()
            )))
        }
    }
    if data.inputs().ncols() != net.input_dim() {
        return Err(Error::dim("training inputs", net.input_dim(), data.inputs().ncols()));
    }
    match data.targets() {
        Targets::Values(v) if net.head == Head::Estimation && v.ncols() == net.output_dim() => {}
        Targets::Classes { count, .. } if net.head == Head::Classification && *count == net.output_dim() => {}
        _ => {
            return Err(Error::InvalidMode(format!(
                "training targets do not match the {} head",
                net.head.name()
            )))
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let t = data.len();
    let mut order: Vec<usize> = (0..t).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if epoch > 0 && config.anneal.is_active() {
            if let BankStage::Soft(params) = net.bank.stage_mut() {
                *params = anneal(params, 1, &config.anneal)?;
            }
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(config.batch_size) {
            let batch = data.select(rows);
            let trace = net.forward_train(batch.inputs().view(), &mut rng)?;
            let loss = match net.loss(trace.output().view(), batch.targets()) {
                Ok(l) => l,
                Err(Error::ZeroProbability { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::INFINITY,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.value,
                });
            }
            total += loss.value * rows.len() as f64;
            let grads = net.backward(&trace, loss.gradient.view())?;
            net.sgd_step_split(&grads, config.learning_rate, config.learning_rate * config.quantizer_lr_scale)?;
        }
        let epoch_loss = total / t as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        debug!("epoch {epoch}: loss {epoch_loss}");
        history.push(epoch_loss);
    }
    net.freeze_bank();
    Ok(TrainReport {
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{uniform_quantizer, LanePlan, SoftQuantizerParams};
    use crate::rng::stream_rng;
    use ndarray::array;
    use rand::RngCore;

    /// Always yields the midpoint of the unit interval, so dither is exactly zero.
    struct MidpointRng;

    impl RngCore for MidpointRng {
        fn next_u32(&mut self) -> u32 {
            1 << 31
        }
        fn next_u64(&mut self) -> u64 {
            1 << 63
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    fn soft_bank(lanes: usize, resolution: usize, slope_factor: f64) -> QuantizerBank {
        let params = SoftQuantizerParams::uniform(resolution, -2.0, 2.0, slope_factor).unwrap();
        QuantizerBank::new(lanes, BankStage::Soft(params)).unwrap()
    }

    fn passing_bank(lanes: usize, resolution: usize) -> QuantizerBank {
        let q = uniform_quantizer(-2.0, 2.0, resolution).unwrap();
        QuantizerBank::new(lanes, BankStage::PassingGradient(q)).unwrap()
    }

    fn with_random_biases(mut net: HybridNetwork, rng: &mut impl Rng) -> HybridNetwork {
        for layer in net.analog.iter_mut().chain(net.digital.iter_mut()) {
            for b in layer.biases_mut().iter_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        net
    }

    #[test]
    fn construction_checks_structure() {
        let mut rng = stream_rng(0, "structure");
        let bank = soft_bank(3, 4, 8.0);
        let analog = vec![DenseLayer::glorot(5, 2, Activation::Identity, &mut rng).unwrap()];
        let digital = vec![DenseLayer::glorot(3, 2, Activation::Identity, &mut rng).unwrap()];
        assert!(HybridNetwork::new(analog, bank.clone(), digital.clone(), Head::Estimation).is_err());

        let analog = vec![DenseLayer::glorot(5, 3, Activation::Identity, &mut rng).unwrap()];
        assert!(HybridNetwork::new(analog.clone(), bank.clone(), digital.clone(), Head::Classification).is_err());
        assert!(HybridNetwork::new(analog.clone(), bank.clone(), vec![], Head::Estimation).is_err());
        assert!(HybridNetwork::new(analog, bank, digital, Head::Estimation).is_ok());
    }

    #[test]
    fn soft_mode_with_zero_analog_weights_sees_zero() {
        let mut rng = stream_rng(1, "zero-analog");
        let mut net = HybridNetwork::linear_estimator(6, 3, soft_bank(4, 4, 8.0), &mut rng).unwrap();
        net.analog[0].weights_mut().fill(0.0);
        let x = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let trace = net.forward_train(x.view(), &mut rng).unwrap();
        let BankStage::Soft(p) = net.bank().stage() else { unreachable!() };
        let expected = p.eval(0.0);
        assert!(trace.bank_output.iter().all(|&v| v == expected));
    }

    #[test]
    fn zero_dither_passing_mode_is_transparent() {
        let mut rng = stream_rng(2, "zero-dither");
        let net = HybridNetwork::linear_estimator(6, 3, passing_bank(4, 8), &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let trace = net.forward_train(x.view(), &mut MidpointRng).unwrap();
        assert_eq!(&trace.bank_output, trace.bank_input());
        let direct = net::forward(&net.digital, trace.bank_input().view()).unwrap().into_output();
        assert_eq!(trace.output(), &direct);
    }

    #[test]
    fn hard_bank_cannot_train_and_soft_bank_cannot_deploy() {
        let mut rng = stream_rng(3, "modes");
        let mut net = HybridNetwork::linear_estimator(4, 2, soft_bank(2, 4, 8.0), &mut rng).unwrap();
        let x = Array2::zeros((1, 4));
        assert!(matches!(net.forward_deploy(x.view()), Err(Error::InvalidMode(_))));
        net.freeze_bank();
        assert!(matches!(net.forward_train(x.view(), &mut rng), Err(Error::InvalidMode(_))));
        assert!(net.forward_deploy(x.view()).is_ok());
    }

    fn soft_params(net: &mut HybridNetwork) -> &mut SoftQuantizerParams {
        match net.bank_mut().stage_mut() {
            BankStage::Soft(p) => p,
            _ => unreachable!(),
        }
    }

    fn flat_params(net: &mut HybridNetwork) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for layer in net.analog.iter_mut().chain(net.digital.iter_mut()) {
            let (w, b) = layer.weights_and_biases_mut();
            out.extend(w.iter_mut());
            out.extend(b.iter_mut());
        }
        if let BankStage::Soft(p) = net.bank.stage_mut() {
            let (a, b) = p.amplitudes_and_shifts_mut();
            out.extend(a.iter_mut());
            out.extend(b.iter_mut());
        }
        out
    }

    fn flat_grads(g: &HybridGradients) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in g.analog.iter().chain(&g.digital) {
            out.extend(layer.weights.iter());
            out.extend(layer.biases.iter());
        }
        if let Some(q) = &g.quantizer {
            out.extend(q.amplitudes.iter());
            out.extend(q.shifts.iter());
        }
        out
    }

    /// Worst relative error between backprop and central differences.
    fn fd_check(net: &mut HybridNetwork, x: &Array2<f64>, targets: &Targets) -> f64 {
        let loss_of = |n: &HybridNetwork| {
            let tr = n.forward_train(x.view(), &mut MidpointRng).unwrap();
            n.loss(tr.output().view(), targets).unwrap().value
        };
        let trace = net.forward_train(x.view(), &mut MidpointRng).unwrap();
        let loss = net.loss(trace.output().view(), targets).unwrap();
        let analytic = flat_grads(&net.backward(&trace, loss.gradient.view()).unwrap());
        assert_eq!(analytic.len(), flat_params(net).len());
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = *flat_params(net)[k];
            *flat_params(net)[k] = orig + eps;
            let up = loss_of(net);
            *flat_params(net)[k] = orig - eps;
            let down = loss_of(net);
            *flat_params(net)[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn soft_mode_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = stream_rng(seed, "fd-est");
            let net = HybridNetwork::linear_estimator(5, 3, soft_bank(4, 4, 1.5), &mut rng).unwrap();
            let mut net = with_random_biases(net, &mut rng);
            let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.5..1.5));
            let s = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
            let worst = fd_check(&mut net, &x, &Targets::Values(s));
            assert!(worst < 1e-4, "estimation seed {seed}: {worst}");

            let mut rng = stream_rng(seed, "fd-det");
            let net = HybridNetwork::symbol_detector(6, 2, 5, soft_bank(3, 4, 1.5), &mut rng).unwrap();
            let mut net = with_random_biases(net, &mut rng);
            let x = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.5..1.5));
            let classes = (0..6).map(|_| rng.random_range(0..4)).collect();
            let worst = fd_check(&mut net, &x, &Targets::Classes { indices: classes, count: 4 });
            assert!(worst < 1e-4, "classification seed {seed}: {worst}");
        }
    }

    #[test]
    fn passing_mode_has_no_quantizer_gradient() {
        let mut rng = stream_rng(4, "passing-grad");
        let net = HybridNetwork::linear_estimator(4, 2, passing_bank(3, 4), &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let trace = net.forward_train(x.view(), &mut rng).unwrap();
        let loss = net.loss(trace.output().view(), &Targets::Values(Array2::ones((3, 2)))).unwrap();
        let g = net.backward(&trace, loss.gradient.view()).unwrap();
        assert!(g.quantizer.is_none());
        // Backward treats the stage as identity: analog input gradient equals digital input gradient.
        let digital = net::backward(&net.digital, &trace.digital, loss.gradient.view()).unwrap();
        let manual = digital.input.t().dot(&x);
        assert_eq!(g.analog[0].weights, manual);
    }

    #[test]
    fn soft_mode_quantizer_gradient_is_nonzero() {
        let mut rng = stream_rng(5, "soft-grad");
        let net = HybridNetwork::linear_estimator(4, 2, soft_bank(3, 4, 2.0), &mut rng).unwrap();
        let x = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let trace = net.forward_train(x.view(), &mut rng).unwrap();
        let loss = net.loss(trace.output().view(), &Targets::Values(Array2::ones((8, 2)))).unwrap();
        let g = net.backward(&trace, loss.gradient.view()).unwrap();
        let q = g.quantizer.unwrap();
        assert!(q.amplitudes.iter().chain(&q.shifts).any(|&v| v != 0.0));
    }

    #[test]
    fn classification_decoding() {
        assert_eq!(decide(array![1.0, 0.0, 0.0, 0.0].view()), vec![-1.0, -1.0]);
        assert_eq!(decide(array![0.0, 0.0, 0.0, 1.0].view()), vec![1.0, 1.0]);
        assert_eq!(decide(array![0.4, 0.1, 0.4, 0.1].view()), vec![-1.0, -1.0]);
        assert_eq!(decide(array![0.1, 0.4, 0.1, 0.4].view()), vec![1.0, -1.0]);
    }

    #[test]
    fn deploy_is_piecewise_constant_for_two_level_bank() {
        let mut rng = stream_rng(6, "piecewise");
        let mut net = HybridNetwork::linear_estimator(3, 2, soft_bank(2, 2, 8.0), &mut rng).unwrap();
        net.freeze_bank();
        let x = array![[0.4, -0.2, 0.9]];
        let z = net::forward(net.analog(), x.view()).unwrap().into_output();
        let base = net.forward_deploy(x.view()).unwrap();
        for _ in 0..100 {
            let scale = rng.random_range(0.1..10.0);
            let y = net.forward_deploy((&x * scale).view()).unwrap();
            // Linear analog stage without bias: scaling x keeps the sign pattern of z.
            let zs = net::forward(net.analog(), (&x * scale).view()).unwrap().into_output();
            assert!(z.iter().zip(zs.iter()).all(|(a, b)| a.signum() == b.signum()));
            assert_eq!(y, base);
        }
        let again = net.forward_deploy(x.view()).unwrap();
        assert_eq!(again, base);
    }

    #[test]
    fn deploy_approaches_soft_output_as_slopes_grow() {
        let mut rng = stream_rng(7, "converge");
        let net0 = HybridNetwork::linear_estimator(4, 2, soft_bank(3, 4, 1.0), &mut rng).unwrap();
        let x = Array2::from_shape_fn((50, 4), |_| rng.random_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for factor in [1.0, 10.0, 100.0, 1000.0] {
            let mut net = net0.clone();
            let sched = AnnealSchedule { factor, co_scale_shifts: true };
            *soft_params(&mut net) = anneal(soft_params(&mut net), 1, &sched).unwrap();
            let soft = net.forward_train(x.view(), &mut rng).unwrap().output().clone();
            let BankStage::Soft(p) = net.bank().stage() else { unreachable!() };
            let thresholds = p.thresholds();
            let z = net::forward(net.analog(), x.view()).unwrap().into_output();
            net.freeze_bank();
            let hard = net.forward_deploy(x.view()).unwrap();
            let mut worst: f64 = 0.0;
            for j in 0..50 {
                if z.row(j).iter().all(|v| thresholds.iter().all(|t| (v - t).abs() > 0.05)) {
                    for k in 0..2 {
                        worst = worst.max((soft[[j, k]] - hard[[j, k]]).abs());
                    }
                }
            }
            assert!(worst <= prev);
            prev = worst;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn passing_deploy_is_digital_on_uniform_quantized_z() {
        let mut rng = stream_rng(8, "passing-deploy");
        let mut net = HybridNetwork::linear_estimator(4, 2, passing_bank(3, 4), &mut rng).unwrap();
        net.freeze_bank();
        let q = uniform_quantizer(-2.0, 2.0, 4).unwrap();
        let x = Array2::from_shape_fn((10, 4), |_| rng.random_range(-3.0..3.0));
        let z = net::forward(net.analog(), x.view()).unwrap().into_output();
        let manual = net::forward(net.digital(), z.mapv(|v| q.apply(v)).view()).unwrap().into_output();
        assert_eq!(net.forward_deploy(x.view()).unwrap(), manual);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut rng = stream_rng(9, "lr0");
        let mut net = HybridNetwork::linear_estimator(4, 2, soft_bank(2, 4, 8.0), &mut rng).unwrap();
        let before = net.clone();
        let x = Array2::from_shape_fn((50, 4), |_| rng.random_range(-1.0..1.0));
        let s = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.0..1.0));
        let data = Batch::regression(x, s).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 8, learning_rate: 0.0, ..TrainConfig::default() };
        let report = train(&mut net, &data, &cfg).unwrap();
        let first = report.loss_history[0];
        assert!(report.loss_history.iter().all(|l| (l - first).abs() <= 1e-12 * first));
        assert_eq!(net.analog(), before.analog());
        assert_eq!(net.digital(), before.digital());
        assert!(matches!(net.bank().stage(), BankStage::Hard(_)));
    }

    #[test]
    fn linear_task_reaches_least_squares_loss() {
        let mut rng = stream_rng(10, "ls");
        let (n, ns, t) = (6, 3, 400);
        let a = Array2::from_shape_fn((ns, n), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((t, n), |_| rng.random_range(-1.0..1.0));
        let noise = Array2::from_shape_fn((t, ns), |_| rng.random_range(-0.3..0.3));
        let s = x.dot(&a.t()) + noise;

        // Closed-form least squares with intercept via normal equations.
        let mut xa = Array2::ones((t, n + 1));
        xa.slice_mut(ndarray::s![.., ..n]).assign(&x);
        let gram = xa.t().dot(&xa);
        let rhs = xa.t().dot(&s);
        let coef = solve_spd(&gram, &rhs);
        let resid = &s - &xa.dot(&coef);
        let ls_loss = resid.mapv(|v| v * v).sum() / t as f64;

        let mut net = HybridNetwork::linear_estimator(n, ns, passing_bank(ns, 4), &mut rng).unwrap();
        let data = Batch::regression(x.clone(), s.clone()).unwrap();
        // Train with a transparent bank: passing stage driven by zero dither.
        let mut order_rng = stream_rng(10, "order");
        let mut final_loss = f64::INFINITY;
        let mut order: Vec<usize> = (0..t).collect();
        for _ in 0..200 {
            order.shuffle(&mut order_rng);
            for rows in order.chunks(16) {
                let b = data.select(rows);
                let tr = net.forward_train(b.inputs().view(), &mut MidpointRng).unwrap();
                let l = net.loss(tr.output().view(), b.targets()).unwrap();
                let g = net.backward(&tr, l.gradient.view()).unwrap();
                net.sgd_step(&g, 0.02).unwrap();
            }
            let tr = net.forward_train(x.view(), &mut MidpointRng).unwrap();
            final_loss = net.loss(tr.output().view(), data.targets()).unwrap().value;
            if final_loss <= 1.01 * ls_loss {
                break;
            }
        }
        assert!(final_loss <= 1.01 * ls_loss, "{final_loss} vs {ls_loss}");
    }

    fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        // Gaussian elimination with partial pivoting.
        let n = a.nrows();
        let mut m = a.clone();
        let mut r = b.clone();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs())).unwrap();
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            for k in 0..r.ncols() {
                r.swap([col, k], [piv, k]);
            }
            for row in 0..n {
                if row != col {
                    let f = m[[row, col]] / m[[col, col]];
                    for k in 0..n {
                        m[[row, k]] -= f * m[[col, k]];
                    }
                    for k in 0..r.ncols() {
                        r[[row, k]] -= f * r[[col, k]];
                    }
                }
            }
        }
        for row in 0..n {
            let d = m[[row, row]];
            r.row_mut(row).mapv_inplace(|v| v / d);
        }
        r
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = stream_rng(11, "diverge");
        let mut net = HybridNetwork::linear_estimator(3, 2, passing_bank(2, 4), &mut rng).unwrap();
        let x = Array2::from_shape_fn((20, 3), |_| rng.random_range(-100.0..100.0));
        let s = Array2::from_shape_fn((20, 2), |_| rng.random_range(-100.0..100.0));
        let data = Batch::regression(x, s).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 20,
            learning_rate: 10.0,
            mode: TrainingMode::PassingGradient,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut net, &data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = stream_rng(12, "det");
            let mut net = HybridNetwork::symbol_detector(4, 2, 6, soft_bank(2, 4, 8.0), &mut rng).unwrap();
            let x = Array2::from_shape_fn((64, 4), |_| rng.random_range(-1.0..1.0));
            let c = (0..64).map(|_| rng.random_range(0..4)).collect();
            let data = Batch::classification(x, c, 4).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 16,
                learning_rate: 0.05,
                anneal: AnnealSchedule { factor: 1.2, co_scale_shifts: true },
                seed: 4,
                ..TrainConfig::default()
            };
            let report = train(&mut net, &data, &cfg).unwrap();
            (net, report)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut rng = stream_rng(13, "mismatch");
        let mut net = HybridNetwork::linear_estimator(3, 2, soft_bank(2, 4, 8.0), &mut rng).unwrap();
        let data = Batch::regression(Array2::zeros((4, 3)), Array2::zeros((4, 2))).unwrap();
        let cfg = TrainConfig { mode: TrainingMode::PassingGradient, ..TrainConfig::default() };
        assert!(matches!(train(&mut net, &data, &cfg), Err(Error::InvalidMode(_))));
        let wrong = Batch::classification(Array2::zeros((4, 3)), vec![0; 4], 2).unwrap();
        assert!(matches!(train(&mut net, &wrong, &TrainConfig::default()), Err(Error::InvalidMode(_))));
    }

    #[test]
    fn bank_plan_budget_matches_network() {
        let plan = LanePlan::from_resolution(240, 80, 8).unwrap();
        let bank = QuantizerBank::for_plan(&plan, BankStage::Soft(SoftQuantizerParams::uniform(8, -2.0, 2.0, 8.0).unwrap()))
            .unwrap();
        let mut rng = stream_rng(14, "plan");
        let net = HybridNetwork::linear_estimator(240, 80, bank, &mut rng).unwrap();
        assert_eq!(net.bank().lanes(), 80);
        assert_eq!(net.bank().total_bits(), 240.0);
    }

    #[test]
    fn learns_single_user_detection_at_high_snr() {
        use crate::harness::network_ber;
        use crate::mimo::{gen_detection, normalize_columns, CsiMode, DetectionScenario};

        let channel = normalize_columns(&array![[1.0], [0.5]]).unwrap();
        let scenario = DetectionScenario::from_snr_db(channel, 20.0).unwrap();
        let mut rng = stream_rng(15, "toy-detection");
        let mut net = HybridNetwork::symbol_detector(2, 1, 8, soft_bank(1, 4, 8.0), &mut rng).unwrap();
        let train_set = gen_detection(&scenario, 2000, &mut rng, CsiMode::Exact).unwrap();
        let cfg = TrainConfig { epochs: 20, batch_size: 32, learning_rate: 0.05, ..TrainConfig::default() };
        train(&mut net, &train_set.into_classification().unwrap(), &cfg).unwrap();
        let test = gen_detection(&scenario, 10_000, &mut rng, CsiMode::Exact).unwrap();
        let ber = network_ber(&net, &test).unwrap();
        assert!(ber.value < 1e-2, "ber {}", ber.value);
    }
}
