//! Experiment orchestration: Monte Carlo evaluation, channel-estimation and
//! detection sweeps, and CSV output.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::baselines::{BoundInputs, CellObservation, MapDetector, QuantizedMapDetector};
use crate::config::{CsiChoice, ExperimentConfig, ExperimentTask, Variant};
use crate::error::{Error, Result};
use crate::hybrid::{train, HybridNetwork, TrainConfig, TrainingMode};
use crate::mimo::{
    gen_channel_est, gen_detection, gen_detection_blocks, normalize_columns, perturb_channel, random_channel,
    ChannelEstScenario, CsiMode, DetectionScenario, SampleSet, SnrMode,
};
use crate::quantizer::{
    lane_plan, uniform_quantizer, BankStage, LanePlan, QuantizerBank, SoftQuantizerParams, Task,
};
use crate::rng::{derive_seed, stream_rng};

pub const CSV_HEADER: [&str; 7] = ["sweep_var", "variant", "metric", "value", "stderr", "seed", "config_digest"];

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Sample mean and `sd / √count` of per-trial values.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            value: mean,
            stderr: (var / n).sqrt(),
        })
    }
}

/// Per-component mean squared error `(1/n_s)·‖s − ŝ‖²` averaged over rows.
pub fn mse_estimate(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Estimate> {
    if predictions.dim() != targets.dim() {
        return Err(Error::dim("prediction rows", targets.len(), predictions.len()));
    }
    let ns = targets.ncols() as f64;
    let per_row: Vec<f64> = predictions
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(p, s)| p.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ns)
        .collect();
    Estimate::from_samples(&per_row)
}

pub fn evaluate_mse(net: &HybridNetwork, test: &SampleSet) -> Result<Estimate> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let predictions = net.forward_deploy(test.inputs.view())?;
    mse_estimate(predictions.view(), test.targets.view())
}

/// Anything mapping an observation to a BPSK decision.
pub trait Detector {
    fn detect(&mut self, x: ArrayView1<f64>) -> Result<Vec<f64>>;
}

impl<F: FnMut(ArrayView1<f64>) -> Result<Vec<f64>>> Detector for F {
    fn detect(&mut self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        self(x)
    }
}

/// Bit error rate of `detector` on `samples`; the standard error treats each
/// observation (all its user bits together) as one trial.
pub fn ber_on_samples<D: Detector + ?Sized>(detector: &mut D, samples: &SampleSet) -> Result<Estimate> {
    let users = samples.targets.ncols();
    let mut per_trial = Vec::with_capacity(samples.len());
    for (x, s) in samples.inputs.rows().into_iter().zip(samples.targets.rows()) {
        let decision = detector.detect(x)?;
        if decision.len() != users {
            return Err(Error::dim("detector output", users, decision.len()));
        }
        let wrong = decision.iter().zip(s.iter()).filter(|(a, b)| a != b).count();
        per_trial.push(wrong as f64 / users as f64);
    }
    Estimate::from_samples(&per_trial)
}

/// Draws `trials` fresh observations from `scenario` and measures the BER.
pub fn evaluate_ber<D: Detector + ?Sized, R: Rng + ?Sized>(
    detector: &mut D,
    scenario: &DetectionScenario,
    trials: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let samples = gen_detection(scenario, trials, rng, CsiMode::Exact)?;
    ber_on_samples(detector, &samples)
}

pub fn network_ber(net: &HybridNetwork, samples: &SampleSet) -> Result<Estimate> {
    let predicted = net.classify_indices(samples.inputs.view())?;
    let mut k = 0;
    let users = samples.targets.ncols();
    let classes = net.output_dim();
    if classes != 1 << users {
        return Err(Error::dim("classes", 1 << users, classes));
    }
    ber_on_samples(
        &mut |_: ArrayView1<f64>| {
            let index = predicted[k];
            k += 1;
            Ok(crate::mimo::index_to_symbols(index, users))
        },
        samples,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Position of the grid point; rows sort by it before the variant name.
    pub grid_index: usize,
    pub sweep_var: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn new(seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            seed,
            config_digest: config_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, grid_index: usize, sweep_var: &str, variant: &str, metric: &str, estimate: Estimate) {
        self.rows.push(SweepRow {
            grid_index,
            sweep_var: sweep_var.to_string(),
            variant: variant.to_string(),
            metric: metric.to_string(),
            value: estimate.value,
            stderr: estimate.stderr,
        });
    }

    /// Looks up the first row matching all three labels.
    pub fn find(&self, sweep_var: &str, variant: &str, metric: &str) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.sweep_var == sweep_var && r.variant == variant && r.metric == metric)
    }

    /// Grid order first, then variant name; metrics keep insertion order.
    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| a.grid_index.cmp(&b.grid_index).then_with(|| a.variant.cmp(&b.variant)));
    }
}

/// 17 significant digits, enough to recover every `f64` exactly.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut sorted = result.clone();
    sorted.sort();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let seed = sorted.seed.to_string();
    for r in &sorted.rows {
        w.write_record([
            r.sweep_var.as_str(),
            r.variant.as_str(),
            r.metric.as_str(),
            &format_value(r.value),
            &format_value(r.stderr),
            &seed,
            &sorted.config_digest,
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(result, std::io::BufWriter::new(file))
}

/// Parses a CSV written by [`emit_csv`]. Grid indices are reassigned from
/// the order in which sweep variables first appear.
pub fn read_csv(path: &Path) -> Result<SweepResult> {
    let mut reader = csv::Reader::from_path(path)?;
    if reader.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::InvalidParameter(format!("{} has an unexpected header", path.display())));
    }
    let mut result = SweepResult::new(0, "");
    let mut grid: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |k: usize| record.get(k).unwrap_or_default();
        let number = |k: usize| {
            field(k)
                .parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad number '{}'", field(k))))
        };
        let var = field(0).to_string();
        let grid_index = grid.iter().position(|g| *g == var).unwrap_or_else(|| {
            grid.push(var.clone());
            grid.len() - 1
        });
        result.seed = field(5)
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad seed '{}'", field(5))))?;
        result.config_digest = field(6).to_string();
        result.rows.push(SweepRow {
            grid_index,
            sweep_var: var,
            variant: field(1).to_string(),
            metric: field(2).to_string(),
            value: number(3)?,
            stderr: number(4)?,
        });
    }
    Ok(result)
}

/// Bank for one learned variant at resolution `plan.resolution`, initialized
/// on the uniform partition of `[−support, support]`.
pub fn build_bank(variant: Variant, plan: &LanePlan, support: f64, slope_factor: f64) -> Result<QuantizerBank> {
    let stage = match variant {
        Variant::Soft | Variant::UniformSoft => {
            let mut params = SoftQuantizerParams::uniform(plan.resolution, -support, support, slope_factor)?;
            params.set_trainable(variant == Variant::Soft);
            BankStage::Soft(params)
        }
        Variant::Passing => BankStage::PassingGradient(uniform_quantizer(-support, support, plan.resolution)?),
    };
    QuantizerBank::for_plan(plan, stage)
}

pub fn train_config(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        quantizer_lr_scale: cfg.quantizer_lr_scale,
        mode: match variant {
            Variant::Passing => TrainingMode::PassingGradient,
            Variant::Soft | Variant::UniformSoft => TrainingMode::SoftToHard,
        },
        anneal: cfg.anneal(),
        seed,
    }
}

fn variant_label(variant: Variant, suffix: Option<&str>) -> String {
    match suffix {
        Some(s) => format!("{}+{s}", variant.name()),
        None => variant.name().to_string(),
    }
}

pub fn channel_est_scenario(cfg: &ExperimentConfig) -> Result<ChannelEstScenario> {
    ChannelEstScenario::new(cfg.users, cfg.antennas, cfg.pilot_len, cfg.snr)
}

/// Trains one channel estimator. Returns the deployed network.
pub fn train_channel_estimator(
    cfg: &ExperimentConfig,
    scenario: &ChannelEstScenario,
    resolution: usize,
    variant: Variant,
    snr_mode: SnrMode,
    label: &str,
) -> Result<(HybridNetwork, Vec<f64>)> {
    let plan = LanePlan::from_resolution(scenario.input_dim(), scenario.target_dim(), resolution)?;
    let bank = build_bank(variant, &plan, cfg.support, cfg.slope_factor)?;
    let mut init = stream_rng(cfg.seed, &format!("{label}/init"));
    let mut net = HybridNetwork::linear_estimator(scenario.input_dim(), scenario.target_dim(), bank, &mut init)?;
    let mut data_rng = stream_rng(cfg.seed, &format!("{label}/data"));
    let data = gen_channel_est(scenario, cfg.train_size, &mut data_rng, snr_mode)?.into_regression()?;
    let report = train(
        &mut net,
        &data,
        &train_config(cfg, variant, derive_seed(cfg.seed, &format!("{label}/train"))),
    )?;
    Ok((net, report.loss_history))
}

/// MSE versus quantizer resolution. Per resolution the rows carry the lane
/// plan, both analytic bounds at the effective rate and the deployed MSE of
/// every learned variant.
pub fn run_channel_est_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    if cfg.task != ExperimentTask::ChannelEst {
        return Err(Error::Config("channel-estimation sweep needs task = channel-est".into()));
    }
    let scenario = channel_est_scenario(cfg)?;
    let mut result = SweepResult::new(cfg.seed, cfg.digest());
    let mut eval_rng = stream_rng(cfg.seed, "channel-est/eval");
    let eval = gen_channel_est(&scenario, cfg.eval_size, &mut eval_rng, SnrMode::Fixed)?;

    let mut modes = vec![(SnrMode::Fixed, None)];
    if cfg.snr_uncertainty {
        modes.push((SnrMode::UNCERTAIN, Some("snr-uncertain")));
    }
    for (g, &resolution) in cfg.resolutions.iter().enumerate() {
        let var = format!("resolution={resolution}");
        let plan = LanePlan::from_resolution(scenario.input_dim(), scenario.target_dim(), resolution)?;
        push_plan(&mut result, g, &var, &plan);
        let bounds = BoundInputs::new(cfg.snr, cfg.pilot_len as f64, scenario.ratio(), plan.effective_rate)?;
        if cfg.baselines {
            result.push(g, &var, "mmse", "mse", Estimate::exact(bounds.mmse()));
            result.push(g, &var, "limit", "mse", Estimate::exact(bounds.limit()));
        }
        for &variant in &cfg.variants {
            for &(snr_mode, suffix) in &modes {
                let name = variant_label(variant, suffix);
                let label = format!("channel-est/{var}/{name}");
                info!("training {label}");
                match train_channel_estimator(cfg, &scenario, resolution, variant, snr_mode, &label) {
                    Ok((net, history)) => {
                        result.push(g, &var, &name, "mse", evaluate_mse(&net, &eval)?);
                        result.push(g, &var, &name, "train_loss", Estimate::exact(last(&history)));
                    }
                    Err(Error::Diverged { epoch, loss }) => {
                        warn!("{label} diverged at epoch {epoch} (loss {loss})");
                        push_failure(&mut result, g, &var, &name, epoch);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    result.sort();
    Ok(result)
}

fn last(history: &[f64]) -> f64 {
    history.last().copied().unwrap_or(f64::NAN)
}

fn push_plan(result: &mut SweepResult, g: usize, var: &str, plan: &LanePlan) {
    result.push(g, var, "plan", "lanes", Estimate::exact(plan.lanes as f64));
    result.push(g, var, "plan", "resolution", Estimate::exact(plan.resolution as f64));
    result.push(g, var, "plan", "nominal_rate", Estimate::exact(plan.nominal_rate));
    result.push(g, var, "plan", "effective_rate", Estimate::exact(plan.effective_rate));
}

fn push_failure(result: &mut SweepResult, g: usize, var: &str, name: &str, epoch: usize) {
    result.push(
        g,
        var,
        name,
        "failed",
        Estimate {
            value: epoch as f64,
            stderr: f64::NAN,
        },
    );
}

/// Fixed channel of the detection experiments, drawn from `channel_seed`.
pub fn detection_channel(cfg: &ExperimentConfig) -> Result<Array2<f64>> {
    let mut rng = stream_rng(cfg.channel_seed, "detection/channel");
    let h = random_channel(cfg.antennas, cfg.users, &mut rng);
    if cfg.normalize_channel {
        normalize_columns(&h)
    } else {
        Ok(h)
    }
}

/// Evaluation observations at one SNR, shared by every rate and variant.
pub fn detection_eval_set(cfg: &ExperimentConfig, scenario: &DetectionScenario) -> Result<SampleSet> {
    let mut rng = stream_rng(cfg.seed, &format!("detection/snr_db={}/eval", scenario.snr_db()));
    gen_detection(scenario, cfg.eval_size, &mut rng, CsiMode::Exact)
}

pub fn train_detector(
    cfg: &ExperimentConfig,
    scenario: &DetectionScenario,
    rate: f64,
    variant: Variant,
    csi: CsiChoice,
    label: &str,
) -> Result<(HybridNetwork, Vec<f64>)> {
    let plan = lane_plan(scenario.antennas(), scenario.users(), rate, Task::Detection)?;
    let bank = build_bank(variant, &plan, cfg.support, cfg.slope_factor)?;
    let mut init = stream_rng(cfg.seed, &format!("{label}/init"));
    let mut net = HybridNetwork::symbol_detector(scenario.antennas(), scenario.users(), cfg.hidden_width, bank, &mut init)?;
    let mut data_rng = stream_rng(cfg.seed, &format!("{label}/data"));
    let data = gen_detection_blocks(scenario, cfg.train_size, cfg.csi_block, &mut data_rng, cfg.csi_mode(csi))?
        .into_classification()?;
    let report = train(
        &mut net,
        &data,
        &train_config(cfg, variant, derive_seed(cfg.seed, &format!("{label}/train"))),
    )?;
    Ok((net, report.loss_history))
}

/// MAP with a fresh perturbed channel estimate per observation.
pub fn perturbed_map_ber(cfg: &ExperimentConfig, scenario: &DetectionScenario, eval: &SampleSet) -> Result<Estimate> {
    let CsiMode::Perturbed { fraction, rule } = cfg.csi_mode(CsiChoice::Perturbed) else {
        unreachable!("perturbed choice maps to a perturbed mode")
    };
    let mut rng = stream_rng(cfg.seed, &format!("detection/snr_db={}/map-csi", scenario.snr_db()));
    let sigma = scenario.noise_std();
    ber_on_samples(
        &mut |x: ArrayView1<f64>| {
            let estimate = perturb_channel(scenario.channel(), fraction, rule, &mut rng);
            MapDetector::new(&estimate, sigma)?.detect(x)
        },
        eval,
    )
}

/// Resolution of the quantized-MAP baseline: `⌊2^R⌋` levels per antenna.
pub fn qmap_resolution(rate: f64) -> usize {
    ((2f64.powf(rate) + 1e-9).floor() as usize).max(2)
}

pub fn qmap_ber(
    cfg: &ExperimentConfig,
    scenario: &DetectionScenario,
    rate: f64,
    eval: &SampleSet,
) -> Result<Estimate> {
    let q = uniform_quantizer(-cfg.support, cfg.support, qmap_resolution(rate))?;
    let det = QuantizedMapDetector::new(scenario.channel(), scenario.noise_std())?;
    ber_on_samples(&mut |x: ArrayView1<f64>| det.detect(&CellObservation::observe(&q, x)), eval)
}

/// Baseline rows of one detection grid point.
fn push_detection_baselines(
    result: &mut SweepResult,
    g: usize,
    var: &str,
    cfg: &ExperimentConfig,
    scenario: &DetectionScenario,
    rate: f64,
    eval: &SampleSet,
) -> Result<()> {
    let map = MapDetector::new(scenario.channel(), scenario.noise_std())?;
    result.push(g, var, "map", "ber", ber_on_samples(&mut |x: ArrayView1<f64>| map.detect(x), eval)?);
    if cfg.csi.contains(&CsiChoice::Perturbed) {
        result.push(g, var, "map+csi-perturbed", "ber", perturbed_map_ber(cfg, scenario, eval)?);
    }
    result.push(g, var, "qmap", "ber", qmap_ber(cfg, scenario, rate, eval)?);
    result.push(g, var, "qmap", "resolution", Estimate::exact(qmap_resolution(rate) as f64));
    Ok(())
}

fn detection_grid(cfg: &ExperimentConfig) -> Vec<(f64, f64, String)> {
    cfg.rates
        .iter()
        .flat_map(|&r| cfg.snr_db.iter().map(move |&s| (r, s, format!("rate={r};snr_db={s}"))))
        .collect()
}

/// BER over the (rate, SNR) grid for every learned variant and CSI choice,
/// plus MAP, perturbed-CSI MAP and quantized MAP.
pub fn run_detection_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    if cfg.task != ExperimentTask::Detection {
        return Err(Error::Config("detection sweep needs task = detection".into()));
    }
    let channel = detection_channel(cfg)?;
    let mut result = SweepResult::new(cfg.seed, cfg.digest());
    for (g, (rate, snr_db, var)) in detection_grid(cfg).into_iter().enumerate() {
        let scenario = DetectionScenario::from_snr_db(channel.clone(), snr_db)?;
        let eval = detection_eval_set(cfg, &scenario)?;
        let plan = lane_plan(scenario.antennas(), scenario.users(), rate, Task::Detection)?;
        push_plan(&mut result, g, &var, &plan);
        if cfg.baselines {
            push_detection_baselines(&mut result, g, &var, cfg, &scenario, rate, &eval)?;
        }
        for &csi in &cfg.csi {
            let suffix = (csi == CsiChoice::Perturbed).then_some("csi-perturbed");
            for &variant in &cfg.variants {
                let name = variant_label(variant, suffix);
                let label = format!("detection/{var}/{name}");
                info!("training {label}");
                match train_detector(cfg, &scenario, rate, variant, csi, &label) {
                    Ok((net, history)) => {
                        result.push(g, &var, &name, "ber", network_ber(&net, &eval)?);
                        result.push(g, &var, &name, "train_loss", Estimate::exact(last(&history)));
                    }
                    Err(Error::Diverged { epoch, loss }) => {
                        warn!("{label} diverged at epoch {epoch} (loss {loss})");
                        push_failure(&mut result, g, &var, &name, epoch);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    result.sort();
    Ok(result)
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    match cfg.task {
        ExperimentTask::ChannelEst => run_channel_est_sweep(cfg),
        ExperimentTask::Detection => run_detection_sweep(cfg),
    }
}

/// Baseline rows only: analytic bounds for channel estimation, MAP curves
/// for detection.
pub fn run_baselines(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let mut result = SweepResult::new(cfg.seed, cfg.digest());
    match cfg.task {
        ExperimentTask::ChannelEst => {
            let scenario = channel_est_scenario(cfg)?;
            for (g, &resolution) in cfg.resolutions.iter().enumerate() {
                let var = format!("resolution={resolution}");
                let plan = LanePlan::from_resolution(scenario.input_dim(), scenario.target_dim(), resolution)?;
                push_plan(&mut result, g, &var, &plan);
                let bounds = BoundInputs::new(cfg.snr, cfg.pilot_len as f64, scenario.ratio(), plan.effective_rate)?;
                result.push(g, &var, "mmse", "mse", Estimate::exact(bounds.mmse()));
                result.push(g, &var, "limit", "mse", Estimate::exact(bounds.limit()));
            }
        }
        ExperimentTask::Detection => {
            let channel = detection_channel(cfg)?;
            for (g, (rate, snr_db, var)) in detection_grid(cfg).into_iter().enumerate() {
                let scenario = DetectionScenario::from_snr_db(channel.clone(), snr_db)?;
                let eval = detection_eval_set(cfg, &scenario)?;
                push_detection_baselines(&mut result, g, &var, cfg, &scenario, rate, &eval)?;
            }
        }
    }
    result.sort();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo::index_to_symbols;
    use ndarray::array;

    fn small_detection() -> ExperimentConfig {
        ExperimentConfig {
            rates: vec![1.0],
            snr_db: vec![8.0],
            train_size: 200,
            eval_size: 300,
            epochs: 2,
            hidden_width: 8,
            csi: vec![CsiChoice::Exact, CsiChoice::Perturbed],
            ..ExperimentConfig::detection()
        }
    }

    #[test]
    fn estimate_from_samples() {
        let e = Estimate::from_samples(&[1.0, 3.0]).unwrap();
        assert_eq!(e.value, 2.0);
        assert!((e.stderr - 1.0).abs() < 1e-15);
        assert!(Estimate::from_samples(&[]).is_err());
    }

    #[test]
    fn mse_of_perfect_and_zero_predictors() {
        let scenario = ChannelEstScenario::new(4, 10, 12, 4.0).unwrap();
        let set = gen_channel_est(&scenario, 4096, &mut stream_rng(0, "mse"), SnrMode::Fixed).unwrap();
        assert_eq!(mse_estimate(set.targets.view(), set.targets.view()).unwrap().value, 0.0);
        let zero = Array2::zeros(set.targets.raw_dim());
        let e = mse_estimate(zero.view(), set.targets.view()).unwrap();
        assert!((e.value - 0.5).abs() < 3.0 * e.stderr + 1e-3, "{e:?}");
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = stream_rng(1, "mse-loop");
        let p = Array2::from_shape_fn((17, 5), |_| rng.random_range(-1.0..1.0));
        let s = Array2::from_shape_fn((17, 5), |_| rng.random_range(-1.0..1.0));
        let mut total = 0.0;
        for j in 0..17 {
            let mut row = 0.0;
            for i in 0..5 {
                row += (p[[j, i]] - s[[j, i]]) * (p[[j, i]] - s[[j, i]]);
            }
            total += row / 5.0;
        }
        let e = mse_estimate(p.view(), s.view()).unwrap();
        assert!((e.value - total / 17.0).abs() < 1e-12);
        let empty = Array2::<f64>::zeros((0, 5));
        assert!(mse_estimate(empty.view(), empty.view()).is_err());
    }

    #[test]
    fn ber_of_oracle_and_coin_flip() {
        let h = normalize_columns(&random_channel(12, 4, &mut stream_rng(2, "h"))).unwrap();
        let scenario = DetectionScenario::from_snr_db(h, 10.0).unwrap();
        let set = gen_detection(&scenario, 5000, &mut stream_rng(2, "set"), CsiMode::Exact).unwrap();
        let mut k = 0;
        let oracle = ber_on_samples(
            &mut |_: ArrayView1<f64>| {
                k += 1;
                Ok(set.targets.row(k - 1).to_vec())
            },
            &set,
        )
        .unwrap();
        assert_eq!(oracle.value, 0.0);

        let mut coin = stream_rng(2, "coin");
        let mut flip = |_: ArrayView1<f64>| Ok((0..4).map(|_| if coin.random::<bool>() { 1.0 } else { -1.0 }).collect());
        let e = evaluate_ber(&mut flip, &scenario, 5000, &mut stream_rng(2, "fresh")).unwrap();
        assert!((e.value - 0.5).abs() < 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn csv_round_trip_and_order() {
        let mut r = SweepResult::new(7, "abc");
        r.push(1, "x=2", "zeta", "ber", Estimate { value: 0.1, stderr: 1e-3 });
        r.push(0, "x=1", "soft", "ber", Estimate { value: 1.0 / 3.0, stderr: f64::MIN_POSITIVE });
        r.push(0, "x=1", "map", "ber", Estimate { value: 2.0f64.sqrt(), stderr: 0.0 });
        r.push(0, "x=1", "map", "other", Estimate::exact(-7.5e-300));
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_csv(&r, &a).unwrap();
        emit_csv(&r, &b).unwrap();
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text, std::fs::read_to_string(&b).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sweep_var,variant,metric,value,stderr,seed,config_digest");
        assert!(lines[1].starts_with("x=1,map,ber,"));
        assert!(lines[2].starts_with("x=1,map,other,"));
        assert!(lines[3].starts_with("x=1,soft,ber,3.3333333333333331e-1,"));
        assert!(lines[4].starts_with("x=2,zeta,"));

        let mut back = read_csv(&a).unwrap();
        let mut sorted = r.clone();
        sorted.sort();
        back.sort();
        assert_eq!(back.seed, 7);
        for (x, y) in back.rows.iter().zip(&sorted.rows) {
            assert_eq!((x.value.to_bits(), x.stderr.to_bits()), (y.value.to_bits(), y.stderr.to_bits()));
            assert_eq!((&x.sweep_var, &x.variant, &x.metric), (&y.sweep_var, &y.variant, &y.metric));
        }
    }

    #[test]
    fn empty_result_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_csv(&SweepResult::new(0, "d"), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "sweep_var,variant,metric,value,stderr,seed,config_digest\n");
    }

    #[test]
    fn qmap_resolution_rule() {
        assert_eq!(qmap_resolution(1.0), 2);
        assert_eq!(qmap_resolution(2.0), 4);
        assert_eq!(qmap_resolution(3.0), 8);
        assert_eq!(qmap_resolution(1.5), 2);
    }

    #[test]
    fn detection_sweep_rows_and_baseline_independence() {
        let cfg = small_detection();
        let r = run_detection_sweep(&cfg).unwrap();
        let var = "rate=1;snr_db=8";
        for (variant, metric) in [
            ("plan", "lanes"),
            ("map", "ber"),
            ("map+csi-perturbed", "ber"),
            ("qmap", "ber"),
            ("soft", "ber"),
            ("passing", "ber"),
            ("uniform-soft", "ber"),
            ("soft+csi-perturbed", "ber"),
        ] {
            assert!(r.find(var, variant, metric).is_some(), "{variant}/{metric}");
        }
        assert_eq!(r.find(var, "plan", "lanes").unwrap().value, 4.0);

        let other = ExperimentConfig {
            variants: vec![Variant::Passing],
            epochs: 1,
            ..cfg.clone()
        };
        let r2 = run_detection_sweep(&other).unwrap();
        for b in ["map", "qmap", "map+csi-perturbed"] {
            assert_eq!(r.find(var, b, "ber"), r2.find(var, b, "ber"));
        }
        let baselines = run_baselines(&cfg).unwrap();
        assert_eq!(baselines.find(var, "map", "ber"), r.find(var, "map", "ber"));
    }

    #[test]
    fn lane_plan_column_at_rate_two() {
        let cfg = ExperimentConfig {
            rates: vec![2.0],
            baselines: false,
            ..small_detection()
        };
        let r = run_detection_sweep(&ExperimentConfig { variants: vec![Variant::Soft], csi: vec![CsiChoice::Exact], ..cfg })
            .unwrap();
        let var = "rate=2;snr_db=8";
        assert_eq!(r.find(var, "plan", "lanes").unwrap().value, 8.0);
        assert_eq!(r.find(var, "plan", "resolution").unwrap().value, 8.0);
    }

    #[test]
    fn channel_est_bounds_rows() {
        let cfg = ExperimentConfig {
            resolutions: vec![8],
            ..ExperimentConfig::channel_est()
        };
        let r = run_baselines(&cfg).unwrap();
        let limit = r.find("resolution=8", "limit", "mse").unwrap().value;
        assert!((limit - 0.017857).abs() < 1e-6, "{limit}");
        assert_eq!(r.find("resolution=8", "plan", "effective_rate").unwrap().value, 1.0);
    }

    #[test]
    fn network_ber_uses_decoded_classes() {
        let mut rng = stream_rng(3, "nb");
        let bank = build_bank(Variant::Soft, &LanePlan::from_resolution(2, 2, 2).unwrap(), 2.0, 8.0).unwrap();
        let mut net = HybridNetwork::symbol_detector(2, 1, 4, bank, &mut rng).unwrap();
        net.freeze_bank();
        let set = SampleSet {
            targets: array![[1.0], [-1.0]],
            inputs: array![[0.3, 0.1], [0.2, -0.4]],
        };
        let idx = net.classify_indices(set.inputs.view()).unwrap();
        let expected = idx
            .iter()
            .zip(set.targets.rows())
            .filter(|(&i, s)| index_to_symbols(i, 1)[0] != s[0])
            .count() as f64
            / 2.0;
        assert_eq!(network_ber(&net, &set).unwrap().value, expected);
    }
}
