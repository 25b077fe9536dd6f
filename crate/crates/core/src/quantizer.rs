//! Scalar quantization stages.
//!
//! The trainable activation is a sum of shifted hyperbolic tangents,
//! `q(x) = Σ_i a_i · tanh(c_i·x − b_i)` with `M̃ − 1` terms. Amplitudes `a`
//! and shifts `b` are learned; slopes `c` are fixed or annealed. After
//! training, [`harden`] turns the smooth map into a true step quantizer
//! with decision thresholds at the zero crossings `b_i / c_i`.
//!
//! Region convention for [`HardQuantizer`]: a point exactly on a threshold
//! belongs to the lower cell.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};

/// Relative gap below which two sorted thresholds are treated as one.
const THRESHOLD_MERGE_TOLERANCE: f64 = 1e-12;

/// Default slope factor: `c = SLOPE_FACTOR / Δ` for initial cell width `Δ`.
pub const DEFAULT_SLOPE_FACTOR: f64 = 8.0;

/// Default support used to initialize soft quantizers and by the uniform
/// baseline quantizer.
pub const DEFAULT_SUPPORT: (f64, f64) = (-2.0, 2.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SoftQuantizerParams {
    amplitudes: Vec<f64>,
    shifts: Vec<f64>,
    slopes: Vec<f64>,
    trainable: bool,
}

/// Accumulated gradient of a scalar loss with respect to the trainable
/// quantizer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQuantizerGrad {
    pub amplitudes: Vec<f64>,
    pub shifts: Vec<f64>,
}

impl SoftQuantizerGrad {
    pub fn zeros(terms: usize) -> Self {
        Self {
            amplitudes: vec![0.0; terms],
            shifts: vec![0.0; terms],
        }
    }
}

/// Pointwise derivatives of the soft quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPointGrad {
    pub input: f64,
    pub amplitudes: Vec<f64>,
    pub shifts: Vec<f64>,
}

impl SoftQuantizerParams {
    pub fn new(amplitudes: Vec<f64>, shifts: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        let terms = amplitudes.len();
        if terms == 0 {
            return Err(Error::InvalidParameter(
                "soft quantizer needs at least one term (resolution >= 2)".into(),
            ));
        }
        if shifts.len() != terms {
            return Err(Error::dim("soft quantizer shifts", terms, shifts.len()));
        }
        if slopes.len() != terms {
            return Err(Error::dim("soft quantizer slopes", terms, slopes.len()));
        }
        if slopes.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter("slopes must be positive and finite".into()));
        }
        if amplitudes.iter().chain(&shifts).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("amplitudes and shifts must be finite".into()));
        }
        Ok(Self {
            amplitudes,
            shifts,
            slopes,
            trainable: true,
        })
    }

    /// Initial quantizer whose thresholds uniformly partition `[low, high]`,
    /// with amplitudes `(high − low) / (2(M̃ − 1))` and slopes
    /// `slope_factor / Δ`.
    pub fn uniform(resolution: usize, low: f64, high: f64, slope_factor: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidParameter(format!(
                "resolution must be at least 2, got {resolution}"
            )));
        }
        if !(low < high) {
            return Err(Error::InvalidParameter("support must satisfy low < high".into()));
        }
        if !(slope_factor > 0.0) {
            return Err(Error::InvalidParameter("slope factor must be positive".into()));
        }
        let terms = resolution - 1;
        let width = (high - low) / resolution as f64;
        let slope = slope_factor / width;
        let amplitude = (high - low) / (2.0 * terms as f64);
        let shifts = (1..=terms).map(|k| slope * (low + k as f64 * width)).collect();
        Self::new(vec![amplitude; terms], shifts, vec![slope; terms])
    }

    pub fn resolution(&self) -> usize {
        self.amplitudes.len() + 1
    }

    pub fn terms(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Freezes or unfreezes `a` and `b`. Frozen parameters ignore SGD steps.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Zero crossings `b_i / c_i` in parameter order (not sorted).
    pub fn thresholds(&self) -> Vec<f64> {
        self.shifts.iter().zip(&self.slopes).map(|(b, c)| b / c).collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for ((a, b), c) in self.amplitudes.iter().zip(&self.shifts).zip(&self.slopes) {
            acc += a * (c * x - b).tanh();
        }
        acc
    }

    /// Evaluates the map and writes `tanh(c_i·x − b_i)` for each term into
    /// `tanhs` (reused by [`Self::backprop`]).
    pub fn eval_with_tanhs(&self, x: f64, tanhs: &mut [f64]) -> f64 {
        let mut acc = 0.0;
        for (k, t) in tanhs.iter_mut().enumerate() {
            *t = (self.slopes[k] * x - self.shifts[k]).tanh();
            acc += self.amplitudes[k] * *t;
        }
        acc
    }

    /// Given the cached tanh values at some input and the upstream gradient,
    /// accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backprop(&self, tanhs: &[f64], upstream: f64, grad: &mut SoftQuantizerGrad) -> f64 {
        let mut dx = 0.0;
        for (k, &t) in tanhs.iter().enumerate() {
            let sech2 = 1.0 - t * t;
            let a = self.amplitudes[k];
            dx += a * self.slopes[k] * sech2;
            grad.amplitudes[k] += upstream * t;
            grad.shifts[k] -= upstream * a * sech2;
        }
        upstream * dx
    }

    pub fn point_grads(&self, x: f64) -> SoftPointGrad {
        let terms = self.terms();
        let mut tanhs = vec![0.0; terms];
        self.eval_with_tanhs(x, &mut tanhs);
        let mut grad = SoftQuantizerGrad::zeros(terms);
        let input = self.backprop(&tanhs, 1.0, &mut grad);
        SoftPointGrad {
            input,
            amplitudes: grad.amplitudes,
            shifts: grad.shifts,
        }
    }

    /// `a ← a − lr·∂a`, `b ← b − lr·∂b`; no-op when frozen.
    pub fn sgd_step(&mut self, grad: &SoftQuantizerGrad, learning_rate: f64) -> Result<()> {
        if grad.amplitudes.len() != self.terms() || grad.shifts.len() != self.terms() {
            return Err(Error::dim("quantizer gradient", self.terms(), grad.amplitudes.len()));
        }
        if !self.trainable {
            return Ok(());
        }
        for (a, g) in self.amplitudes.iter_mut().zip(&grad.amplitudes) {
            *a -= learning_rate * g;
        }
        for (b, g) in self.shifts.iter_mut().zip(&grad.shifts) {
            *b -= learning_rate * g;
        }
        Ok(())
    }

    /// Mutable access used by gradient checks.
    pub fn amplitudes_mut(&mut self) -> &mut [f64] {
        &mut self.amplitudes
    }

    pub fn shifts_mut(&mut self) -> &mut [f64] {
        &mut self.shifts
    }

    pub fn amplitudes_and_shifts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.amplitudes, &mut self.shifts)
    }
}

pub fn soft_quantize(x: f64, params: &SoftQuantizerParams) -> f64 {
    params.eval(x)
}

pub fn soft_quantize_grads(x: f64, params: &SoftQuantizerParams) -> SoftPointGrad {
    params.point_grads(x)
}

/// Deployable scalar quantizer: sorted thresholds and one level per region.
#[derive(Debug, Clone, PartialEq)]
pub struct HardQuantizer {
    thresholds: Vec<f64>,
    levels: Vec<f64>,
}

impl HardQuantizer {
    pub fn new(thresholds: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if levels.len() != thresholds.len() + 1 {
            return Err(Error::dim("quantizer levels", thresholds.len() + 1, levels.len()));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("thresholds must be strictly increasing".into()));
        }
        if thresholds.iter().chain(&levels).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("thresholds and levels must be finite".into()));
        }
        Ok(Self { thresholds, levels })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn resolution(&self) -> usize {
        self.levels.len()
    }

    /// Index of the region containing `x`; thresholds belong to the lower region.
    pub fn region(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&t| t < x)
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.levels[self.region(x)]
    }

    /// Interval `(lower, upper]` of region `k`, with infinite outer edges.
    pub fn cell(&self, k: usize) -> (f64, f64) {
        let lower = if k == 0 { f64::NEG_INFINITY } else { self.thresholds[k - 1] };
        let upper = self.thresholds.get(k).copied().unwrap_or(f64::INFINITY);
        (lower, upper)
    }

    /// Cell width `Δ` when the quantizer is uniform: levels equally spaced by
    /// `Δ` with thresholds halfway between adjacent levels.
    pub fn uniform_cell_width(&self) -> Option<f64> {
        if self.levels.len() < 2 {
            return None;
        }
        let step = self.levels[1] - self.levels[0];
        if !(step > 0.0) {
            return None;
        }
        let tol = 1e-9 * step.max(1.0);
        let spaced = self
            .levels
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= tol);
        let centered = self
            .thresholds
            .iter()
            .enumerate()
            .all(|(k, &t)| (t - 0.5 * (self.levels[k] + self.levels[k + 1])).abs() <= tol);
        (spaced && centered).then_some(step)
    }
}

pub fn hard_apply(q: &HardQuantizer, x: f64) -> f64 {
    q.apply(x)
}

/// Converts the smooth activation into a step quantizer.
///
/// Terms are re-indexed by increasing threshold `b_i / c_i`. The outer
/// levels are `∓Σa_i`; each interior level is the soft map evaluated at the
/// midpoint of its two thresholds. Coincident thresholds are merged.
pub fn harden(params: &SoftQuantizerParams) -> HardQuantizer {
    let mut order: Vec<usize> = (0..params.terms()).collect();
    let raw = params.thresholds();
    order.sort_by(|&i, &j| raw[i].total_cmp(&raw[j]).then(i.cmp(&j)));
    let sorted = SoftQuantizerParams {
        amplitudes: order.iter().map(|&i| params.amplitudes[i]).collect(),
        shifts: order.iter().map(|&i| params.shifts[i]).collect(),
        slopes: order.iter().map(|&i| params.slopes[i]).collect(),
        trainable: params.trainable,
    };
    let ordered = sorted.thresholds();

    let mut thresholds: Vec<f64> = Vec::with_capacity(ordered.len());
    for t in ordered {
        match thresholds.last() {
            Some(&prev) if t - prev <= THRESHOLD_MERGE_TOLERANCE * prev.abs().max(1.0) => {}
            _ => thresholds.push(t),
        }
    }
    if thresholds.len() < sorted.terms() {
        warn!(
            "hardening merged {} coincident thresholds; quantizer has {} levels instead of {}",
            sorted.terms() - thresholds.len(),
            thresholds.len() + 1,
            sorted.resolution()
        );
    }

    let total: f64 = sorted.amplitudes.iter().sum();
    let mut levels = Vec::with_capacity(thresholds.len() + 1);
    levels.push(-total);
    for w in thresholds.windows(2) {
        levels.push(sorted.eval(0.5 * w[0] + 0.5 * w[1]));
    }
    levels.push(total);
    HardQuantizer { thresholds, levels }
}

/// `levels` equal-width cells over `[low, high]`, each represented by its
/// midpoint. Inputs outside the support land in the extreme cells.
pub fn uniform_quantizer(low: f64, high: f64, levels: usize) -> Result<HardQuantizer> {
    if levels == 0 {
        return Err(Error::InvalidParameter("uniform quantizer needs at least one level".into()));
    }
    if !(low < high) {
        return Err(Error::InvalidParameter("support must satisfy low < high".into()));
    }
    let width = (high - low) / levels as f64;
    let thresholds = (1..levels).map(|k| low + k as f64 * width).collect();
    let reps = (0..levels).map(|k| low + (k as f64 + 0.5) * width).collect();
    HardQuantizer::new(thresholds, reps)
}

/// Slope annealing: `c ← c·γ^epoch`, optionally scaling `b` alongside so
/// the thresholds `b/c` stay put.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub factor: f64,
    pub co_scale_shifts: bool,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            factor: 1.0,
            co_scale_shifts: true,
        }
    }
}

impl AnnealSchedule {
    pub fn is_active(&self) -> bool {
        self.factor != 1.0
    }
}

pub fn anneal(params: &SoftQuantizerParams, epoch: u32, schedule: &AnnealSchedule) -> Result<SoftQuantizerParams> {
    if !(schedule.factor >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "annealing factor must be >= 1, got {}",
            schedule.factor
        )));
    }
    let mut out = params.clone();
    if !schedule.is_active() {
        return Ok(out);
    }
    let scale = schedule.factor.powi(epoch as i32);
    for c in &mut out.slopes {
        *c *= scale;
    }
    if schedule.co_scale_shifts {
        for b in &mut out.shifts {
            *b *= scale;
        }
    }
    Ok(out)
}

/// One passing-gradient noise sample, uniform on `[−Δ/2, Δ/2)` where `Δ` is
/// the cell width of the (uniform) quantizer.
pub fn dither_noise<R: Rng + ?Sized>(q: &HardQuantizer, rng: &mut R) -> Result<f64> {
    let width = q.uniform_cell_width().ok_or(Error::NonUniformQuantizer)?;
    let u: f64 = rng.random();
    Ok((u - 0.5) * width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Estimation,
    Detection,
}

/// Bit-budget bookkeeping for a bank of identical scalar quantizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePlan {
    pub lanes: usize,
    pub resolution: usize,
    pub nominal_rate: f64,
    /// `lanes · log2(resolution) / n`; differs from the nominal rate when
    /// flooring or the two-level clamp kicks in.
    pub effective_rate: f64,
}

// Absorbs round-off in products like n·R when they should land on integers.
const FLOOR_SLACK: f64 = 1e-9;

impl LanePlan {
    /// Plan with an explicit per-lane resolution; the nominal rate is then
    /// the effective one.
    pub fn from_resolution(input_dim: usize, lanes: usize, resolution: usize) -> Result<Self> {
        if lanes == 0 || input_dim == 0 {
            return Err(Error::InvalidParameter("lanes and input dimension must be positive".into()));
        }
        if resolution < 2 {
            return Err(Error::InvalidParameter("resolution must be at least 2".into()));
        }
        let rate = lanes as f64 * (resolution as f64).log2() / input_dim as f64;
        Ok(Self {
            lanes,
            resolution,
            nominal_rate: rate,
            effective_rate: rate,
        })
    }

    pub fn total_bits(&self) -> f64 {
        self.lanes as f64 * (self.resolution as f64).log2()
    }
}

/// Lane count and per-lane resolution for rate `R` (bits per input dimension).
///
/// Estimation uses one lane per target component; detection uses
/// `⌊n_s·R⌋` lanes. Resolution is `⌊2^{nR/p}⌋`, never below two.
pub fn lane_plan(input_dim: usize, target_dim: usize, rate: f64, task: Task) -> Result<LanePlan> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("rate must be positive, got {rate}")));
    }
    if input_dim == 0 || target_dim == 0 {
        return Err(Error::InvalidParameter("dimensions must be positive".into()));
    }
    let lanes = match task {
        Task::Estimation => target_dim,
        Task::Detection => (target_dim as f64 * rate + FLOOR_SLACK).floor() as usize,
    };
    if lanes == 0 {
        return Err(Error::InvalidParameter(format!(
            "rate {rate} yields zero quantizer lanes for {target_dim} targets"
        )));
    }
    let bits_per_lane = input_dim as f64 * rate / lanes as f64;
    if bits_per_lane > 52.0 {
        return Err(Error::InvalidParameter(format!(
            "{bits_per_lane} bits per lane is beyond the supported resolution"
        )));
    }
    let resolution = ((bits_per_lane.exp2() + FLOOR_SLACK).floor() as usize).max(2);
    Ok(LanePlan {
        lanes,
        resolution,
        nominal_rate: rate,
        effective_rate: lanes as f64 * (resolution as f64).log2() / input_dim as f64,
    })
}

/// What the quantizer lanes currently compute.
#[derive(Debug, Clone, PartialEq)]
pub enum BankStage {
    /// Training with the smooth tanh-sum activation.
    Soft(SoftQuantizerParams),
    /// Training with additive uniform noise; backward treats the stage as identity.
    PassingGradient(HardQuantizer),
    /// Deployed step quantizer.
    Hard(HardQuantizer),
}

impl BankStage {
    pub fn name(&self) -> &'static str {
        match self {
            BankStage::Soft(_) => "soft",
            BankStage::PassingGradient(_) => "passing",
            BankStage::Hard(_) => "hard",
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            BankStage::Soft(p) => p.resolution(),
            BankStage::PassingGradient(q) | BankStage::Hard(q) => q.resolution(),
        }
    }
}

/// `p` identical scalar quantizers sharing one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerBank {
    lanes: usize,
    stage: BankStage,
}

impl QuantizerBank {
    pub fn new(lanes: usize, stage: BankStage) -> Result<Self> {
        if lanes == 0 {
            return Err(Error::InvalidParameter("quantizer bank needs at least one lane".into()));
        }
        if let BankStage::PassingGradient(q) = &stage {
            q.uniform_cell_width().ok_or(Error::NonUniformQuantizer)?;
        }
        Ok(Self { lanes, stage })
    }

    /// Builds a bank for `plan` and checks that it stays within the plan's bit budget.
    pub fn for_plan(plan: &LanePlan, stage: BankStage) -> Result<Self> {
        let bank = Self::new(plan.lanes, stage)?;
        if bank.total_bits() > plan.total_bits() + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "bank uses {} bits, budget is {}",
                bank.total_bits(),
                plan.total_bits()
            )));
        }
        Ok(bank)
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn stage(&self) -> &BankStage {
        &self.stage
    }

    pub fn stage_mut(&mut self) -> &mut BankStage {
        &mut self.stage
    }

    pub fn total_bits(&self) -> f64 {
        self.lanes as f64 * (self.stage.resolution() as f64).log2()
    }

    /// Soft parameters are hardened; passing-gradient banks deploy their
    /// fixed quantizer. Hard banks are left as they are.
    pub fn freeze(&mut self) {
        let hard = match &self.stage {
            BankStage::Soft(p) => harden(p),
            BankStage::PassingGradient(q) | BankStage::Hard(q) => q.clone(),
        };
        self.stage = BankStage::Hard(hard);
    }
}
