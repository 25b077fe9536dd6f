//! Data generators for the two MIMO experiment families.
//!
//! * Pilot-based channel estimation: `y = √P (Φ ⊗ I_{n_t}) h + w` with
//!   complex quantities flattened as `[Re; Im]`.
//! * Real-valued BPSK multi-user detection: `x = H s + w`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::Batch;

/// Tolerance for the pilot orthogonality check `Φ^H Φ = τ·I`.
pub const PILOT_ORTHOGONALITY_TOLERANCE: f64 = 1e-9;

/// First `n_u` columns of the unnormalized `τ × τ` DFT matrix:
/// `Φ[k, l] = exp(−j·2π·k·l/τ)`.
pub fn dft_pilots(pilot_len: usize, users: usize) -> Result<Array2<Complex64>> {
    if users == 0 || pilot_len < users {
        return Err(Error::InvalidParameter(format!(
            "pilot length {pilot_len} must be at least the user count {users} (> 0)"
        )));
    }
    Ok(Array2::from_shape_fn((pilot_len, users), |(k, l)| {
        // Reduce k·l mod τ first so the angle stays small and exact for l = 0.
        let phase = -2.0 * std::f64::consts::PI * ((k * l) % pilot_len) as f64 / pilot_len as f64;
        Complex64::from_polar(1.0, phase)
    }))
}

/// Max-norm distance between `Φ^H Φ` and `τ·I`.
pub fn pilot_orthogonality_error(pilots: &Array2<Complex64>) -> f64 {
    let gram = pilots.t().mapv(|z| z.conj()).dot(pilots);
    let tau = pilots.nrows() as f64;
    gram.indexed_iter()
        .map(|((i, j), z)| {
            let target = if i == j { tau } else { 0.0 };
            (z - Complex64::new(target, 0.0)).norm()
        })
        .fold(0.0, f64::max)
}

/// `[Re(v); Im(v)]`.
pub fn real_embed(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)).collect()
}

/// Inverse of [`real_embed`].
pub fn real_unembed(v: &[f64]) -> Result<Vec<Complex64>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::InvalidParameter("real embedding must have even length".into()));
    }
    let half = v.len() / 2;
    Ok((0..half).map(|k| Complex64::new(v[k], v[half + k])).collect())
}

/// Targets and observations, one row per realization.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub targets: Array2<f64>,
    pub inputs: Array2<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn into_regression(self) -> Result<Batch> {
        Batch::regression(self.inputs, self.targets)
    }

    /// Classification batch with BPSK target rows mapped to class indices.
    pub fn into_classification(self) -> Result<Batch> {
        let users = self.targets.ncols();
        let classes = self.targets.rows().into_iter().map(symbols_to_index).collect();
        Batch::classification(self.inputs, classes, 1 << users)
    }

    /// Dumps the set as CSV with columns `s_0…, x_0…` and a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header: Vec<String> = (0..self.targets.ncols())
            .map(|k| format!("s_{k}"))
            .chain((0..self.inputs.ncols()).map(|k| format!("x_{k}")))
            .collect();
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(out, "{}", header.join(","))?;
            for (s, x) in self.targets.rows().into_iter().zip(self.inputs.rows()) {
                let fields: Vec<String> = s.iter().chain(x.iter()).map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", fields.join(","))?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstScenario {
    users: usize,
    antennas: usize,
    snr: f64,
    pilots: Array2<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrMode {
    Fixed,
    /// `P` redrawn uniformly on `[low, high]` for every realization.
    Uniform { low: f64, high: f64 },
}

impl SnrMode {
    pub const UNCERTAIN: SnrMode = SnrMode::Uniform { low: 1.0, high: 10.0 };
}

impl ChannelEstScenario {
    pub fn new(users: usize, antennas: usize, pilot_len: usize, snr: f64) -> Result<Self> {
        Self::with_pilots(antennas, snr, dft_pilots(pilot_len, users)?)
    }

    pub fn with_pilots(antennas: usize, snr: f64, pilots: Array2<Complex64>) -> Result<Self> {
        let (pilot_len, users) = pilots.dim();
        if antennas == 0 || users == 0 || pilot_len < users {
            return Err(Error::InvalidParameter(
                "need antennas > 0, users > 0 and pilot length >= users".into(),
            ));
        }
        if !(snr >= 0.0 && snr.is_finite()) {
            return Err(Error::InvalidParameter(format!("SNR must be non-negative, got {snr}")));
        }
        let err = pilot_orthogonality_error(&pilots);
        if err > PILOT_ORTHOGONALITY_TOLERANCE * pilot_len as f64 {
            return Err(Error::InvalidParameter(format!(
                "pilots are not orthogonal: max |Φ^H Φ − τI| = {err}"
            )));
        }
        Ok(Self {
            users,
            antennas,
            snr,
            pilots,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn pilot_len(&self) -> usize {
        self.pilots.nrows()
    }

    pub fn snr(&self) -> f64 {
        self.snr
    }

    pub fn pilots(&self) -> &Array2<Complex64> {
        &self.pilots
    }

    /// Observation dimension `n = 2·τ·n_t`.
    pub fn input_dim(&self) -> usize {
        2 * self.pilot_len() * self.antennas
    }

    /// Target dimension `n_s = 2·n_u·n_t`.
    pub fn target_dim(&self) -> usize {
        2 * self.users * self.antennas
    }

    /// Pilot-to-user ratio `ρ = τ / n_u`.
    pub fn ratio(&self) -> f64 {
        self.pilot_len() as f64 / self.users as f64
    }

    /// `√P (Φ ⊗ I_{n_t}) h + w`; `h` is stacked user by user.
    pub fn observe(&self, channel: &[Complex64], noise: &[Complex64], snr: f64) -> Result<Vec<Complex64>> {
        let (tau, nt) = (self.pilot_len(), self.antennas);
        if channel.len() != self.users * nt {
            return Err(Error::dim("channel vector", self.users * nt, channel.len()));
        }
        if noise.len() != tau * nt {
            return Err(Error::dim("noise vector", tau * nt, noise.len()));
        }
        let gain = snr.sqrt();
        let mut y = noise.to_vec();
        for k in 0..tau {
            for l in 0..self.users {
                let phi = self.pilots[[k, l]] * gain;
                for a in 0..nt {
                    y[k * nt + a] += phi * channel[l * nt + a];
                }
            }
        }
        Ok(y)
    }
}

/// Draws `count` pairs `(real_embed(h), real_embed(y))`.
pub fn gen_channel_est<R: Rng + ?Sized>(
    scenario: &ChannelEstScenario,
    count: usize,
    rng: &mut R,
    snr_mode: SnrMode,
) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::Empty("sample request"));
    }
    if let SnrMode::Uniform { low, high } = snr_mode {
        if !(0.0 <= low && low <= high) {
            return Err(Error::InvalidParameter("SNR range must satisfy 0 <= low <= high".into()));
        }
    }
    let (ns, n) = (scenario.target_dim(), scenario.input_dim());
    let mut targets = Array2::zeros((count, ns));
    let mut inputs = Array2::zeros((count, n));
    let mut h = vec![Complex64::default(); ns / 2];
    let mut w = vec![Complex64::default(); n / 2];
    for j in 0..count {
        h.iter_mut().for_each(|z| *z = complex_normal(rng));
        w.iter_mut().for_each(|z| *z = complex_normal(rng));
        let snr = match snr_mode {
            SnrMode::Fixed => scenario.snr,
            SnrMode::Uniform { low, high } => rng.random_range(low..=high),
        };
        let y = scenario.observe(&h, &w, snr)?;
        for (dst, v) in targets.row_mut(j).iter_mut().zip(real_embed(&h)) {
            *dst = v;
        }
        for (dst, v) in inputs.row_mut(j).iter_mut().zip(real_embed(&y)) {
            *dst = v;
        }
    }
    Ok(SampleSet { targets, inputs })
}

/// Real MIMO channel with i.i.d. standard normal entries.
pub fn random_channel<R: Rng + ?Sized>(antennas: usize, users: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((antennas, users), |_| StandardNormal.sample(rng))
}

/// Scales every column to unit Euclidean norm, so that `1/σ_w²` is the
/// received per-user SNR.
pub fn normalize_columns(channel: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = channel.clone();
    for mut col in out.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidParameter("channel has an all-zero column".into()));
        }
        col /= norm;
    }
    Ok(out)
}

pub fn snr_db_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScenario {
    channel: Array2<f64>,
    noise_var: f64,
}

impl DetectionScenario {
    pub fn new(channel: Array2<f64>, noise_var: f64) -> Result<Self> {
        if channel.is_empty() {
            return Err(Error::InvalidParameter("channel matrix is empty".into()));
        }
        if channel.ncols() > 24 {
            return Err(Error::InvalidParameter(format!(
                "{} users exceeds the 24-user enumeration limit",
                channel.ncols()
            )));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        Ok(Self { channel, noise_var })
    }

    /// SNR in dB is `10·log10(1/σ_w²)`.
    pub fn from_snr_db(channel: Array2<f64>, snr_db: f64) -> Result<Self> {
        Self::new(channel, snr_db_to_noise_var(snr_db))
    }

    pub fn channel(&self) -> &Array2<f64> {
        &self.channel
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_var.sqrt()
    }

    pub fn antennas(&self) -> usize {
        self.channel.nrows()
    }

    pub fn users(&self) -> usize {
        self.channel.ncols()
    }

    pub fn snr_db(&self) -> f64 {
        -10.0 * self.noise_var.log10()
    }
}

/// How the per-entry perturbation variance scales with `|H_ij|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationRule {
    /// `Var(E_ij) = fraction · |H_ij|`.
    Linear,
    /// `Var(E_ij) = (fraction · |H_ij|)²`.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CsiMode {
    Exact,
    Perturbed { fraction: f64, rule: PerturbationRule },
}

impl CsiMode {
    pub const PERTURBED_20: CsiMode = CsiMode::Perturbed {
        fraction: 0.2,
        rule: PerturbationRule::Linear,
    };
}

/// `H + E` with independent Gaussian `E_ij` whose variance follows `rule`.
pub fn perturb_channel<R: Rng + ?Sized>(
    channel: &Array2<f64>,
    fraction: f64,
    rule: PerturbationRule,
    rng: &mut R,
) -> Array2<f64> {
    channel.mapv(|h| {
        let var = match rule {
            PerturbationRule::Linear => fraction * h.abs(),
            PerturbationRule::Squared => (fraction * h).powi(2),
        };
        let e: f64 = StandardNormal.sample(rng);
        h + var.sqrt() * e
    })
}

/// Little-endian class index of a BPSK vector: bit `k` is set when user `k`
/// sent `+1`.
pub fn symbols_to_index(symbols: ArrayView1<f64>) -> usize {
    symbols
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(k, _)| 1usize << k)
        .sum()
}

pub fn index_to_symbols(index: usize, users: usize) -> Vec<f64> {
    (0..users)
        .map(|k| if (index >> k) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Draws `count` pairs `(s, H̃ s + w)`. In perturbed mode one `H̃` is drawn
/// for the whole call.
pub fn gen_detection<R: Rng + ?Sized>(
    scenario: &DetectionScenario,
    count: usize,
    rng: &mut R,
    csi: CsiMode,
) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::Empty("sample request"));
    }
    let channel = match csi {
        CsiMode::Exact => scenario.channel.clone(),
        CsiMode::Perturbed { fraction, rule } => {
            if !(fraction >= 0.0) {
                return Err(Error::InvalidParameter("perturbation fraction must be >= 0".into()));
            }
            perturb_channel(&scenario.channel, fraction, rule, rng)
        }
    };
    let (nt, nu) = channel.dim();
    let sigma = scenario.noise_std();
    let mut targets = Array2::zeros((count, nu));
    let mut inputs = Array2::zeros((count, nt));
    for j in 0..count {
        for k in 0..nu {
            targets[[j, k]] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        for a in 0..nt {
            let mut acc = 0.0;
            for k in 0..nu {
                acc += channel[[a, k]] * targets[[j, k]];
            }
            let w: f64 = StandardNormal.sample(rng);
            inputs[[j, a]] = acc + sigma * w;
        }
    }
    Ok(SampleSet { targets, inputs })
}

/// Generates `count` samples in blocks of `block`, one `gen_detection` call
/// (and so one fresh channel perturbation) per block.
pub fn gen_detection_blocks<R: Rng + ?Sized>(
    scenario: &DetectionScenario,
    count: usize,
    block: usize,
    rng: &mut R,
    csi: CsiMode,
) -> Result<SampleSet> {
    if block == 0 {
        return Err(Error::InvalidParameter("block size must be positive".into()));
    }
    let mut targets = Array2::zeros((0, scenario.users()));
    let mut inputs = Array2::zeros((0, scenario.antennas()));
    let mut done = 0;
    while done < count {
        let size = block.min(count - done);
        let part = gen_detection(scenario, size, rng, csi)?;
        targets.append(ndarray::Axis(0), part.targets.view()).expect("matching widths");
        inputs.append(ndarray::Axis(0), part.inputs.view()).expect("matching widths");
        done += size;
    }
    if done == 0 {
        return Err(Error::Empty("sample request"));
    }
    Ok(SampleSet { targets, inputs })
}
